use std::collections::BTreeMap;

use super::{DiffError, ParamStore, Tensor};

/// Adam moments, step counter and an exponentially decaying learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    /// Global-norm clipping threshold; `0` disables clipping.
    pub clip_norm: f64,
}

impl OptimState {
    pub fn new(params: &ParamStore, base_lr: f64, decay_rate: f64, decay_every: u64) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            decay_rate,
            decay_every,
            clip_norm: 0.0,
        }
    }
}

/// `base_lr · decay_rate^⌊step / decay_every⌋`
pub fn lr_schedule(step: u64, state: &OptimState) -> f64 {
    let every = state.decay_every.max(1);
    state.base_lr * state.decay_rate.powi((step / every) as i32)
}

/// Global L2 norm over a gradient map.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// One bias-corrected Adam update using the scheduled learning rate at
/// the current step. Increments the step counter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
) -> Result<(), DiffError> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(format!("missing gradient for {name}")))?;
        let m = state
            .m
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(format!("missing moment for {name}")))?;
        for other in [g.shape(), m.shape(), state.v[name].shape()] {
            if other != p.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: other.to_vec(),
                });
            }
        }
    }

    let lr = lr_schedule(state.step, state);
    let clip_scale = if state.clip_norm > 0.0 {
        let norm = grad_norm(grads);
        if norm > state.clip_norm {
            state.clip_norm / norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);

    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi * clip_scale;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_setup(value: f64) -> (ParamStore, OptimState) {
        let mut p = ParamStore::new(0);
        p.insert("w", Tensor::scalar(value)).unwrap();
        let s = OptimState::new(&p, 5e-4, 0.97, 2000);
        (p, s)
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, mut s) = scalar_setup(1.0);
        adam_step(&mut p, &grads(2.0), &mut s).unwrap();
        let delta = p.get("w").unwrap().data()[0] - 1.0;
        let expected = -5e-4 * (2.0 / (2.0 + 1e-8));
        assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_except_step() {
        let (mut p, mut s) = scalar_setup(0.25);
        adam_step(&mut p, &grads(0.0), &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.25);
        assert_eq!(s.m["w"].data()[0], 0.0);
        assert_eq!(s.v["w"].data()[0], 0.0);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn beta1_zero_is_sign_scaled_sgd() {
        let (mut p, mut s) = scalar_setup(0.0);
        s.beta1 = 0.0;
        for _ in 0..2 {
            let before = p.get("w").unwrap().data()[0];
            adam_step(&mut p, &grads(-3.0), &mut s).unwrap();
            let delta = p.get("w").unwrap().data()[0] - before;
            assert!((delta - 5e-4).abs() < 1e-10, "{delta}");
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut p, mut s) = scalar_setup(1.5);
        s.base_lr = 0.0;
        adam_step(&mut p, &grads(10.0), &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn schedule_decays_on_floor_boundaries() {
        let (_, s) = scalar_setup(0.0);
        assert_eq!(lr_schedule(0, &s), 5e-4);
        assert_eq!(lr_schedule(1999, &s), 5e-4);
        assert!((lr_schedule(2000, &s) - 4.85e-4).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut p, mut s) = scalar_setup(0.0);
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(adam_step(&mut p, &bad, &mut s).is_err());
    }
}
