use svbf::envs::{
    box_generate, box_step, fhn_deriv, fhn_generate, fhn_rk4, image_generate, render_image, BallState, BoxWorld,
    FhnParams, IMAGE_SIDE,
};

/// Fixed point of the FHN system with constant input, by bisection on the
/// cubic left after substituting the w-nullcline `w = (v + a)/b`.
fn fhn_fixed_point(p: &FhnParams, i_ext: f64) -> (f64, f64) {
    let f = |v: f64| v - v * v * v / 3.0 - (v + p.a) / p.b + i_ext;
    let (mut lo, mut hi) = (-3.0, 3.0);
    assert!(f(lo) * f(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo) * f(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let v = 0.5 * (lo + hi);
    (v, (v + p.a) / p.b)
}

#[test]
fn fhn_settles_on_the_stable_fixed_point_without_input() {
    let p = FhnParams {
        i_mean: 0.0,
        i_var: 0.0,
        ..FhnParams::default()
    };
    let (v0, w0) = fhn_fixed_point(&p, 0.0);
    let (dv, dw) = fhn_deriv(&p, v0, w0, 0.0);
    assert!(dv.abs() < 1e-12 && dw.abs() < 1e-12);
    let batch = fhn_generate(&p, 3, 3000, 4).unwrap();
    for i in 0..3 {
        let last = &batch.x[(i * 3000 + 2999) * 2..(i * 3000 + 3000) * 2];
        assert!((last[0] as f64 - v0).abs() < 1e-4, "{} vs {v0}", last[0]);
        assert!((last[1] as f64 - w0).abs() < 1e-4, "{} vs {w0}", last[1]);
    }
}

#[test]
fn fixed_point_under_default_input() {
    let p = FhnParams::default();
    let (v, w) = fhn_fixed_point(&p, 0.7);
    assert!((v + 0.517).abs() < 1e-3 && (w - 0.229).abs() < 1e-3, "({v}, {w})");
    let (dv, dw) = fhn_deriv(&p, v, w, 0.7);
    assert!(dv.abs() < 1e-6 && dw.abs() < 1e-6);
}

#[test]
fn rk4_error_shrinks_with_fourth_order() {
    let p = FhnParams::default();
    let (v, w, i) = (1.3, -0.4, 0.7);
    let integrate = |h: f64, steps: usize| {
        let (mut a, mut b) = (v, w);
        for _ in 0..steps {
            (a, b) = fhn_rk4(&p, a, b, i, h);
        }
        (a, b)
    };
    let reference = integrate(1e-4, 8000);
    let err = |h: f64| {
        let (a, b) = integrate(h, (0.8 / h).round() as usize);
        ((a - reference.0).powi(2) + (b - reference.1).powi(2)).sqrt()
    };
    let ratio = err(0.1) / err(0.05);
    assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn free_flight_with_bounces_is_reversible() {
    let world = BoxWorld::default();
    let start = BallState {
        pos: vec![[0.1, -0.3]],
        vel: vec![[1.7, 1.1]],
    };
    let mut s = start.clone();
    let mut bounced = false;
    for _ in 0..200 {
        let (next, f) = box_step(&world, &s, &[0.0, 0.0], 0.01).unwrap();
        bounced |= f.iter().any(|f| f[0] || f[1]);
        s = next;
    }
    assert!(bounced);
    s.vel[0] = [-s.vel[0][0], -s.vel[0][1]];
    for _ in 0..200 {
        s = box_step(&world, &s, &[0.0, 0.0], 0.01).unwrap().0;
    }
    for a in 0..2 {
        assert!((s.pos[0][a] - start.pos[0][a]).abs() < 1e-9);
        assert!((s.vel[0][a] + start.vel[0][a]).abs() < 1e-9);
    }
}

#[test]
fn ball_at_rest_without_control_stays_put() {
    let world = BoxWorld {
        n_balls: 2,
        walls: BoxWorld::maze_walls(),
        ..BoxWorld::default()
    };
    let s = BallState {
        pos: vec![[0.5, 0.5], [-0.7, -0.2]],
        vel: vec![[0.0, 0.0]; 2],
    };
    let mut cur = s.clone();
    for _ in 0..50 {
        let (next, flags) = box_step(&world, &cur, &[0.0; 4], world.dt).unwrap();
        assert!(flags.iter().all(|f| !f[0] && !f[1]));
        cur = next;
    }
    assert_eq!(cur, s);
}

#[test]
fn rendering_commutes_with_pixel_shifts() {
    let world = BoxWorld {
        radius: 0.2,
        ..BoxWorld::default()
    };
    let pitch = 2.0 * world.bound / IMAGE_SIDE as f64;
    let p = [0.1015625, -0.25];
    let base = render_image(&world, p);
    let right = render_image(&world, [p[0] + 3.0 * pitch, p[1]]);
    let up = render_image(&world, [p[0], p[1] + 2.0 * pitch]);
    let n = IMAGE_SIDE;
    for r in 0..n {
        for c in 0..n {
            if c + 3 < n {
                assert_eq!(base[r * n + c], right[r * n + c + 3]);
            }
            if r >= 2 {
                assert_eq!(base[r * n + c], up[(r - 2) * n + c]);
            }
        }
    }
    assert!(base.iter().map(|&b| b as usize).sum::<usize>() > 20);
}

#[test]
fn dimensions_follow_ball_count() {
    for n_balls in 1..=3 {
        let world = BoxWorld {
            n_balls,
            ..BoxWorld::default()
        };
        let b = box_generate(&world, 4, 7, 1).unwrap();
        assert_eq!((b.d_x, b.d_u), (2 * n_balls, 2 * n_balls));
        assert_eq!(b.x.len(), 4 * 7 * 2 * n_balls);
        assert_eq!(b.aux("velocity").unwrap().width, 2 * n_balls);
        assert_eq!(b.aux("collisions").unwrap().width, 2 * n_balls);
        assert!(b.x.iter().all(|v| v.abs() <= 1.0));
    }
    let img = image_generate(&BoxWorld::default(), 2, 5, 3).unwrap();
    assert_eq!(img.d_x, IMAGE_SIDE * IMAGE_SIDE);
    assert!(img.x.iter().all(|&v| v == 0.0 || v == 1.0));
    // Walls keep the ball in view: every frame has a pixel set.
    for frame in img.x.chunks(IMAGE_SIDE * IMAGE_SIDE) {
        assert!(frame.iter().any(|&v| v == 1.0));
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let world = BoxWorld {
        walls: BoxWorld::maze_walls(),
        n_balls: 2,
        ..BoxWorld::default()
    };
    let a = box_generate(&world, 5, 20, 9).unwrap();
    let b = box_generate(&world, 5, 20, 9).unwrap();
    let c = box_generate(&world, 5, 20, 10).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.checksum(), c.checksum());
    let f1 = fhn_generate(&FhnParams::default(), 3, 50, 2).unwrap();
    let f2 = fhn_generate(&FhnParams::default(), 3, 50, 2).unwrap();
    assert_eq!(f1, f2);
}
