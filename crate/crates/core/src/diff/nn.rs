//! Parameterized layers. A layer only stores parameter names; values live in
//! a [`ParamStore`] and are bound to a [`Graph`] on each forward pass.

use super::{DiffError, Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights `N(0, std²)`, zero bias.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Result<Self, DiffError> {
        let weight = format!("{prefix}.w");
        let bias = format!("{prefix}.b");
        store.insert_normal(&weight, &[in_dim, out_dim], std)?;
        store.insert_const(&bias, &[1, out_dim], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// MLP with one ReLU input layer followed by `blocks` residual ReLU layers
/// (`h ← h + relu(W h + b)`) and a linear read-out. With `hidden == 0` it is a
/// single affine map.
#[derive(Clone, Debug)]
pub struct ResMlp {
    input: Option<Linear>,
    blocks: Vec<Linear>,
    output: Linear,
    pub hidden: usize,
}

impl ResMlp {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        blocks: usize,
        out_dim: usize,
        out_std: f64,
    ) -> Result<Self, DiffError> {
        if hidden == 0 {
            let output = Linear::register(store, &format!("{prefix}.out"), in_dim, out_dim, out_std)?;
            return Ok(Self {
                input: None,
                blocks: Vec::new(),
                output,
                hidden,
            });
        }
        let in_std = (2.0 / in_dim.max(1) as f64).sqrt();
        let input = Linear::register(store, &format!("{prefix}.in"), in_dim, hidden, in_std)?;
        let block_std = (0.5 / hidden as f64).sqrt();
        let blocks = (0..blocks)
            .map(|i| Linear::register(store, &format!("{prefix}.res{i}"), hidden, hidden, block_std))
            .collect::<Result<Vec<_>, _>>()?;
        let output = Linear::register(store, &format!("{prefix}.out"), hidden, out_dim, out_std)?;
        Ok(Self {
            input: Some(input),
            blocks,
            output,
            hidden,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    /// Returns `(last hidden layer, output)`. Without hidden layers the
    /// "hidden" value is the input itself.
    pub fn forward_with_hidden(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var), DiffError> {
        let Some(input) = &self.input else {
            let out = self.output.forward(g, store, x)?;
            return Ok((x, out));
        };
        let pre = input.forward(g, store, x)?;
        let mut h = g.relu(pre);
        for block in &self.blocks {
            let pre = block.forward(g, store, h)?;
            let act = g.relu(pre);
            h = g.add(h, act)?;
        }
        let out = self.output.forward(g, store, h)?;
        Ok((h, out))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        Ok(self.forward_with_hidden(g, store, x)?.1)
    }

    pub fn feature_dim(&self, in_dim: usize) -> usize {
        if self.input.is_some() {
            self.hidden
        } else {
            in_dim
        }
    }
}

#[derive(Clone, Debug)]
pub struct GruCell {
    w_ih: String,
    w_hh: String,
    b_ih: String,
    b_hh: String,
    pub hidden: usize,
}

impl GruCell {
    pub fn register(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize) -> Result<Self, DiffError> {
        let cell = Self {
            w_ih: format!("{prefix}.w_ih"),
            w_hh: format!("{prefix}.w_hh"),
            b_ih: format!("{prefix}.b_ih"),
            b_hh: format!("{prefix}.b_hh"),
            hidden,
        };
        let std = (1.0 / hidden as f64).sqrt();
        store.insert_normal(&cell.w_ih, &[in_dim, 3 * hidden], std)?;
        store.insert_normal(&cell.w_hh, &[hidden, 3 * hidden], std)?;
        store.insert_const(&cell.b_ih, &[1, 3 * hidden], 0.0)?;
        store.insert_const(&cell.b_hh, &[1, 3 * hidden], 0.0)?;
        Ok(cell)
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var, DiffError> {
        let w_ih = g.param(store, &self.w_ih)?;
        let w_hh = g.param(store, &self.w_hh)?;
        let b_ih = g.param(store, &self.b_ih)?;
        let b_hh = g.param(store, &self.b_hh)?;
        g.gru_cell(x, h, w_ih, w_hh, b_ih, b_hh)
    }
}
