//! Small layers recorded on a [`Tape`]: linear maps, layer norm, GRU.

use crate::tensor::{Init, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `weight` is stored `input x output` so that `y = x W + b`.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let weight = store.add(&format!("{name}.weight"), input, output, Init::XavierUniform);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), 1, output, Init::Zeros));
        Linear { weight, bias }
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), 1, dim, Init::Ones),
            beta: store.add(&format!("{name}.beta"), 1, dim, Init::Zeros),
            eps,
        }
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// GRU cell with gate order (reset, update, candidate):
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        GruCell {
            w_ih: store.add(&format!("{name}.w_ih"), input, 3 * hidden, Init::Uniform(bound)),
            w_hh: store.add(&format!("{name}.w_hh"), hidden, 3 * hidden, Init::Uniform(bound)),
            b_ih: store.add(&format!("{name}.b_ih"), 1, 3 * hidden, Init::Uniform(bound)),
            b_hh: store.add(&format!("{name}.b_hh"), 1, 3 * hidden, Init::Uniform(bound)),
            hidden,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }

    /// Runs the cell over the rows of `inputs` (`n x input`), returning the
    /// `n` hidden states in processing order.
    pub fn run<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        inputs: Var,
        reverse: bool,
    ) -> Vec<Var> {
        let n = tape.shape(inputs).0;
        let h = self.hidden;
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b_ih = tape.param(store, self.b_ih);
        let b_hh = tape.param(store, self.b_hh);
        let gi_all = tape.matmul(inputs, w_ih);
        let gi_all = tape.add_row(gi_all, b_ih);

        let mut state = tape.constant(Matrix::zeros((1, h)));
        let mut out = Vec::with_capacity(n);
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for step in order {
            let gi = tape.row(gi_all, step);
            let gh = tape.matmul(state, w_hh);
            let gh = tape.add_row(gh, b_hh);
            let gi_r = tape.slice_cols(gi, 0, h);
            let gi_z = tape.slice_cols(gi, h, 2 * h);
            let gi_n = tape.slice_cols(gi, 2 * h, 3 * h);
            let gh_r = tape.slice_cols(gh, 0, h);
            let gh_z = tape.slice_cols(gh, h, 2 * h);
            let gh_n = tape.slice_cols(gh, 2 * h, 3 * h);
            let r = tape.add(gi_r, gh_r);
            let r = tape.sigmoid(r);
            let z = tape.add(gi_z, gh_z);
            let z = tape.sigmoid(z);
            let rn = tape.mul(r, gh_n);
            let cand = tape.add(gi_n, rn);
            let cand = tape.tanh(cand);
            let keep = tape.one_minus(z);
            let a = tape.mul(keep, cand);
            let b = tape.mul(z, state);
            state = tape.add(a, b);
            out.push(state);
        }
        out
    }
}

/// Bidirectional GRU; each output row is `[forward ; backward]`.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Self {
        BiGru {
            forward: GruCell::new(store, &format!("{name}.fwd"), input, hidden),
            backward: GruCell::new(store, &format!("{name}.bwd"), input, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.forward.params();
        p.extend(self.backward.params());
        p
    }

    /// `inputs` is `n x input`; returns `n x 2h`.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, inputs: Var) -> Var {
        let fwd = self.forward.run(tape, store, inputs, false);
        let mut bwd = self.backward.run(tape, store, inputs, true);
        bwd.reverse();
        let rows: Vec<Var> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| tape.concat_cols(&[f, b]))
            .collect();
        tape.concat_rows(&rows)
    }
}
