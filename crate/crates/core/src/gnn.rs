//! Structure-aware graph attention over nodes and edges.
//!
//! One step, with shared parameters across iterations:
//!
//! ```text
//! a_ij = softmax_j (Q x_i) . (K x_j + K_e e_ij) / sqrt(d_head)     per head
//! x_i <- LN(x_i + concat_heads sum_j a_ij (V x_j + V_e e_ij))
//! e_ij <- LN(e_ij + x_i U_1 + x_j U_2 + b_u)
//! ```

use crate::error::{DamError, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnnConfig {
    pub iterations: usize,
    pub heads: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            iterations: 2,
            heads: 8,
            node_dim: 768,
            edge_dim: 768,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.node_dim.is_multiple_of(self.heads) {
            return Err(DamError::config(
                "gnn.heads",
                format!("{} heads do not divide node dim {}", self.heads, self.node_dim),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.node_dim / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct GatedGnn {
    pub config: GnnConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub edge_key: Linear,
    pub edge_value: Linear,
    pub node_norm: LayerNorm,
    pub edge_src: Linear,
    pub edge_dst: Linear,
    pub edge_norm: LayerNorm,
}

/// Node states `m x d` and edge states `m^2 x d_e` (row `i * m + j`).
#[derive(Debug, Clone, Copy)]
pub struct GnnState {
    pub nodes: Var,
    pub edges: Var,
}

impl GatedGnn {
    pub fn new(store: &mut ParamStore, config: GnnConfig) -> Result<Self> {
        config.validate()?;
        let (d, de) = (config.node_dim, config.edge_dim);
        Ok(GatedGnn {
            query: Linear::new(store, "gnn.query", d, d, true),
            key: Linear::new(store, "gnn.key", d, d, true),
            value: Linear::new(store, "gnn.value", d, d, true),
            edge_key: Linear::new(store, "gnn.edge_key", de, d, false),
            edge_value: Linear::new(store, "gnn.edge_value", de, d, false),
            node_norm: LayerNorm::new(store, "gnn.node_norm", d, 1e-5),
            edge_src: Linear::new(store, "gnn.edge_src", d, de, true),
            edge_dst: Linear::new(store, "gnn.edge_dst", d, de, false),
            edge_norm: LayerNorm::new(store, "gnn.edge_norm", de, 1e-5),
            config,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for lin in [&self.query, &self.key, &self.value, &self.edge_key, &self.edge_value, &self.edge_src, &self.edge_dst] {
            p.extend(lin.params());
        }
        p.extend(self.node_norm.params());
        p.extend(self.edge_norm.params());
        p
    }

    /// One message-passing iteration. Returns the new state and the
    /// attention node (for inspecting its probabilities).
    pub fn step<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, state: GnnState) -> (GnnState, Var) {
        let m = tape.shape(state.nodes).0;
        let GnnState { nodes: x, edges: e } = state;
        let q = self.query.forward(tape, store, x);
        let k = self.key.forward(tape, store, x);
        let v = self.value.forward(tape, store, x);
        let ek = self.edge_key.forward(tape, store, e);
        let ev = self.edge_value.forward(tape, store, e);
        let att = tape.attention(q, k, v, Some(ek), Some(ev), self.config.heads);
        let x = tape.add(x, att);
        let x = self.node_norm.forward(tape, store, x);

        let src = self.edge_src.forward(tape, store, x);
        let dst = self.edge_dst.forward(tape, store, x);
        let src_rows: Vec<usize> = (0..m * m).map(|r| r / m).collect();
        let dst_rows: Vec<usize> = (0..m * m).map(|r| r % m).collect();
        let src = tape.gather_rows(src, &src_rows);
        let dst = tape.gather_rows(dst, &dst_rows);
        let e = tape.add(e, src);
        let e = tape.add(e, dst);
        let e = self.edge_norm.forward(tape, store, e);
        (GnnState { nodes: x, edges: e }, att)
    }

    /// Runs the configured number of iterations.
    pub fn run<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, mut state: GnnState) -> GnnState {
        for _ in 0..self.config.iterations {
            state = self.step(tape, store, state).0;
        }
        state
    }
}

/// `[e_it ; e_ti]` for node positions `i` and `t` among `m` nodes.
pub fn readout(tape: &mut Tape<'_>, edges: Var, m: usize, i: usize, t: usize) -> Var {
    let rows = tape.gather_rows(edges, &[i * m + t, t * m + i]);
    let a = tape.row(rows, 0);
    let b = tape.row(rows, 1);
    tape.concat_cols(&[a, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testing::{numeric_grad, random, relative_error};
    use crate::tensor::{softmax_rows, Matrix};

    fn small() -> GnnConfig {
        GnnConfig { iterations: 2, heads: 2, node_dim: 4, edge_dim: 6 }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new(0);
        assert!(GatedGnn::new(&mut store, GnnConfig { heads: 3, ..small() }).is_err());
        assert_eq!(GnnConfig::default().head_dim(), 96);
    }

    #[test]
    fn single_node_attends_to_itself() {
        let mut store = ParamStore::new(1);
        let gnn = GatedGnn::new(&mut store, small()).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(random(1, 4, 2));
        let e = tape.constant(random(1, 6, 3));
        let (s, att) = gnn.step(&mut tape, &store, GnnState { nodes: x, edges: e });
        for p in tape.attention_probs(att).unwrap() {
            assert!((p[[0, 0]] - 1.0).abs() < 1e-12);
        }
        assert_eq!(tape.shape(s.nodes), (1, 4));
        assert_eq!(tape.shape(s.edges), (1, 6));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new(2);
        let gnn = GatedGnn::new(&mut store, small()).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(random(3, 4, 4));
        let e = tape.constant(random(9, 6, 5));
        let (_, att) = gnn.step(&mut tape, &store, GnnState { nodes: x, edges: e });
        for p in tape.attention_probs(att).unwrap() {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_edges_reduce_to_plain_attention() {
        let mut store = ParamStore::new(3);
        let cfg = small();
        let gnn = GatedGnn::new(&mut store, cfg).unwrap();
        store.get_mut(gnn.edge_key.weight).fill(0.0);
        store.get_mut(gnn.edge_value.weight).fill(0.0);
        let x0 = random(3, 4, 6);
        let mut tape = Tape::inference();
        let x = tape.constant(x0.clone());
        let e = tape.constant(Matrix::zeros((9, 6)));
        let (_, att) = gnn.step(&mut tape, &store, GnnState { nodes: x, edges: e });
        let got = tape.value(att).clone();

        let proj = |lin: &Linear| x0.dot(store.get(lin.weight)) + store.get(lin.bias.unwrap());
        let (q, k, v) = (proj(&gnn.query), proj(&gnn.key), proj(&gnn.value));
        let dh = cfg.head_dim();
        let mut want = Matrix::zeros((3, 4));
        for h in 0..cfg.heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) / (dh as f64).sqrt();
            want.slice_mut(cols).assign(&softmax_rows(&scores).dot(&v.slice(cols)));
        }
        assert!(relative_error(&got, &want) < 1e-12);
    }

    #[test]
    fn zero_iterations_keep_edges() {
        let mut store = ParamStore::new(4);
        let gnn = GatedGnn::new(&mut store, GnnConfig { iterations: 0, ..small() }).unwrap();
        let e0 = random(4, 6, 7);
        let mut tape = Tape::inference();
        let x = tape.constant(random(2, 4, 8));
        let e = tape.constant(e0.clone());
        let s = gnn.run(&mut tape, &store, GnnState { nodes: x, edges: e });
        let r = readout(&mut tape, s.edges, 2, 1, 0);
        let got = tape.value(r);
        assert_eq!(got.dim(), (1, 12));
        assert_eq!(got.slice(ndarray::s![0, ..6]), e0.row(2));
        assert_eq!(got.slice(ndarray::s![0, 6..]), e0.row(1));
    }

    #[test]
    fn readout_swaps_halves() {
        let mut tape = Tape::inference();
        let e = tape.constant(random(9, 6, 9));
        let a = readout(&mut tape, e, 3, 0, 2);
        let b = readout(&mut tape, e, 3, 2, 0);
        let (a, b) = (tape.value(a), tape.value(b));
        assert_eq!(a.slice(ndarray::s![.., ..6]), b.slice(ndarray::s![.., 6..]));
        assert_eq!(a.slice(ndarray::s![.., 6..]), b.slice(ndarray::s![.., ..6]));
        let s = readout(&mut tape, e, 3, 1, 1);
        let s = tape.value(s);
        assert_eq!(s.slice(ndarray::s![.., ..6]), s.slice(ndarray::s![.., 6..]));
    }

    #[test]
    fn permutation_equivariance() {
        let mut store = ParamStore::new(5);
        let gnn = GatedGnn::new(&mut store, small()).unwrap();
        let m = 3;
        let x0 = random(m, 4, 10);
        let e0 = random(m * m, 6, 11);
        let perm = [2, 0, 1];
        let xp = x0.select(ndarray::Axis(0), &perm);
        let erows: Vec<usize> = (0..m * m).map(|r| perm[r / m] * m + perm[r % m]).collect();
        let ep = e0.select(ndarray::Axis(0), &erows);
        let run = |x: &Matrix, e: &Matrix| {
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let ev = tape.constant(e.clone());
            let s = gnn.run(&mut tape, &store, GnnState { nodes: xv, edges: ev });
            (tape.value(s.nodes).clone(), tape.value(s.edges).clone())
        };
        let (xa, ea) = run(&x0, &e0);
        let (xb, eb) = run(&xp, &ep);
        assert!(relative_error(&xa.select(ndarray::Axis(0), &perm), &xb) < 1e-12);
        assert!(relative_error(&ea.select(ndarray::Axis(0), &erows), &eb) < 1e-12);
    }

    #[test]
    fn step_gradient_check() {
        let mut store = ParamStore::new(6);
        let gnn = GatedGnn::new(&mut store, small()).unwrap();
        let x0 = random(3, 4, 12);
        let e0 = random(9, 6, 13);
        let wx = random(3, 4, 14);
        let we = random(9, 6, 15);
        let loss = |store: &ParamStore, x: &Matrix, e: &Matrix| {
            let mut tape = Tape::new();
            let xv = tape.variable(x.clone());
            let ev = tape.variable(e.clone());
            let (s, _) = gnn.step(&mut tape, store, GnnState { nodes: xv, edges: ev });
            let a = tape.constant(wx.clone());
            let b = tape.constant(we.clone());
            let ya = tape.mul(s.nodes, a);
            let yb = tape.mul(s.edges, b);
            let la = tape.sum(ya);
            let lb = tape.sum(yb);
            let l = tape.add(la, lb);
            (tape.scalar(l), tape.backward(l), xv, ev)
        };
        let (_, grads, xv, ev) = loss(&store, &x0, &e0);
        let nx = numeric_grad(&x0, |x| loss(&store, x, &e0).0);
        let ne = numeric_grad(&e0, |e| loss(&store, &x0, e).0);
        assert!(relative_error(grads.wrt(xv).unwrap(), &nx) < 1e-4);
        assert!(relative_error(grads.wrt(ev).unwrap(), &ne) < 1e-4);
        for id in [gnn.edge_key.weight, gnn.edge_src.weight, gnn.query.weight] {
            let w0 = store.get(id).clone();
            let nw = numeric_grad(&w0, |w| {
                let mut s = store.clone();
                *s.get_mut(id) = w.clone();
                loss(&s, &x0, &e0).0
            });
            assert!(relative_error(&grads.param(id).unwrap().to_dense(w0.dim()), &nw) < 1e-4);
        }
    }
}
