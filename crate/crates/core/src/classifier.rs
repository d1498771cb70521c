//! Cause / non-cause head and the main-task loss.

use crate::data::Label;
use crate::nn::Linear;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub input_dim: usize,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, input_dim: usize) -> Self {
        ClassifierHead {
            linear: Linear::new(store, "classifier", input_dim, NUM_CLASSES, true),
            input_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }

    /// Logits `n x 2` for representations `n x input_dim`.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, h: Var) -> Var {
        self.linear.forward(tape, store, h)
    }
}

/// `h = [v_cls ; extra_1 ; ...]`.
pub fn final_representation(tape: &mut Tape<'_>, cls: Var, extra: &[Var]) -> Var {
    if extra.is_empty() {
        return cls;
    }
    let mut parts = vec![cls];
    parts.extend_from_slice(extra);
    tape.concat_cols(&parts)
}

/// Class probabilities and the predicted label; a tie goes to the negative class.
pub fn classify(logits: [f64; 2]) -> ([f64; 2], Label) {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let z = e[0] + e[1];
    let p = [e[0] / z, e[1] / z];
    let label = if p[1] > p[0] { Label::Cause } else { Label::NonCause };
    (p, label)
}

/// `-sum_v log P_v[gold_v]`.
pub fn ecec_loss(probs: &[[f64; 2]], gold: &[Label]) -> f64 {
    assert_eq!(probs.len(), gold.len(), "one gold label per prediction");
    probs.iter().zip(gold).map(|(p, g)| -p[g.class()].ln()).sum()
}
