//! Symmetric in-batch-negative objective with a trainable log-temperature.
//!
//! For a batch of `M` pairs the logits are `cos(x_i, y_j) * exp(tau)`; the
//! diagonal holds the positives. The loss averages cross-entropy along rows
//! (x → y) and along columns (y → x). Explicit hard negatives are appended as
//! extra y columns and only widen the row-direction softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, norm, Tensor};

/// Log-space temperature. The logit scale is `exp(tau)`, capped at `max_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub tau: f64,
    pub max_scale: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::new((1.0f64 / 0.07).ln(), 100.0)
    }
}

impl Temperature {
    pub fn new(tau: f64, max_scale: f64) -> Self {
        let mut t = Temperature { tau, max_scale };
        t.clamp();
        t
    }

    pub fn scale(&self) -> f64 {
        self.tau.exp()
    }

    /// Enforces `exp(tau) <= max_scale`.
    pub fn clamp(&mut self) {
        self.tau = self.tau.min(self.max_scale.ln());
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Var {
        tape.leaf(Tensor::scalar(self.tau), requires_grad)
    }
}

/// Cosine similarity of two non-zero vectors, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `[M, M + H]` logits: row-normalised `x · yᵀ` scaled by `exp(tau)`.
///
/// Rows are normalised on the tape so every entry is a true cosine times the
/// scale even for inputs that are not already unit-norm.
pub fn logit_matrix(tape: &mut Tape, x: Var, y: Var, tau: Var) -> Result<Var> {
    let (m, dx) = tape.value(x).dims2("logit_matrix")?;
    let (n, dy) = tape.value(y).dims2("logit_matrix")?;
    if dx != dy {
        return Err(Error::Shape {
            op: "logit_matrix",
            lhs: vec![m, dx],
            rhs: vec![n, dy],
        });
    }
    if n < m {
        return Err(Error::invalid(format!(
            "{n} y rows cannot cover {m} positive pairs"
        )));
    }
    let xn = tape.l2_normalize_rows(x)?;
    let yn = tape.l2_normalize_rows(y)?;
    let sims = tape.matmul_bt(xn, yn)?;
    let scale = tape.exp(tau);
    tape.mul_scalar(sims, scale)
}

/// `(l_row + l_col) / 2` over an `[M, M + H]` logit matrix with diagonal targets.
///
/// Both cross-entropies are batch means. The column direction only uses the
/// first `M` columns; hard-negative columns never act as targets.
pub fn symmetric_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (m, c) = tape.value(logits).dims2("symmetric_loss")?;
    if m == 0 || c < m {
        return Err(Error::invalid(format!("logit matrix {m}x{c} has no square block")));
    }
    let labels: Vec<usize> = (0..m).collect();
    let l_row = tape.cross_entropy(logits, &labels)?;
    let square = if c == m {
        logits
    } else {
        tape.slice_cols(logits, 0, m)?
    };
    let cols = tape.transpose(square)?;
    let l_col = tape.cross_entropy(cols, &labels)?;
    let total = tape.add(l_row, l_col)?;
    Ok(tape.scale(total, 0.5))
}

/// Convenience: loss value for fixed embeddings and temperature.
pub fn loss_value(x: &Tensor, y: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let t = tape.constant(Tensor::scalar(tau));
    let logits = logit_matrix(&mut tape, xv, yv, t)?;
    let loss = symmetric_loss(&mut tape, logits)?;
    Ok(tape.value(loss).item())
}

/// One positive pair plus optional explicit negatives for its y side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub x: String,
    pub y: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hard_negatives: Vec<String>,
    pub pair_id: String,
}

impl PairExample {
    pub fn new(id: impl Into<String>, x: impl Into<String>, y: impl Into<String>) -> Self {
        PairExample {
            x: x.into(),
            y: y.into(),
            hard_negatives: Vec::new(),
            pair_id: id.into(),
        }
    }
}

/// `M` aligned pairs forming one contrastive batch.
#[derive(Clone, Debug)]
pub struct PairBatch<'a> {
    pub examples: Vec<&'a PairExample>,
}

impl PairBatch<'_> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Texts for the y side of the logit matrix: the `M` positives followed by
    /// every hard negative in batch order. Returns the texts and `H`.
    ///
    /// A negative identical to its own positive is kept, with a warning.
    pub fn y_side_texts(&self) -> (Vec<&str>, usize) {
        let mut texts: Vec<&str> = self.examples.iter().map(|e| e.y.as_str()).collect();
        let mut h = 0;
        for e in &self.examples {
            for neg in &e.hard_negatives {
                if *neg == e.y {
                    log::warn!("pair {}: hard negative identical to its positive", e.pair_id);
                }
                texts.push(neg);
                h += 1;
            }
        }
        (texts, h)
    }

    pub fn x_side_texts(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.x.as_str()).collect()
    }
}
