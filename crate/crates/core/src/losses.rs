//! Generator and discriminator objectives.
//!
//! All pixel sums are kept intact within an image and divided by the batch
//! size only. Logarithms are clamped at [`LOG_FLOOR`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confmask::pseudo_labels_batch;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::toyscenes::ClassWeights;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op}: value {value} at index {index} outside [0, 1]")]
    OutOfRange { op: &'static str, value: f64, index: usize },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Coefficients of the adversarial (source, target) and self-teaching terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_s: f64,
    pub w_t: f64,
    pub w_prime: f64,
}

impl LossWeights {
    /// Recipe used when adapting from GTA5.
    pub const GTA5: LossWeights = LossWeights {
        w_s: 1e-2,
        w_t: 1e-4,
        w_prime: 1e-3,
    };
    /// Recipe used when adapting from SYNTHIA.
    pub const SYNTHIA: LossWeights = LossWeights {
        w_s: 1e-2,
        w_t: 1e-3,
        w_prime: 1e-1,
    };

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("w_s", self.w_s), ("w_t", self.w_t), ("w_prime", self.w_prime)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("loss_weights.{name} must be a finite value >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::SYNTHIA
    }
}

fn batch_size(graph: &Graph, v: Var, op: &'static str) -> Result<usize> {
    let [b, ..] = graph.value(v).dims4(op)?;
    if b == 0 {
        return Err(LossError::Invalid {
            op,
            reason: "empty batch".into(),
        });
    }
    Ok(b)
}

fn check_unit_interval(graph: &Graph, v: Var, op: &'static str) -> Result<()> {
    match graph.value(v).data().iter().position(|x| !(0.0..=1.0).contains(x)) {
        Some(index) => Err(LossError::OutOfRange {
            op,
            value: graph.value(v).data()[index],
            index,
        }),
        None => Ok(()),
    }
}

fn same_shape(graph: &Graph, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (graph.value(a).shape(), graph.value(b).shape());
    if sa != sb {
        return Err(TensorError::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `Σ_p log(x(p))`, or `Σ_p log(1 − x(p))` when `complement`.
fn sum_log(graph: &mut Graph, x: Var, complement: bool) -> Var {
    let arg = if complement { graph.affine(x, -1.0, 1.0) } else { x };
    let ln = graph.ln_clamped(arg, LOG_FLOOR);
    graph.sum(ln)
}

/// Supervised cross-entropy `−Σ_p Σ_c Y[c] log G[c]`, averaged over the batch.
pub fn loss_supervised_ce(graph: &mut Graph, probs: Var, onehot: Var) -> Result<Var> {
    same_shape(graph, probs, onehot, "loss_supervised_ce")?;
    let b = batch_size(graph, probs, "loss_supervised_ce")?;
    let ln = graph.ln_clamped(probs, LOG_FLOOR);
    let picked = graph.mul(ln, onehot)?;
    let total = graph.sum(picked);
    Ok(graph.scale(total, -1.0 / b as f64))
}

/// Discriminator cross-entropy: generated maps are class 0, ground truth
/// class 1. Each branch is averaged over its own batch.
pub fn loss_discriminator(graph: &mut Graph, d_fake: Var, d_real: Var) -> Result<Var> {
    const OP: &str = "loss_discriminator";
    check_unit_interval(graph, d_fake, OP)?;
    check_unit_interval(graph, d_real, OP)?;
    let bf = batch_size(graph, d_fake, OP)?;
    let br = batch_size(graph, d_real, OP)?;
    let fake = sum_log(graph, d_fake, true);
    let real = sum_log(graph, d_real, false);
    Ok(graph.linear(&[(fake, -1.0 / bf as f64), (real, -1.0 / br as f64)])?)
}

/// Adversarial loss `−Σ_p log D(G(X))(p)`, averaged over the batch.
pub fn loss_adversarial(graph: &mut Graph, d_fake: Var) -> Result<Var> {
    const OP: &str = "loss_adversarial";
    check_unit_interval(graph, d_fake, OP)?;
    let b = batch_size(graph, d_fake, OP)?;
    let s = sum_log(graph, d_fake, false);
    Ok(graph.scale(s, -1.0 / b as f64))
}

/// Self-teaching loss `−Σ_p Σ_c D_R(p) W_c Ŷ(p)[c] log G(p)[c]` with the
/// argmax pseudo-label `Ŷ` and weights `D_R` held constant.
pub fn loss_self_teach(graph: &mut Graph, probs: Var, weights: &Tensor, class_weights: &ClassWeights) -> Result<Var> {
    const OP: &str = "loss_self_teach";
    let [b, c, h, w] = graph.value(probs).dims4(OP)?;
    if weights.shape() != [b, 1, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            left: graph.value(probs).shape().to_vec(),
            right: weights.shape().to_vec(),
        }
        .into());
    }
    if class_weights.len() != c {
        return Err(LossError::Invalid {
            op: OP,
            reason: format!("{} class weights for {c} classes", class_weights.len()),
        });
    }
    let labels = pseudo_labels_batch(graph.value(probs))?;
    let plane = h * w;
    let mut coef = vec![0.0; b * c * plane];
    for (n, map) in labels.iter().enumerate() {
        for (p, &label) in map.data().iter().enumerate() {
            let cls = usize::from(label);
            coef[(n * c + cls) * plane + p] = weights.data()[n * plane + p] * class_weights.weights()[cls];
        }
    }
    let coef = graph.constant(Tensor::new(vec![b, c, h, w], coef)?);
    let ln = graph.ln_clamped(probs, LOG_FLOOR);
    let picked = graph.mul(ln, coef)?;
    let total = graph.sum(picked);
    Ok(graph.scale(total, -1.0 / b as f64))
}

/// Scalar loss terms of one generator step; absent terms are disabled.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub l_g1: Var,
    pub l_g2_s: Option<Var>,
    pub l_g2_t: Option<Var>,
    pub l_g3: Option<Var>,
}

/// `w'` in effect at `step`: zero during warm-up.
pub fn effective_self_teach_weight(weights: &LossWeights, step: usize, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        0.0
    } else {
        weights.w_prime
    }
}

/// `L_G1 + w_s L_G2^s + w_t L_G2^t + w' L_G3`. Terms whose coefficient is
/// zero are left out of the graph entirely.
pub fn loss_full(
    graph: &mut Graph,
    parts: &LossParts,
    weights: &LossWeights,
    step: usize,
    warmup_steps: usize,
) -> Result<Var> {
    weights.validate().map_err(|reason| LossError::Invalid {
        op: "loss_full",
        reason,
    })?;
    let mut terms = vec![(parts.l_g1, 1.0)];
    let optional = [
        (parts.l_g2_s, weights.w_s),
        (parts.l_g2_t, weights.w_t),
        (parts.l_g3, effective_self_teach_weight(weights, step, warmup_steps)),
    ];
    for (term, coef) in optional {
        if let Some(v) = term {
            if coef != 0.0 {
                terms.push((v, coef));
            }
        }
    }
    for &(v, _) in &terms {
        if !graph.value(v).shape().is_empty() {
            return Err(LossError::Invalid {
                op: "loss_full",
                reason: format!("term has shape {:?}, expected a scalar", graph.value(v).shape()),
            });
        }
    }
    Ok(graph.linear(&terms)?)
}
