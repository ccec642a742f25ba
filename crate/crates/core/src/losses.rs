//! Same/different pair objectives and their derivatives with respect to the
//! head output.
//!
//! Scalar-head losses (`bce`, `focal`, `mse_cs`, `hinge`) consume one score σ;
//! `sce` consumes two logits ordered `[different, same]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp_unchecked, sigmoid, softmax_unchecked};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-15;

/// Index of the "same" logit for the two-logit head.
pub const SAME_LOGIT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Bce,
    Sce,
    Focal { gamma: f64 },
    MseCs { c: f64 },
    Hinge { delta: f64 },
}

impl LossSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LossSpec::Bce => "bce",
            LossSpec::Sce => "sce",
            LossSpec::Focal { .. } => "focal",
            LossSpec::MseCs { .. } => "mse",
            LossSpec::Hinge { .. } => "hinge",
        }
    }

    /// The hyperparameter this loss reads, if any.
    pub fn hyperparam(&self) -> Option<f64> {
        match *self {
            LossSpec::Bce | LossSpec::Sce => None,
            LossSpec::Focal { gamma } => Some(gamma),
            LossSpec::MseCs { c } => Some(c),
            LossSpec::Hinge { delta } => Some(delta),
        }
    }

    /// Number of head outputs the loss consumes.
    pub fn head_outputs(&self) -> usize {
        match self {
            LossSpec::Sce => 2,
            _ => 1,
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, LossSpec::Hinge { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Focal { gamma } if !(gamma >= 0.0) || !gamma.is_finite() => {
                Err(Error::invalid(format!("focal gamma must be ≥ 0, got {gamma}")))
            }
            LossSpec::MseCs { c } if !(c > 0.0) || !c.is_finite() => {
                Err(Error::invalid(format!("mse c must be > 0, got {c}")))
            }
            LossSpec::Hinge { delta } if !(delta > 0.0) || !delta.is_finite() => {
                Err(Error::invalid(format!("hinge delta must be > 0, got {delta}")))
            }
            _ => Ok(()),
        }
    }

    /// Loss and gradient for one pair. `output` has [`LossSpec::head_outputs`] entries.
    pub fn evaluate(&self, output: &[f64], target: PairTarget) -> Result<LossOutput> {
        if output.len() != self.head_outputs() {
            return Err(Error::invalid(format!(
                "{} expects {} head outputs, got {}",
                self.kind(),
                self.head_outputs(),
                output.len()
            )));
        }
        match *self {
            LossSpec::Bce => loss_bce(output[0], target),
            LossSpec::Sce => loss_sce([output[0], output[1]], target.label_index()),
            LossSpec::Focal { gamma } => loss_focal(output[0], target, gamma),
            LossSpec::MseCs { c } => loss_mse_cs(output[0], target, c),
            LossSpec::Hinge { delta } => loss_hinge(output[0], target, delta),
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::Bce => write!(f, "bce"),
            LossSpec::Sce => write!(f, "sce"),
            LossSpec::Focal { gamma } => write!(f, "focal:g={gamma}"),
            LossSpec::MseCs { c } => write!(f, "mse:c={c}"),
            LossSpec::Hinge { delta } => write!(f, "hinge:d={delta}"),
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    /// Parses `bce`, `sce`, `focal:g=2`, `mse:c=10`, `hinge:d=0.01`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let value = |key: &str| -> Result<f64> {
            let p = param.ok_or_else(|| Error::invalid(format!("{name} needs `{key}=<value>`")))?;
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("malformed loss parameter {p:?}")))?;
            if k.trim() != key {
                return Err(Error::invalid(format!("{name} takes `{key}`, not `{k}`")));
            }
            v.trim()
                .parse()
                .map_err(|e| Error::invalid(format!("loss parameter {v:?}: {e}")))
        };
        let spec = match name {
            "bce" | "sce" if param.is_some() => {
                return Err(Error::invalid(format!("{name} takes no parameter")))
            }
            "bce" => LossSpec::Bce,
            "sce" => LossSpec::Sce,
            "focal" => LossSpec::Focal { gamma: value("g")? },
            "mse" | "mse_cs" => LossSpec::MseCs { c: value("c")? },
            "hinge" => LossSpec::Hinge { delta: value("d")? },
            other => return Err(Error::invalid(format!("unknown loss {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Pair label: same class or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairTarget {
    same: bool,
}

impl PairTarget {
    pub const SAME: PairTarget = PairTarget { same: true };
    pub const DIFFERENT: PairTarget = PairTarget { same: false };

    pub fn new(same: bool) -> Self {
        Self { same }
    }

    pub fn is_same(self) -> bool {
        self.same
    }

    /// `{0, 1}` convention.
    pub fn binary(self) -> f64 {
        if self.same {
            1.0
        } else {
            0.0
        }
    }

    /// `{-1, +1}` convention; equals `2·binary − 1`.
    pub fn signed(self) -> f64 {
        if self.same {
            1.0
        } else {
            -1.0
        }
    }

    pub fn label_index(self) -> usize {
        usize::from(self.same)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must be finite, got {x}")))
    }
}

/// Probability of the true class under a sigmoid head, and its complement,
/// each computed without cancellation. Also returns the sign mapping σ to the
/// true-class logit.
fn true_class_prob(sigma: f64, target: PairTarget) -> (f64, f64, f64) {
    let s = target.signed();
    let u = s * sigma;
    (sigmoid(u), sigmoid(-u), s)
}

pub fn loss_bce(sigma: f64, target: PairTarget) -> Result<LossOutput> {
    finite(sigma, "sigma")?;
    let (q, q_comp, s) = true_class_prob(sigma, target);
    Ok(LossOutput {
        value: -q.max(PROB_FLOOR).ln(),
        // d/dσ = t̂ − t
        grad: vec![-s * q_comp],
    })
}

pub fn loss_sce(logits: [f64; 2], label_index: usize) -> Result<LossOutput> {
    finite(logits[0], "logit 0")?;
    finite(logits[1], "logit 1")?;
    if label_index > 1 {
        return Err(Error::invalid(format!("label index {label_index} not in {{0, 1}}")));
    }
    let value = (log_sum_exp_unchecked(&logits) - logits[label_index]).max(0.0);
    let mut grad = softmax_unchecked(&logits);
    grad[label_index] -= 1.0;
    Ok(LossOutput { value, grad })
}

pub fn loss_focal(sigma: f64, target: PairTarget, gamma: f64) -> Result<LossOutput> {
    finite(sigma, "sigma")?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("focal gamma must be ≥ 0, got {gamma}")));
    }
    let (q, q_comp, s) = true_class_prob(sigma, target);
    let log_q = q.max(PROB_FLOOR).ln();
    let weight = q_comp.powf(gamma);
    // With u the true-class logit: dL/du = (1−q)^γ · (γ q log q − (1−q)).
    let d_u = weight * (gamma * q * log_q - q_comp);
    Ok(LossOutput {
        value: -weight * log_q,
        grad: vec![s * d_u],
    })
}

/// Compressed sigmoid `2/(1+e^{−cσ}) − 1`, evaluated as `tanh(cσ/2)`.
pub fn compressed_sigmoid(sigma: f64, c: f64) -> f64 {
    (0.5 * c * sigma).tanh()
}

pub fn loss_mse_cs(sigma: f64, target: PairTarget, c: f64) -> Result<LossOutput> {
    finite(sigma, "sigma")?;
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid(format!("mse c must be > 0, got {c}")));
    }
    let s_hat = compressed_sigmoid(sigma, c);
    let diff = s_hat - target.signed();
    Ok(LossOutput {
        value: diff * diff,
        grad: vec![diff * c * (1.0 - s_hat * s_hat)],
    })
}

pub fn loss_hinge(sigma: f64, target: PairTarget, delta: f64) -> Result<LossOutput> {
    finite(sigma, "sigma")?;
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("hinge delta must be > 0, got {delta}")));
    }
    let l = target.signed();
    let slack = delta - l * sigma;
    if slack > 0.0 {
        Ok(LossOutput { value: slack, grad: vec![-l] })
    } else {
        Ok(LossOutput { value: 0.0, grad: vec![0.0] })
    }
}

/// Largest relative error between the analytic gradient and a central finite
/// difference with step `h`, over all head outputs.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`; identical zero gradients give 0.
pub fn check_gradient(spec: &LossSpec, output: &[f64], target: PairTarget, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let analytic = spec.evaluate(output, target)?.grad;
    let mut worst = 0.0f64;
    let mut probe = output.to_vec();
    for i in 0..output.len() {
        probe[i] = output[i] + h;
        let up = spec.evaluate(&probe, target)?.value;
        probe[i] = output[i] - h;
        let down = spec.evaluate(&probe, target)?.value;
        probe[i] = output[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(b.abs()).max(1e-8)
    }
}
