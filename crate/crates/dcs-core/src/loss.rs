//! Training losses: label-smoothed cross-entropy, triplet loss with
//! batch-hard mining, and the composite objective combining them with the
//! weighted IBB term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ib::{self, ClassStatistics};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MiningMode {
    /// Hardest positive and hardest negative per anchor within the batch.
    BatchHard,
    /// First available positive/negative per anchor; exact-formula testing.
    FirstPair,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Balance factor for the IBB term.
    pub eta: f64,
    pub smoothing: f64,
    pub triplet_margin: f64,
    pub mining: MiningMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eta: 1.0,
            smoothing: 0.1,
            triplet_margin: 0.0,
            mining: MiningMode::BatchHard,
        }
    }
}

/// Scalar values of the individual terms, for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub ce: f64,
    pub triplet: f64,
    pub ibb: f64,
    pub total: f64,
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InvalidParameter(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy against smoothed targets (1-s) * onehot + s / C.
pub fn cross_entropy_smoothed_var(logits: &Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidParameter(format!(
            "smoothing must be in [0,1), got {smoothing}"
        )));
    }
    let (n, c) = (logits.rows(), logits.cols());
    check_labels(labels, c)?;
    if labels.len() != n {
        return Err(Error::InvalidParameter("labels/logits length mismatch".into()));
    }
    let mut targets = vec![smoothing / c as f64; n * c];
    for (i, &y) in labels.iter().enumerate() {
        targets[i * c + y] += 1.0 - smoothing;
    }
    let targets = logits.tape().leaf(Tensor::matrix(n, c, targets)?);
    let lse = logits.logsumexp_rows();
    let dot = logits.mul(&targets)?.sum_axis1();
    Ok(lse.sub(&dot)?.mean())
}

pub fn cross_entropy_smoothed(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let tape = crate::tape::Tape::new();
    let l = tape.leaf(logits.clone());
    Ok(cross_entropy_smoothed_var(&l, labels, smoothing)?.value().item())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// max(||a - p|| - ||a - n|| + margin, 0).
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (euclidean(anchor, positive) - euclidean(anchor, negative) + margin).max(0.0)
}

/// Mine (anchor, positive, negative) index triples from batch labels.
/// Anchors without a positive or a negative are skipped.
pub fn mine_triplets(
    features: &Tensor,
    labels: &[usize],
    mode: MiningMode,
) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for i in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = euclidean(features.row(i), features.row(j));
            if labels[j] == labels[i] {
                let better = match (mode, pos) {
                    (_, None) => true,
                    (MiningMode::BatchHard, Some((_, dp))) => d > dp,
                    (MiningMode::FirstPair, Some(_)) => false,
                };
                if better {
                    pos = Some((j, d));
                }
            } else {
                let better = match (mode, neg) {
                    (_, None) => true,
                    (MiningMode::BatchHard, Some((_, dn))) => d < dn,
                    (MiningMode::FirstPair, Some(_)) => false,
                };
                if better {
                    neg = Some((j, d));
                }
            }
        }
        if let (Some((p, _)), Some((q, _))) = (pos, neg) {
            out.push((i, p, q));
        }
    }
    out
}

/// Mean hinge loss over mined triples, differentiable through the features.
pub fn triplet_loss_var(
    features: &Var,
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> Result<Var> {
    let tape = features.tape();
    if triplets.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let mut total: Option<Var> = None;
    for &(a, p, n) in triplets {
        let fa = features.select_row(a);
        let fp = features.select_row(p);
        let fn_ = features.select_row(n);
        let dp = fa.sub(&fp)?.mul(&fa.sub(&fp)?)?.sum().sqrt();
        let dn = fa.sub(&fn_)?.mul(&fa.sub(&fn_)?)?.sum().sqrt();
        let hinge = dp.sub(&dn)?.add_scalar(margin).relu();
        total = Some(match total {
            None => hinge,
            Some(t) => t.add(&hinge)?,
        });
    }
    Ok(total.expect("nonempty").scale(1.0 / triplets.len() as f64))
}

/// Composite objective: CE + Triplet + eta * IBB on the batch. Returns the
/// scalar var and the individual term values.
pub fn composite_train_loss_var(
    logits: &Var,
    features: &Var,
    phi_x_batch: &Tensor,
    labels: &[usize],
    stats: &ClassStatistics,
    config: &LossConfig,
) -> Result<(Var, LossParts)> {
    let ce = cross_entropy_smoothed_var(logits, labels, config.smoothing)?;
    let triplets = mine_triplets(&features.value(), labels, config.mining);
    let triplet = triplet_loss_var(features, &triplets, config.triplet_margin)?;
    let marginal = ib::input_marginal(&stats.phi_x);
    let ibb = ib::ibb_minibatch_var(
        features,
        phi_x_batch,
        labels,
        &stats.feature_centroids,
        &stats.q_table,
        Some(&marginal),
    )?;
    let parts = LossParts {
        ce: ce.value().item(),
        triplet: triplet.value().item(),
        ibb: ibb.value().item(),
        total: 0.0,
    };
    let total = ce.add(&triplet)?.add(&ibb.scale(config.eta))?;
    let parts = LossParts {
        total: total.value().item(),
        ..parts
    };
    Ok((total, parts))
}
