//! Self-attention variants: vanilla scaled dot-product, the simplified
//! non-local block, and channel-selecting attention with a Gumbel-sigmoid
//! soft mask binarized straight-through.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{backward, Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    Vanilla,
    NonLocal,
    Dcs,
    /// Transformer-style variant: the same per-row mask is applied to the
    /// query and key sides instead of the shared feature matrix.
    DcsQk,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    pub channel_count: usize,
    pub token_count: usize,
    pub temperature: f64,
    pub inference: bool,
}

/// Paired soft and hard decision masks linked straight-through.
#[derive(Clone, Debug)]
pub struct DecisionMask {
    pub soft: Tensor,
    pub hard: Tensor,
    pub temperature: f64,
}

/// Learnable row-wise affine map producing mask logits from features.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MaskProjection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl MaskProjection {
    /// Small random weights with a +0.5 pre-sigmoid bias so early masks keep
    /// most channels on.
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (channels as f64).sqrt();
        let weight: Vec<f64> = (0..channels * channels)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        MaskProjection {
            weight: Tensor::matrix(channels, channels, weight).expect("square"),
            bias: Tensor::matrix(1, channels, vec![0.5; channels]).expect("bias"),
        }
    }
}

/// One draw from Gumbel(0,1) via -log(-log(u)).
fn standard_gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(1e-12..1.0);
    -(-u.ln()).ln()
}

pub fn gumbel_noise(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| standard_gumbel(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("gumbel noise")
}

/// softmax(Q K^T / sqrt(D)) V
pub fn vanilla_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "vanilla_attention",
            lhs: q.shape().to_vec(),
            rhs: if q.shape() != k.shape() {
                k.shape().to_vec()
            } else {
                v.shape().to_vec()
            },
        });
    }
    let d = q.cols() as f64;
    let logits = tensor::scale(&tensor::matmul(q, &tensor::transpose(k))?, 1.0 / d.sqrt());
    tensor::matmul(&tensor::softmax_rows(&logits), v)
}

pub fn vanilla_attention_var(q: &Var, k: &Var, v: &Var) -> Result<Var> {
    let d = q.cols() as f64;
    let logits = q.matmul(&k.transpose())?.scale(1.0 / d.sqrt());
    logits.softmax_rows().matmul(v)
}

/// Simplified non-local block: (1/N) X X^T X, with N the number of positions.
pub fn nonlocal_attention(x: &Tensor) -> Tensor {
    let n = x.rows() as f64;
    let xxt = tensor::matmul(x, &tensor::transpose(x)).expect("square product");
    tensor::scale(&tensor::matmul(&xxt, x).expect("inner extents match"), 1.0 / n)
}

pub fn nonlocal_attention_var(x: &Var) -> Result<Var> {
    let n = x.rows() as f64;
    Ok(x.matmul(&x.transpose())?.matmul(x)?.scale(1.0 / n))
}

/// Soft decision mask sigmoid((theta + e1 - e2) / tau); Gumbel noise is zero
/// at inference.
pub fn sample_soft_mask(
    theta: &Tensor,
    tau: f64,
    rng: &mut ChaCha8Rng,
    inference: bool,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let logits = if inference {
        theta.clone()
    } else {
        let e1 = gumbel_noise(theta.rows(), theta.cols(), rng);
        let e2 = gumbel_noise(theta.rows(), theta.cols(), rng);
        tensor::add(&tensor::sub(theta, &e2)?, &e1)?
    };
    Ok(logits.map(|v| 1.0 / (1.0 + (-v / tau).exp())))
}

/// Hard mask: 1 exactly where the soft mask exceeds 0.5.
pub fn binarize_mask(soft: &Tensor, temperature: f64) -> DecisionMask {
    DecisionMask {
        hard: soft.map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        soft: soft.clone(),
        temperature,
    }
}

/// Differentiable DCS attention. Returns the output var and the realized
/// hard mask; gradients to `mask_w`/`mask_b` flow through the soft path.
///
/// `noise` carries the two pre-drawn Gumel tensors for a training pass and
/// is `None` at inference.
pub fn dcs_attention_var(
    x: &Var,
    mask_w: &Var,
    mask_b: &Var,
    tau: f64,
    noise: Option<(&Tensor, &Tensor)>,
) -> Result<(Var, Tensor)> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let theta = x.matmul(mask_w)?.add_row(mask_b)?;
    let logits = match noise {
        Some((e1, e2)) => {
            let tape = theta.tape();
            let e1 = tape.leaf(e1.clone());
            let e2 = tape.leaf(e2.clone());
            theta.add(&e1)?.sub(&e2)?
        }
        None => theta,
    };
    let soft = logits.scale(1.0 / tau).sigmoid();
    let hard = soft.straight_through_binarize();
    let masked = x.mul(&hard)?;
    let affinity = masked.matmul(&masked.transpose())?.softmax_rows();
    Ok((affinity.matmul(x)?, hard.value()))
}

/// Transformer-style variant: mask the query and key projections with the
/// same per-row mask, leaving the value untouched.
pub fn dcs_qk_attention_var(
    q: &Var,
    k: &Var,
    v: &Var,
    mask_w: &Var,
    mask_b: &Var,
    tau: f64,
    noise: Option<(&Tensor, &Tensor)>,
) -> Result<(Var, Tensor)> {
    let theta = q.matmul(mask_w)?.add_row(mask_b)?;
    let logits = match noise {
        Some((e1, e2)) => {
            let tape = theta.tape();
            let e1 = tape.leaf(e1.clone());
            let e2 = tape.leaf(e2.clone());
            theta.add(&e1)?.sub(&e2)?
        }
        None => theta,
    };
    let soft = logits.scale(1.0 / tau).sigmoid();
    let hard = soft.straight_through_binarize();
    let d = q.cols() as f64;
    let qm = q.mul(&hard)?;
    let km = k.mul(&hard)?;
    let affinity = qm.matmul(&km.transpose())?.scale(1.0 / d.sqrt()).softmax_rows();
    Ok((affinity.matmul(v)?, hard.value()))
}

/// Pure DCS attention forward. `rng` is consumed only when `inference` is
/// false.
pub fn dcs_attention(
    x: &Tensor,
    proj: &MaskProjection,
    tau: f64,
    rng: &mut ChaCha8Rng,
    inference: bool,
) -> Result<(Tensor, DecisionMask)> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(proj.weight.clone());
    let bv = tape.leaf(proj.bias.clone());
    let noise = if inference {
        None
    } else {
        Some((
            gumbel_noise(x.rows(), x.cols(), rng),
            gumbel_noise(x.rows(), x.cols(), rng),
        ))
    };
    let (out, hard) = dcs_attention_var(&xv, &wv, &bv, tau, noise.as_ref().map(|(a, b)| (a, b)))?;
    let theta = tensor::add(
        &tensor::matmul(x, &proj.weight)?,
        &tensor::matmul(&Tensor::ones(x.rows(), 1), &proj.bias)?,
    )?;
    let soft_logits = match &noise {
        Some((e1, e2)) => tensor::add(&tensor::sub(&theta, e2)?, e1)?,
        None => theta,
    };
    let soft = soft_logits.map(|v| 1.0 / (1.0 + (-v / tau).exp()));
    Ok((
        out.value(),
        DecisionMask {
            soft,
            hard,
            temperature: tau,
        },
    ))
}

/// Affinity-and-output for a fixed hard mask, used by the channel-selection
/// equivalence checks.
pub fn dcs_attention_fixed_mask(x: &Tensor, hard: &Tensor) -> Result<Tensor> {
    let masked = tensor::hadamard(x, hard)?;
    let affinity = tensor::softmax_rows(&tensor::matmul(&masked, &tensor::transpose(&masked))?);
    tensor::matmul(&affinity, x)
}

/// Gradient of a scalar probe loss through the DCS soft path with respect to
/// the mask projection parameters; used by the straight-through checks.
pub fn dcs_probe_grads(
    x: &Tensor,
    proj: &MaskProjection,
    tau: f64,
    noise: Option<(&Tensor, &Tensor)>,
) -> Result<(f64, Tensor, Tensor)> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(proj.weight.clone());
    let bv = tape.leaf(proj.bias.clone());
    let (out, _) = dcs_attention_var(&xv, &wv, &bv, tau, noise)?;
    let loss = out.mul(&out)?.sum();
    let grads = backward(&loss)?;
    Ok((loss.value().item(), grads.wrt(&wv), grads.wrt(&bv)))
}
