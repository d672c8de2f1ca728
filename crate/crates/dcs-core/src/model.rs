//! A small block-list backbone over token grids: per-token linear layers
//! interleaved with residual attention blocks, mean-pooled into an identity
//! feature plus a linear classifier head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    dcs_attention_var, dcs_qk_attention_var, gumbel_noise, nonlocal_attention_var,
    vanilla_attention_var, AttentionMode,
};
use crate::error::{Error, Result};
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Per-token affine map to `out` channels followed by ReLU.
    Linear { out: usize },
    /// Residual attention over the token grid; width-preserving.
    Attention { mode: AttentionMode },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tokens: usize,
    pub channels: usize,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Channel width entering layer `i` (or the classifier for `i == len`).
    pub fn width_at(&self, i: usize) -> usize {
        let mut w = self.channels;
        for layer in &self.layers[..i] {
            if let LayerSpec::Linear { out } = layer {
                w = *out;
            }
        }
        w
    }

    pub fn feature_dim(&self) -> usize {
        self.width_at(self.layers.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Layer {
    Linear { weight: Tensor, bias: Tensor },
    Attention { mode: AttentionMode, mask_w: Option<Tensor>, mask_b: Option<Tensor> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    layers: Vec<Layer>,
    classifier_w: Tensor,
    classifier_b: Tensor,
}

/// One training/inference forward over a batch of token grids.
pub struct BatchForward {
    /// n x d mean-pooled identity features.
    pub features: Var,
    /// n x num_classes classifier logits.
    pub logits: Var,
    /// Realized hard channel masks, indexed `[sample][dcs_layer]`; each is a
    /// tokens x width 0/1 tensor.
    pub hard_masks: Vec<Vec<Tensor>>,
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * s)
        .collect();
    Tensor::matrix(rows, cols, data).expect("init dims")
}

impl Model {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        if config.tokens == 0 || config.channels == 0 || config.num_classes < 2 {
            return Err(Error::InvalidParameter(
                "model needs tokens > 0, channels > 0, num_classes >= 2".into(),
            ));
        }
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut width = config.channels;
        for spec in &config.layers {
            match *spec {
                LayerSpec::Linear { out } => {
                    if out == 0 {
                        return Err(Error::InvalidParameter("linear width must be positive".into()));
                    }
                    layers.push(Layer::Linear {
                        weight: uniform_init(width, out, width, rng),
                        bias: Tensor::zeros(1, out),
                    });
                    width = out;
                }
                LayerSpec::Attention { mode } => {
                    let (mask_w, mask_b) = if matches!(mode, AttentionMode::Dcs | AttentionMode::DcsQk)
                    {
                        (
                            Some(uniform_init(width, width, width, rng)),
                            // +0.5 pre-sigmoid bias keeps early masks mostly on
                            Some(Tensor::matrix(1, width, vec![0.5; width])?),
                        )
                    } else {
                        (None, None)
                    };
                    layers.push(Layer::Attention { mode, mask_w, mask_b });
                }
            }
        }
        Ok(Model {
            classifier_w: uniform_init(width, config.num_classes, width, rng),
            classifier_b: Tensor::zeros(1, config.num_classes),
            config: config.clone(),
            layers,
        })
    }

    /// Flat parameter list in a fixed traversal order; `leaf_params` and the
    /// optimizer rely on this order being stable.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Attention { mask_w, mask_b, .. } => {
                    if let (Some(w), Some(b)) = (mask_w, mask_b) {
                        out.push(w);
                        out.push(b);
                    }
                }
            }
        }
        out.push(&self.classifier_w);
        out.push(&self.classifier_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Attention { mask_w, mask_b, .. } => {
                    if let (Some(w), Some(b)) = (mask_w, mask_b) {
                        out.push(w);
                        out.push(b);
                    }
                }
            }
        }
        out.push(&mut self.classifier_w);
        out.push(&mut self.classifier_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn leaf_params(&self, tape: &Tape) -> Vec<Var> {
        self.params().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Indices into the `params()` order that belong to DCS mask projections.
    pub fn mask_param_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut idx = 0;
        for layer in &self.layers {
            match layer {
                Layer::Linear { .. } => idx += 2,
                Layer::Attention { mask_w, .. } => {
                    if mask_w.is_some() {
                        out.push(idx);
                        out.push(idx + 1);
                        idx += 2;
                    }
                }
            }
        }
        out
    }

    /// Forward a batch of tokens x channels grids. `rng` draws the Gumbel
    /// noise for DCS masks and must be `None` at inference, where masks are
    /// deterministic in the parameters.
    pub fn forward_batch(
        &self,
        tape: &Tape,
        pvars: &[Var],
        grids: &[Tensor],
        tau: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchForward> {
        if grids.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        if pvars.len() != self.params().len() {
            return Err(Error::Contract(format!(
                "expected {} parameter vars, got {}",
                self.params().len(),
                pvars.len()
            )));
        }
        let mut features = Vec::with_capacity(grids.len());
        let mut hard_masks = Vec::with_capacity(grids.len());
        for grid in grids {
            if grid.rows() != self.config.tokens || grid.cols() != self.config.channels {
                return Err(Error::ShapeMismatch {
                    op: "forward_batch",
                    lhs: vec![self.config.tokens, self.config.channels],
                    rhs: grid.shape().to_vec(),
                });
            }
            let mut x = tape.leaf(grid.clone());
            let mut pi = 0;
            let mut masks = Vec::new();
            for layer in &self.layers {
                match layer {
                    Layer::Linear { .. } => {
                        let w = &pvars[pi];
                        let b = &pvars[pi + 1];
                        pi += 2;
                        x = x.matmul(w)?.add_row(b)?.relu();
                    }
                    Layer::Attention { mode, mask_w, .. } => {
                        let attn = match mode {
                            AttentionMode::Vanilla => vanilla_attention_var(&x, &x, &x)?,
                            AttentionMode::NonLocal => nonlocal_attention_var(&x)?,
                            AttentionMode::Dcs | AttentionMode::DcsQk => {
                                debug_assert!(mask_w.is_some());
                                let w = &pvars[pi];
                                let b = &pvars[pi + 1];
                                pi += 2;
                                let noise = match rng.as_deref_mut() {
                                    Some(r) => Some((
                                        gumbel_noise(x.rows(), x.cols(), r),
                                        gumbel_noise(x.rows(), x.cols(), r),
                                    )),
                                    None => None,
                                };
                                let noise_ref = noise.as_ref().map(|(a, b)| (a, b));
                                let (out, hard) = match mode {
                                    AttentionMode::Dcs => {
                                        dcs_attention_var(&x, w, b, tau, noise_ref)?
                                    }
                                    _ => dcs_qk_attention_var(&x, &x, &x, w, b, tau, noise_ref)?,
                                };
                                masks.push(hard);
                                out
                            }
                        };
                        x = x.add(&attn)?;
                    }
                }
            }
            features.push(x.mean_axis0());
            hard_masks.push(masks);
        }
        let features = concat_rows(tape, &features)?;
        let nparams = pvars.len();
        let logits = features
            .matmul(&pvars[nparams - 2])?
            .add_row(&pvars[nparams - 1])?;
        Ok(BatchForward {
            features,
            logits,
            hard_masks,
        })
    }

    /// Inference features for a batch, without gradient bookkeeping overhead
    /// beyond a scratch tape.
    pub fn embed(&self, grids: &[Tensor], tau: f64) -> Result<Tensor> {
        let tape = Tape::new();
        let pvars = self.leaf_params(&tape);
        let fwd = self.forward_batch(&tape, &pvars, grids, tau, None)?;
        Ok(fwd.features.value())
    }

    /// Deterministic hard masks per DCS layer for one grid at inference.
    pub fn inference_masks(&self, grid: &Tensor, tau: f64) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let pvars = self.leaf_params(&tape);
        let fwd = self.forward_batch(&tape, &pvars, std::slice::from_ref(grid), tau, None)?;
        Ok(fwd.hard_masks.into_iter().next().unwrap_or_default())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Model> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
