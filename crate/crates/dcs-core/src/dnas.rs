//! Desk-scale differentiable architecture search: per-stage channel-width
//! options weighted by Gumbel-Softmax, a multiply-accumulate latency proxy,
//! and alternating weight/architecture steps on disjoint data splits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{dcs_attention_var, gumbel_noise, AttentionMode};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_smoothed_var, mine_triplets, triplet_loss_var, MiningMode};
use crate::model::{LayerSpec, ModelConfig};
use crate::tape::{backward, concat_rows, Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Candidate channel widths, ascending.
    pub options: Vec<usize>,
    /// Attention module inserted after the stage, if any.
    pub attention: Option<AttentionMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperNetSpec {
    pub tokens: usize,
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

impl SuperNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidParameter("supernet needs stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.options.is_empty() {
                return Err(Error::InvalidParameter(format!("stage {i} has no options")));
            }
            if s.options.windows(2).any(|w| w[0] >= w[1]) || s.options.contains(&0) {
                return Err(Error::InvalidParameter(format!(
                    "stage {i} options must be positive and strictly ascending"
                )));
            }
        }
        Ok(())
    }

    fn max_width(&self, stage: usize) -> usize {
        *self.stages[stage].options.last().expect("nonempty options")
    }

    fn in_width(&self, stage: usize) -> usize {
        if stage == 0 {
            self.in_channels
        } else {
            self.max_width(stage - 1)
        }
    }

    /// Multiply-accumulate counts per option: tokens * fan_in * width.
    pub fn cost_table(&self, stage: usize) -> Vec<f64> {
        let fan_in = self.in_width(stage) as f64;
        self.stages[stage]
            .options
            .iter()
            .map(|&w| self.tokens as f64 * fan_in * w as f64)
            .collect()
    }
}

/// Gumbel-Softmax simplex weights over options; argmax one-hot at inference
/// with ties going to the lowest index.
pub fn option_mask(
    logits: &Tensor,
    tau: f64,
    rng: &mut ChaCha8Rng,
    inference: bool,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if logits.rows() != 1 {
        return Err(Error::InvalidParameter("option logits must be a row".into()));
    }
    if inference {
        let row = logits.row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        let mut out = vec![0.0; row.len()];
        out[best] = 1.0;
        return Tensor::matrix(1, row.len(), out);
    }
    let noise = gumbel_noise(1, logits.cols(), rng);
    let perturbed = tensor::scale(&tensor::add(logits, &noise)?, 1.0 / tau);
    Ok(tensor::softmax_rows(&perturbed))
}

/// Expected latency under per-stage option weights; weights[s] is a 1 x K_s
/// simplex row.
pub fn latency_cost(spec: &SuperNetSpec, weights: &[Tensor]) -> Result<f64> {
    if weights.len() != spec.stages.len() {
        return Err(Error::InvalidParameter(
            "one weight row per stage required".into(),
        ));
    }
    let mut total = 0.0;
    for (s, w) in weights.iter().enumerate() {
        let costs = spec.cost_table(s);
        if w.cols() != costs.len() {
            return Err(Error::ShapeMismatch {
                op: "latency_cost",
                lhs: vec![1, costs.len()],
                rhs: w.shape().to_vec(),
            });
        }
        total += w.row(0).iter().zip(&costs).map(|(&p, &c)| p * c).sum::<f64>();
    }
    Ok(total)
}

pub fn latency_cost_var(spec: &SuperNetSpec, weights: &[Var]) -> Result<Var> {
    let tape = weights[0].tape();
    let mut total: Option<Var> = None;
    for (s, w) in weights.iter().enumerate() {
        let costs = spec.cost_table(s);
        let c = tape.leaf(Tensor::matrix(1, costs.len(), costs)?);
        let term = w.mul(&c)?.sum();
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("stages nonempty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchPhase {
    Weights,
    Arch,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchConfig {
    pub tau: f64,
    pub lr_weights: f64,
    pub momentum: f64,
    pub lr_arch: f64,
    /// Scale on the latency term of the search loss.
    pub latency_weight: f64,
    pub smoothing: f64,
    pub triplet_margin: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            tau: 1.0,
            lr_weights: 0.05,
            momentum: 0.9,
            lr_arch: 0.05,
            latency_weight: 1e-4,
            smoothing: 0.1,
            triplet_margin: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepReport {
    pub train_loss: f64,
    pub latency: f64,
    pub search_loss: f64,
}

/// Supernet weights, architecture logits, and both optimizers' buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub spec: SuperNetSpec,
    /// Per stage: linear weight/bias (+ mask projection for DCS stages),
    /// then classifier weight/bias; fixed traversal order.
    weights: Vec<Tensor>,
    /// One logit row per stage.
    pub arch_logits: Vec<Tensor>,
    momentum_buf: Vec<Tensor>,
    adam_m: Vec<Tensor>,
    adam_v: Vec<Tensor>,
    adam_t: u64,
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * s)
        .collect();
    Tensor::matrix(rows, cols, data).expect("init dims")
}

impl SearchState {
    pub fn init(spec: &SuperNetSpec, rng: &mut ChaCha8Rng) -> Result<SearchState> {
        spec.validate()?;
        let mut weights = Vec::new();
        for s in 0..spec.stages.len() {
            let fan_in = spec.in_width(s);
            let out = spec.max_width(s);
            weights.push(uniform_init(fan_in, out, fan_in, rng));
            weights.push(Tensor::zeros(1, out));
            if matches!(
                spec.stages[s].attention,
                Some(AttentionMode::Dcs | AttentionMode::DcsQk)
            ) {
                weights.push(uniform_init(out, out, out, rng));
                weights.push(Tensor::matrix(1, out, vec![0.5; out])?);
            }
        }
        let last = spec.max_width(spec.stages.len() - 1);
        weights.push(uniform_init(last, spec.num_classes, last, rng));
        weights.push(Tensor::zeros(1, spec.num_classes));

        let momentum_buf = weights
            .iter()
            .map(|w| Tensor::zeros(w.rows(), w.cols()))
            .collect();
        let arch_logits: Vec<Tensor> = spec
            .stages
            .iter()
            .map(|s| Tensor::zeros(1, s.options.len()))
            .collect();
        let adam_m = arch_logits
            .iter()
            .map(|l| Tensor::zeros(1, l.cols()))
            .collect();
        let adam_v = arch_logits
            .iter()
            .map(|l| Tensor::zeros(1, l.cols()))
            .collect();
        Ok(SearchState {
            spec: spec.clone(),
            weights,
            arch_logits,
            momentum_buf,
            adam_m,
            adam_v,
            adam_t: 0,
        })
    }

    /// Prefix channel mask matrix for a stage: row k keeps the first
    /// options[k] of the stage's max width.
    fn prefix_masks(&self, stage: usize) -> Tensor {
        let opts = &self.spec.stages[stage].options;
        let max = self.spec.max_width(stage);
        let mut data = vec![0.0; opts.len() * max];
        for (k, &w) in opts.iter().enumerate() {
            for c in 0..w {
                data[k * max + c] = 1.0;
            }
        }
        Tensor::matrix(opts.len(), max, data).expect("mask dims")
    }

    /// Forward the supernet; `arch_rows` are per-stage simplex weights on the
    /// tape (leaves for a weight step, differentiable for an arch step).
    fn forward(
        &self,
        tape: &Tape,
        pvars: &[Var],
        arch_rows: &[Var],
        grids: &[Tensor],
        tau: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let mut features = Vec::with_capacity(grids.len());
        for grid in grids {
            let mut x = tape.leaf(grid.clone());
            let mut pi = 0;
            for (s, stage) in self.spec.stages.iter().enumerate() {
                let w = &pvars[pi];
                let b = &pvars[pi + 1];
                pi += 2;
                x = x.matmul(w)?.add_row(b)?.relu();
                let masks = tape.leaf(self.prefix_masks(s));
                let channel_row = arch_rows[s].matmul(&masks)?;
                x = x.mul_row(&channel_row)?;
                if let Some(mode) = stage.attention {
                    let attn = match mode {
                        AttentionMode::Vanilla => {
                            let d = x.cols() as f64;
                            x.matmul(&x.transpose())?
                                .scale(1.0 / d.sqrt())
                                .softmax_rows()
                                .matmul(&x)?
                        }
                        AttentionMode::NonLocal => {
                            let n = x.rows() as f64;
                            x.matmul(&x.transpose())?.matmul(&x)?.scale(1.0 / n)
                        }
                        AttentionMode::Dcs | AttentionMode::DcsQk => {
                            let mw = &pvars[pi];
                            let mb = &pvars[pi + 1];
                            pi += 2;
                            let noise = (
                                gumbel_noise(x.rows(), x.cols(), rng),
                                gumbel_noise(x.rows(), x.cols(), rng),
                            );
                            let (out, _) =
                                dcs_attention_var(&x, mw, mb, tau, Some((&noise.0, &noise.1)))?;
                            out
                        }
                    };
                    x = x.add(&attn)?;
                }
            }
            features.push(x.mean_axis0());
        }
        let features = concat_rows(tape, &features)?;
        let n = pvars.len();
        let logits = features.matmul(&pvars[n - 2])?.add_row(&pvars[n - 1])?;
        Ok((features, logits))
    }

    /// One alternating-search step on a batch from the matching split. The
    /// untouched parameter set is bitwise unchanged.
    pub fn step(
        &mut self,
        grids: &[Tensor],
        labels: &[usize],
        phase: SearchPhase,
        config: &SearchConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepReport> {
        if grids.is_empty() || grids.len() != labels.len() {
            return Err(Error::InvalidParameter("batch grids/labels mismatch".into()));
        }
        let tape = Tape::new();
        let pvars: Vec<Var> = self.weights.iter().map(|t| tape.leaf(t.clone())).collect();

        // per-stage option weights: sampled Gumbel-Softmax, on-tape for the
        // arch phase so gradients reach the logits
        let mut logit_vars = Vec::new();
        let mut arch_rows = Vec::new();
        for l in &self.arch_logits {
            let noise = gumbel_noise(1, l.cols(), rng);
            match phase {
                SearchPhase::Arch => {
                    let lv = tape.leaf(l.clone());
                    let nv = tape.leaf(noise);
                    let row = lv.add(&nv)?.scale(1.0 / config.tau).softmax_rows();
                    logit_vars.push(lv);
                    arch_rows.push(row);
                }
                SearchPhase::Weights => {
                    let row = tensor::softmax_rows(&tensor::scale(
                        &tensor::add(l, &noise)?,
                        1.0 / config.tau,
                    ));
                    arch_rows.push(tape.leaf(row));
                }
            }
        }

        let (features, logits) = self.forward(&tape, &pvars, &arch_rows, grids, config.tau, rng)?;
        let ce = cross_entropy_smoothed_var(&logits, labels, config.smoothing)?;
        let triplets = mine_triplets(&features.value(), labels, MiningMode::BatchHard);
        let triplet = triplet_loss_var(&features, &triplets, config.triplet_margin)?;
        let train = ce.add(&triplet)?;
        let latency = latency_cost_var(&self.spec, &arch_rows)?;
        let search = train.add(&latency.scale(config.latency_weight))?;

        let report = StepReport {
            train_loss: train.value().item(),
            latency: latency.value().item(),
            search_loss: search.value().item(),
        };

        match phase {
            SearchPhase::Weights => {
                let grads = backward(&train)?;
                for (i, pv) in pvars.iter().enumerate() {
                    let g = grads.wrt(pv);
                    let buf = self.momentum_buf[i]
                        .zip(&g, "momentum", |m, gi| config.momentum * m + gi)
                        .expect("buffer shape");
                    self.weights[i] = self.weights[i]
                        .zip(&buf, "sgd", |w, m| w - config.lr_weights * m)
                        .expect("weight shape");
                    self.momentum_buf[i] = buf;
                }
            }
            SearchPhase::Arch => {
                let grads = backward(&search)?;
                self.adam_t += 1;
                let t = self.adam_t as f64;
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                for (i, lv) in logit_vars.iter().enumerate() {
                    let g = grads.wrt(lv);
                    self.adam_m[i] = self.adam_m[i]
                        .zip(&g, "adam_m", |m, gi| b1 * m + (1.0 - b1) * gi)
                        .expect("buffer shape");
                    self.adam_v[i] = self.adam_v[i]
                        .zip(&g, "adam_v", |v, gi| b2 * v + (1.0 - b2) * gi * gi)
                        .expect("buffer shape");
                    let mhat = self.adam_m[i].map(|m| m / (1.0 - b1.powf(t)));
                    let vhat = self.adam_v[i].map(|v| v / (1.0 - b2.powf(t)));
                    let step = mhat
                        .zip(&vhat, "adam_step", |m, v| m / (v.sqrt() + eps))
                        .expect("buffer shape");
                    self.arch_logits[i] = self.arch_logits[i]
                        .zip(&step, "adam_apply", |l, s| l - config.lr_arch * s)
                        .expect("logit shape");
                }
            }
        }
        Ok(report)
    }

    /// Shannon entropy of each stage's softmax(logits), a collapse indicator
    /// for the search trajectory.
    pub fn arch_entropies(&self) -> Vec<f64> {
        self.arch_logits
            .iter()
            .map(|l| {
                let p = tensor::softmax_rows(l);
                -p.row(0)
                    .iter()
                    .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
                    .sum::<f64>()
            })
            .collect()
    }

    /// Expected latency under the noiseless softmax of the current logits.
    pub fn expected_latency(&self) -> f64 {
        let rows: Vec<Tensor> = self
            .arch_logits
            .iter()
            .map(tensor::softmax_rows)
            .collect();
        latency_cost(&self.spec, &rows).expect("state shapes consistent")
    }

    /// Argmax width per stage (lowest index on ties) as a fixed model layout.
    pub fn derive(&self) -> ModelConfig {
        derive_architecture(&self.spec, &self.arch_logits)
    }
}

pub fn derive_architecture(spec: &SuperNetSpec, arch_logits: &[Tensor]) -> ModelConfig {
    let mut layers = Vec::new();
    for (s, stage) in spec.stages.iter().enumerate() {
        let row = arch_logits[s].row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        layers.push(LayerSpec::Linear {
            out: stage.options[best],
        });
        if let Some(mode) = stage.attention {
            layers.push(LayerSpec::Attention { mode });
        }
    }
    ModelConfig {
        tokens: spec.tokens,
        channels: spec.in_channels,
        layers,
        num_classes: spec.num_classes,
    }
}

/// Per-identity stratified split into a weight-training set and an
/// architecture set of roughly `weight_fraction` / remainder.
pub fn split_by_identity(
    labels: &[usize],
    weight_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&weight_fraction) || weight_fraction == 0.0 {
        return Err(Error::InvalidParameter(
            "weight_fraction must be in (0, 1)".into(),
        ));
    }
    let num_classes = labels.iter().max().map(|&y| y + 1).unwrap_or(0);
    let mut weight_split = Vec::new();
    let mut arch_split = Vec::new();
    for y in 0..num_classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == y)
            .map(|(i, _)| i)
            .collect();
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let cut = ((members.len() as f64 * weight_fraction).round() as usize)
            .clamp(1, members.len().saturating_sub(1).max(1));
        weight_split.extend_from_slice(&members[..cut]);
        arch_split.extend_from_slice(&members[cut..]);
    }
    weight_split.sort_unstable();
    arch_split.sort_unstable();
    Ok((weight_split, arch_split))
}

/// Alternating search driver: stratified 80/20 identity split, one weight
/// step then one architecture step per iteration, each on a batch from its
/// own split.
pub fn run_search(
    spec: &SuperNetSpec,
    config: &SearchConfig,
    dataset: &crate::data::IdentityDataset,
    steps: usize,
    seed: u64,
) -> Result<(SearchState, Vec<StepReport>)> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SearchState::init(spec, &mut rng)?;
    let (weight_split, arch_split) = split_by_identity(&dataset.labels, 0.8, &mut rng)?;

    let sample_batch = |split: &[usize], rng: &mut ChaCha8Rng| -> (Vec<Tensor>, Vec<usize>) {
        let size = split.len().min(16);
        let mut pool = split.to_vec();
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        pool.truncate(size);
        let grids = pool.iter().map(|&i| dataset.token_grid(i)).collect();
        let labels = pool.iter().map(|&i| dataset.labels[i]).collect();
        (grids, labels)
    };

    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (grids, labels) = sample_batch(&weight_split, &mut rng);
        state.step(&grids, &labels, SearchPhase::Weights, config, &mut rng)?;
        let (grids, labels) = sample_batch(&arch_split, &mut rng);
        let report = state.step(&grids, &labels, SearchPhase::Arch, config, &mut rng)?;
        history.push(report);
    }
    Ok((state, history))
}
