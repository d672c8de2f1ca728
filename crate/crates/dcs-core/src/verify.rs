//! Randomized verification suites: the bound chain (upper-bound slack and
//! both lemma gaps, plus closed-form-vs-uniform table tightness) on sampled
//! assignment instances, and finite-difference oracles for every analytic
//! gradient path used in training and search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::gumbel_noise;
use crate::dnas::{latency_cost, latency_cost_var, StageSpec, SuperNetSpec};
use crate::error::Result;
use crate::gradcheck::{fd_gradient, max_rel_error};
use crate::ib::{
    ib_loss, ibb_loss, lemma1_gap, lemma2_gap, soft_assignment, update_variational_q,
    ClassStatistics,
};
use crate::loss::{composite_train_loss_var, LossConfig, MiningMode};
use crate::tape::{backward, Tape, Var};
use crate::tensor::Tensor;

pub const SLACK_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoundReport {
    pub instances: usize,
    /// Minimum of (upper bound − objective) over all instances.
    pub min_bound_slack: f64,
    pub min_lemma1_gap: f64,
    pub min_lemma2_gap: f64,
    /// Maximum of (closed-form-table gap − uniform-table gap); tightness
    /// demands this stays nonpositive.
    pub max_exact_q_excess: f64,
    pub violations: usize,
}

impl BoundReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GradientReport {
    pub configs: usize,
    pub max_composite_error: f64,
    pub max_mask_path_error: f64,
    pub max_latency_error: f64,
}

impl GradientReport {
    pub fn pass(&self) -> bool {
        self.max_composite_error <= GRAD_TOL
            && self.max_mask_path_error <= GRAD_TOL
            && self.max_latency_error <= GRAD_TOL
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct VerifyReport {
    pub bounds: BoundReport,
    pub gradients: GradientReport,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.bounds.pass() && self.gradients.pass()
    }
}

fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::matrix(r, c, data).expect("random matrix")
}

fn random_column_stochastic(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for j in 0..cols {
        let col: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = col.iter().sum();
        for i in 0..rows {
            data[i * cols + j] = col[i] / sum;
        }
    }
    Tensor::matrix(rows, cols, data).expect("stochastic table")
}

fn random_row_stochastic(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / sum));
    }
    Tensor::matrix(rows, cols, data).expect("stochastic rows")
}

/// Randomized bound chain: on each sampled instance the upper bound must
/// dominate the objective, both lemma gaps must be nonnegative, and the
/// closed-form variational table must be at least as tight as the uniform
/// one.
pub fn run_bound_suite(instances: usize, seed: u64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BoundReport {
        instances,
        min_bound_slack: f64::INFINITY,
        min_lemma1_gap: f64::INFINITY,
        min_lemma2_gap: f64::INFINITY,
        max_exact_q_excess: f64::NEG_INFINITY,
        violations: 0,
    };
    for _ in 0..instances {
        let n = rng.gen_range(2..=64);
        let classes = rng.gen_range(2..=8);
        let dim = rng.gen_range(1..=16);

        let inputs = random_matrix(n, dim, &mut rng);
        let input_centroids = random_matrix(classes, dim, &mut rng);
        let phi_x = soft_assignment(&inputs, &input_centroids)?;
        let features = random_matrix(n, dim, &mut rng);
        let feature_centroids = random_matrix(classes, dim, &mut rng);
        let phi_f = soft_assignment(&features, &feature_centroids)?;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let q = random_column_stochastic(classes, classes, &mut rng);

        let ib = ib_loss(&phi_f, &phi_x, &labels)?;
        let ibb = ibb_loss(&phi_f, &phi_x, &labels, &q)?;
        let g1 = lemma1_gap(&phi_f, &phi_x)?;
        let g2 = lemma2_gap(&phi_f, &labels, &q)?;

        let slack = ibb - ib;
        report.min_bound_slack = report.min_bound_slack.min(slack);
        report.min_lemma1_gap = report.min_lemma1_gap.min(g1);
        report.min_lemma2_gap = report.min_lemma2_gap.min(g2);

        let (q_star, _) = update_variational_q(&phi_f, &labels, classes)?;
        let g2_star = lemma2_gap(&phi_f, &labels, &q_star)?;
        let uniform =
            Tensor::matrix(classes, classes, vec![1.0 / classes as f64; classes * classes])?;
        let g2_uniform = lemma2_gap(&phi_f, &labels, &uniform)?;
        let excess = g2_star - g2_uniform;
        report.max_exact_q_excess = report.max_exact_q_excess.max(excess);

        if slack < -SLACK_TOL || g1 < -SLACK_TOL || g2 < -SLACK_TOL || excess > SLACK_TOL {
            report.violations += 1;
        }
    }
    Ok(report)
}

/// The mask-path probe: soft-relaxed channel-masked attention (the exact
/// path the straight-through backward uses) reduced to a scalar.
fn mask_path_probe(
    x: &Var,
    w: &Var,
    b: &Var,
    e1: &Var,
    e2: &Var,
    tau: f64,
) -> Result<Var> {
    let theta = x.matmul(w)?.add_row(b)?;
    let soft = theta.add(e1)?.sub(e2)?.scale(1.0 / tau).sigmoid();
    let masked = x.mul(&soft)?;
    let out = masked.matmul(&masked.transpose())?.softmax_rows().matmul(x)?;
    Ok(out.mul(&out)?.sum())
}

fn composite_value(
    features: &Tensor,
    logits: &Tensor,
    phi_x_batch: &Tensor,
    labels: &[usize],
    stats: &ClassStatistics,
    config: &LossConfig,
) -> f64 {
    let tape = Tape::new();
    let fv = tape.leaf(features.clone());
    let lv = tape.leaf(logits.clone());
    let (total, _) =
        composite_train_loss_var(&lv, &fv, phi_x_batch, labels, stats, config)
            .expect("composite loss");
    total.value().item()
}

/// Finite-difference oracles for every analytic gradient path: the composite
/// objective with respect to features and logits, the mask projection via
/// the soft path, and the expected-latency proxy with respect to the option
/// weights.
pub fn run_gradient_suite(configs: usize, seed: u64) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradientReport {
        configs,
        max_composite_error: 0.0,
        max_mask_path_error: 0.0,
        max_latency_error: 0.0,
    };
    let config = LossConfig {
        eta: 1.0,
        smoothing: 0.1,
        triplet_margin: 1.0,
        mining: MiningMode::FirstPair,
    };
    for _ in 0..configs {
        // composite objective
        let n = 2 * rng.gen_range(2..=4); // even so every class has a positive
        let classes = 2;
        let dim = rng.gen_range(2..=5);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let features = random_matrix(n, dim, &mut rng);
        let logits = random_matrix(n, classes, &mut rng);
        let phi_x_batch = random_row_stochastic(n, classes, &mut rng);
        let stats = ClassStatistics {
            num_classes: classes,
            feature_centroids: random_matrix(classes, dim, &mut rng),
            input_centroids: random_matrix(classes, dim, &mut rng),
            phi_f: random_row_stochastic(n, classes, &mut rng),
            phi_x: phi_x_batch.clone(),
            q_table: random_column_stochastic(classes, classes, &mut rng),
        };
        let tape = Tape::new();
        let fv = tape.leaf(features.clone());
        let lv = tape.leaf(logits.clone());
        let (total, _) =
            composite_train_loss_var(&lv, &fv, &phi_x_batch, &labels, &stats, &config)?;
        let grads = backward(&total)?;
        let fd_f = fd_gradient(
            |f| composite_value(f, &logits, &phi_x_batch, &labels, &stats, &config),
            &features,
            FD_STEP,
        );
        let fd_l = fd_gradient(
            |l| composite_value(&features, l, &phi_x_batch, &labels, &stats, &config),
            &logits,
            FD_STEP,
        );
        report.max_composite_error = report
            .max_composite_error
            .max(max_rel_error(&grads.wrt(&fv), &fd_f))
            .max(max_rel_error(&grads.wrt(&lv), &fd_l));

        // mask projection via the soft path
        let tokens = rng.gen_range(2..=5);
        let channels = rng.gen_range(2..=6);
        let x = random_matrix(tokens, channels, &mut rng);
        let w = random_matrix(channels, channels, &mut rng);
        let b = random_matrix(1, channels, &mut rng);
        let e1 = gumbel_noise(tokens, channels, &mut rng);
        let e2 = gumbel_noise(tokens, channels, &mut rng);
        let tau = rng.gen_range(0.5..2.0);
        let probe = |wt: &Tensor, bt: &Tensor| -> f64 {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(wt.clone());
            let bv = tape.leaf(bt.clone());
            let e1v = tape.leaf(e1.clone());
            let e2v = tape.leaf(e2.clone());
            mask_path_probe(&xv, &wv, &bv, &e1v, &e2v, tau)
                .expect("probe")
                .value()
                .item()
        };
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let e1v = tape.leaf(e1.clone());
        let e2v = tape.leaf(e2.clone());
        let loss = mask_path_probe(&xv, &wv, &bv, &e1v, &e2v, tau)?;
        let grads = backward(&loss)?;
        let fd_w = fd_gradient(|wt| probe(wt, &b), &w, FD_STEP);
        let fd_b = fd_gradient(|bt| probe(&w, bt), &b, FD_STEP);
        report.max_mask_path_error = report
            .max_mask_path_error
            .max(max_rel_error(&grads.wrt(&wv), &fd_w))
            .max(max_rel_error(&grads.wrt(&bv), &fd_b));

        // latency proxy with respect to option weights
        let num_stages = rng.gen_range(1..=3);
        let stages: Vec<StageSpec> = (0..num_stages)
            .map(|_| {
                let k = rng.gen_range(1..=3);
                let mut widths: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=8)).collect();
                widths.sort_unstable();
                widths.dedup();
                StageSpec { options: widths, attention: None }
            })
            .collect();
        let spec = SuperNetSpec {
            tokens: rng.gen_range(1..=4),
            in_channels: rng.gen_range(1..=4),
            stages,
            num_classes: 2,
        };
        let weights: Vec<Tensor> = (0..num_stages)
            .map(|s| random_row_stochastic(1, spec.stages[s].options.len(), &mut rng))
            .collect();
        let tape = Tape::new();
        let wvars: Vec<Var> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let lat = latency_cost_var(&spec, &wvars)?;
        let grads = backward(&lat)?;
        for (s, wt) in weights.iter().enumerate() {
            let fd = fd_gradient(
                |pert| {
                    let mut ws = weights.clone();
                    ws[s] = pert.clone();
                    latency_cost(&spec, &ws).expect("latency")
                },
                wt,
                FD_STEP,
            );
            report.max_latency_error = report
                .max_latency_error
                .max(max_rel_error(&grads.wrt(&wvars[s]), &fd));
        }
    }
    Ok(report)
}

pub fn run_all(bound_instances: usize, grad_configs: usize, seed: u64) -> Result<VerifyReport> {
    Ok(VerifyReport {
        bounds: run_bound_suite(bound_instances, seed)?,
        gradients: run_gradient_suite(grad_configs, seed.wrapping_add(1))?,
    })
}
