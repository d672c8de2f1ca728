//! Information-bottleneck objectives over soft cluster assignments: the IB
//! loss I(F,X) - I(F,Y), its variational upper bound (IBB), the minibatch
//! form used for SGD, the closed-form variational table update, and the two
//! supporting bound gaps as checkable quantities.
//!
//! Conventions: 0*log 0 := 0, and variational-table entries are floored at
//! 1e-12 before taking logs. The cluster count equals the class count for
//! both feature and input assignments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{self, Tensor};

const Q_FLOOR: f64 = 1e-12;
const LOG_FLOOR: f64 = 1e-300;

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.max(LOG_FLOOR).ln()
    }
}

/// Per-epoch class statistics: centroids, soft-assignment tables, and the
/// variational table Q with Q[a][y] = Q(F in a | Y = y).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassStatistics {
    pub num_classes: usize,
    pub feature_centroids: Tensor,
    pub input_centroids: Tensor,
    pub phi_f: Tensor,
    pub phi_x: Tensor,
    pub q_table: Tensor,
}

/// Soft assignment: row i is the softmax over clusters of the negative
/// squared distance of feature i to each centroid.
pub fn soft_assignment(features: &Tensor, centroids: &Tensor) -> Result<Tensor> {
    if centroids.rows() == 0 {
        return Err(Error::InvalidParameter("zero classes".into()));
    }
    let d = tensor::pairwise_sq_dists(features, centroids)?;
    Ok(tensor::softmax_rows(&d.map(|v| -v)))
}

/// Cluster marginal P(X in b) = (1/n) sum_i phi_x[i,b] as a 1 x B row.
pub fn input_marginal(phi_x: &Tensor) -> Tensor {
    let p = cluster_marginal(phi_x);
    let b = p.len();
    Tensor::matrix(1, b, p).expect("marginal row")
}

/// -(1/n) sum_j sum_b p_b log phi_x[j,b]: the weight-constant cross-entropy
/// term from the log-sum-inequality bound on I(F, X). Nonnegative.
fn marginal_cross_entropy(phi_x: &Tensor, marginal: &Tensor) -> f64 {
    let (n, b) = (phi_x.rows(), phi_x.cols());
    let mut acc = 0.0;
    for j in 0..n {
        for k in 0..b {
            acc -= xlogy(marginal.get(0, k), phi_x.get(j, k));
        }
    }
    acc / n as f64
}

fn cluster_marginal(phi: &Tensor) -> Vec<f64> {
    let (n, k) = (phi.rows(), phi.cols());
    let mut p = vec![0.0; k];
    for i in 0..n {
        for a in 0..k {
            p[a] += phi.get(i, a);
        }
    }
    for v in &mut p {
        *v /= n as f64;
    }
    p
}

/// I(F, X) over soft cluster assignments, with joints
/// P(F in a, X in b) = (1/n) sum_i phi_f[i,a] phi_x[i,b].
pub fn mutual_information_fx(phi_f: &Tensor, phi_x: &Tensor) -> Result<f64> {
    if phi_f.rows() != phi_x.rows() {
        return Err(Error::ShapeMismatch {
            op: "mutual_information_fx",
            lhs: phi_f.shape().to_vec(),
            rhs: phi_x.shape().to_vec(),
        });
    }
    let n = phi_f.rows();
    let (ka, kb) = (phi_f.cols(), phi_x.cols());
    let pa = cluster_marginal(phi_f);
    let pb = cluster_marginal(phi_x);
    let mut mi = 0.0;
    for a in 0..ka {
        for b in 0..kb {
            let joint: f64 = (0..n)
                .map(|i| phi_f.get(i, a) * phi_x.get(i, b))
                .sum::<f64>()
                / n as f64;
            if joint > 0.0 {
                mi += joint * (joint / (pa[a] * pb[b])).ln();
            }
        }
    }
    Ok(mi)
}

/// I(F, Y) with hard labels: P(F in a, Y = y) = (1/n) sum_i phi_f[i,a] 1{y_i = y}.
pub fn mutual_information_fy(phi_f: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = phi_f.rows();
    if labels.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{} labels for {} assignment rows",
            labels.len(),
            n
        )));
    }
    let ka = phi_f.cols();
    let num_y = labels.iter().max().map(|&y| y + 1).unwrap_or(0);
    let pa = cluster_marginal(phi_f);
    let mut py = vec![0.0; num_y];
    for &y in labels {
        py[y] += 1.0 / n as f64;
    }
    let mut mi = 0.0;
    for a in 0..ka {
        for y in 0..num_y {
            let joint: f64 = labels
                .iter()
                .enumerate()
                .filter(|(_, &yi)| yi == y)
                .map(|(i, _)| phi_f.get(i, a))
                .sum::<f64>()
                / n as f64;
            if joint > 0.0 {
                mi += joint * (joint / (pa[a] * py[y])).ln();
            }
        }
    }
    Ok(mi)
}

/// IB(W) = I(F, X) - I(F, Y).
pub fn ib_loss(phi_f: &Tensor, phi_x: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(mutual_information_fx(phi_f, phi_x)? - mutual_information_fy(phi_f, labels)?)
}

fn validate_q(q: &Tensor, phi_f: &Tensor, labels: &[usize]) -> Result<()> {
    for (i, &y) in labels.iter().enumerate() {
        for a in 0..phi_f.cols() {
            if q.get(a, y) == 0.0 && phi_f.get(i, a) > 0.0 {
                return Err(Error::Divergence(format!(
                    "variational table is zero at (a={a}, y={y}) where assignment mass is positive"
                )));
            }
        }
    }
    Ok(())
}

/// Variational upper bound on the IB loss; separable per sample once the
/// input-cluster marginal is fixed.
///
/// Besides the two weight-dependent sums, the bound carries the
/// weight-constant cross-entropy of the input assignments against their own
/// marginal; dropping it breaks the inequality on adversarial tables even
/// though it never contributes a gradient.
pub fn ibb_loss(phi_f: &Tensor, phi_x: &Tensor, labels: &[usize], q: &Tensor) -> Result<f64> {
    validate_q(q, phi_f, labels)?;
    let n = phi_f.rows();
    let (ka, kb) = (phi_f.cols(), phi_x.cols());
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..n {
        for a in 0..ka {
            let fa = phi_f.get(i, a);
            for b in 0..kb {
                first += fa * xlogx(phi_x.get(i, b));
            }
            second += xlogy(fa, q.get(a, labels[i]).max(Q_FLOOR));
        }
    }
    let mce = marginal_cross_entropy(phi_x, &input_marginal(phi_x));
    Ok((first - second) / n as f64 + mce)
}

/// Minibatch IBB: the bound restricted to a batch, with assignments
/// recomputed from current features against fixed centroids and the previous
/// epoch's variational table. `marginal` fixes the input-cluster marginal
/// (normally the frozen dataset-level one); `None` derives it from the batch.
pub fn ibb_minibatch(
    features: &Tensor,
    phi_x_batch: &Tensor,
    labels: &[usize],
    centroids: &Tensor,
    q_prev: &Tensor,
    marginal: Option<&Tensor>,
) -> Result<f64> {
    let phi_f = soft_assignment(features, centroids)?;
    validate_q(q_prev, &phi_f, labels)?;
    let n = phi_f.rows();
    let (ka, kb) = (phi_f.cols(), phi_x_batch.cols());
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..n {
        for a in 0..ka {
            let fa = phi_f.get(i, a);
            for b in 0..kb {
                first += fa * xlogx(phi_x_batch.get(i, b));
            }
            second += xlogy(fa, q_prev.get(a, labels[i]).max(Q_FLOOR));
        }
    }
    let mce = match marginal {
        Some(p) => marginal_cross_entropy(phi_x_batch, p),
        None => marginal_cross_entropy(phi_x_batch, &input_marginal(phi_x_batch)),
    };
    Ok((first - second) / n as f64 + mce)
}

/// Differentiable minibatch IBB on a tape. `features` carries the gradient;
/// input assignments, centroids, and Q are constants.
pub fn ibb_minibatch_var(
    features: &Var,
    phi_x_batch: &Tensor,
    labels: &[usize],
    centroids: &Tensor,
    q_prev: &Tensor,
    marginal: Option<&Tensor>,
) -> Result<Var> {
    let batch = features.rows();
    if phi_x_batch.rows() != batch || labels.len() != batch {
        return Err(Error::InvalidParameter(
            "batch features, input assignments, and labels must align".into(),
        ));
    }
    let tape = features.tape();
    let k = centroids.rows();

    // squared distances to centroids: ||f||^2 + ||c||^2 - 2 f c^T
    let ct = tape.leaf(tensor::transpose(centroids));
    let c2: Vec<f64> = (0..k)
        .map(|a| centroids.row(a).iter().map(|v| v * v).sum())
        .collect();
    let c2 = tape.leaf(Tensor::matrix(1, k, c2)?);
    let f2 = features.mul(features)?.sum_axis1();
    let dists = features
        .matmul(&ct)?
        .scale(-2.0)
        .add_col(&f2)?
        .add_row(&c2)?;
    let phi_f = dists.neg().softmax_rows();

    // first term: per-sample input-assignment entropy weighted by the
    // (unit) row sum of phi_f, keeping the gradient path explicit
    let w: Vec<f64> = (0..batch)
        .map(|i| phi_x_batch.row(i).iter().map(|&p| xlogx(p)).sum())
        .collect();
    let w = tape.leaf(Tensor::matrix(batch, 1, w)?);
    let first = phi_f.sum_axis1().mul(&w)?.sum();

    // second term: -(1/B) sum_i sum_a phi_f[i,a] log Q[a, y_i]
    let mut logq = Vec::with_capacity(batch * k);
    for &y in labels {
        for a in 0..k {
            let qv = q_prev.get(a, y);
            if qv == 0.0 {
                return Err(Error::Divergence(format!(
                    "variational table is zero at (a={a}, y={y})"
                )));
            }
            logq.push(qv.max(Q_FLOOR).ln());
        }
    }
    let logq = tape.leaf(Tensor::matrix(batch, k, logq)?);
    let second = phi_f.mul(&logq)?.sum();

    // weight-constant cross-entropy term; carries no gradient
    let mce = match marginal {
        Some(p) => marginal_cross_entropy(phi_x_batch, p),
        None => marginal_cross_entropy(phi_x_batch, &input_marginal(phi_x_batch)),
    };
    first
        .sub(&second)?
        .scale(1.0 / batch as f64)
        .add(&tape.leaf(Tensor::scalar(mce)))
}

/// Closed-form variational table: Q[a][y] = class-conditional average of the
/// soft assignments. Empty classes get a uniform column and are reported.
pub fn update_variational_q(
    phi_f: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let n = phi_f.rows();
    if labels.len() != n {
        return Err(Error::InvalidParameter("labels/assignments length mismatch".into()));
    }
    let k = phi_f.cols();
    let mut q = vec![0.0; k * num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for a in 0..k {
            q[a * num_classes + y] += phi_f.get(i, a);
        }
    }
    let mut empty = Vec::new();
    for y in 0..num_classes {
        if counts[y] == 0 {
            empty.push(y);
            for a in 0..k {
                q[a * num_classes + y] = 1.0 / k as f64;
            }
        } else {
            for a in 0..k {
                q[a * num_classes + y] /= counts[y] as f64;
            }
            // assignments can underflow to exact zero for very sharp
            // features; floor and renormalize so the column stays a strictly
            // positive distribution
            let mut sum = 0.0;
            for a in 0..k {
                let v = q[a * num_classes + y].max(Q_FLOOR);
                q[a * num_classes + y] = v;
                sum += v;
            }
            for a in 0..k {
                q[a * num_classes + y] /= sum;
            }
        }
    }
    Ok((Tensor::matrix(k, num_classes, q)?, empty))
}

/// Per-class arithmetic means. Empty classes keep the previous centroid and
/// are reported.
pub fn update_centroids(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    previous: Option<&Tensor>,
) -> Result<(Tensor, Vec<usize>)> {
    let n = features.rows();
    let d = features.cols();
    if labels.len() != n {
        return Err(Error::InvalidParameter("labels/features length mismatch".into()));
    }
    let mut sums = vec![0.0; num_classes * d];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for j in 0..d {
            sums[y * d + j] += features.get(i, j);
        }
    }
    let mut empty = Vec::new();
    for y in 0..num_classes {
        if counts[y] == 0 {
            empty.push(y);
            if let Some(prev) = previous {
                sums[y * d..(y + 1) * d].copy_from_slice(prev.row(y));
            }
        } else {
            for j in 0..d {
                sums[y * d + j] /= counts[y] as f64;
            }
        }
    }
    Ok((Tensor::matrix(num_classes, d, sums)?, empty))
}

/// Slack of the log-sum-inequality upper bound on I(F, X); nonnegative up to
/// floating-point noise.
pub fn lemma1_gap(phi_f: &Tensor, phi_x: &Tensor) -> Result<f64> {
    let n = phi_f.rows();
    let (ka, kb) = (phi_f.cols(), phi_x.cols());
    let mut first = 0.0;
    for i in 0..n {
        for a in 0..ka {
            for b in 0..kb {
                first += phi_f.get(i, a) * xlogx(phi_x.get(i, b));
            }
        }
    }
    first /= n as f64;
    let mut second = 0.0;
    for i in 0..n {
        for j in 0..n {
            for b in 0..kb {
                second += xlogy(phi_x.get(i, b), phi_x.get(j, b));
            }
        }
    }
    second /= (n * n) as f64;
    let rhs = first - second;
    Ok(rhs - mutual_information_fx(phi_f, phi_x)?)
}

/// Slack of the variational lower bound on I(F, Y); nonnegative for any
/// column-stochastic Q.
pub fn lemma2_gap(phi_f: &Tensor, labels: &[usize], q: &Tensor) -> Result<f64> {
    validate_q(q, phi_f, labels)?;
    let n = phi_f.rows();
    let ka = phi_f.cols();
    let mut rhs = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for a in 0..ka {
            rhs += xlogy(phi_f.get(i, a), q.get(a, y).max(Q_FLOOR));
        }
    }
    rhs /= n as f64;
    Ok(mutual_information_fy(phi_f, labels)? - rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stochastic_rows(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            rows.push(raw.into_iter().map(|v| v / s).collect());
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn soft_assignment_equidistant_is_uniform() {
        let centroids = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let f = Tensor::matrix(1, 2, vec![0.0, 5.0]).unwrap();
        let phi = soft_assignment(&f, &centroids).unwrap();
        assert!((phi.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((phi.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn soft_assignment_at_centroid_is_one_hot() {
        let centroids =
            Tensor::matrix(3, 2, vec![100.0, 0.0, 3.0, 4.0, -100.0, 0.0]).unwrap();
        let f = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let phi = soft_assignment(&f, &centroids).unwrap();
        assert!(phi.get(0, 1) > 1.0 - 1e-15);
        assert!(phi.get(0, 0) < 1e-15 && phi.get(0, 2) < 1e-15);
    }

    #[test]
    fn soft_assignment_closed_form_distances() {
        // distances^2 of {0, 1} give [e^0, e^-1] normalized
        let centroids = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let f = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let phi = soft_assignment(&f, &centroids).unwrap();
        assert!((phi.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((phi.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn mi_fx_uniform_is_zero_and_hard_is_log2() {
        let n = 8;
        let uniform = Tensor::matrix(n, 4, vec![0.25; n * 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi_x = random_stochastic_rows(n, 4, &mut rng);
        let mi = mutual_information_fx(&uniform, &phi_x).unwrap();
        assert!(mi.abs() < 1e-12);

        // perfect dependence: identical hard one-hot tables, balanced 2 classes
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let hard = Tensor::from_rows(&rows).unwrap();
        let mi = mutual_information_fx(&hard, &hard).unwrap();
        assert!((mi - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_fx_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi_f = random_stochastic_rows(16, 4, &mut rng);
        let phi_x = random_stochastic_rows(16, 4, &mut rng);
        let mi = mutual_information_fx(&phi_f, &phi_x).unwrap();

        // brute-force re-derivation straight from the joint definition
        let n = 16;
        let mut expect = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                let joint: f64 =
                    (0..n).map(|i| phi_f.get(i, a) * phi_x.get(i, b)).sum::<f64>() / n as f64;
                let pa: f64 = (0..n).map(|i| phi_f.get(i, a)).sum::<f64>() / n as f64;
                let pb: f64 = (0..n).map(|i| phi_x.get(i, b)).sum::<f64>() / n as f64;
                expect += joint * (joint / (pa * pb)).ln();
            }
        }
        assert!((mi - expect).abs() < 1e-12);
    }

    #[test]
    fn mi_fy_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi_f = random_stochastic_rows(10, 3, &mut rng);
        let single = vec![0usize; 10];
        assert!(mutual_information_fy(&phi_f, &single).unwrap().abs() < 1e-12);

        // hard one-hot aligned with balanced labels over 4 classes
        let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                let mut r = vec![0.0; 4];
                r[y] = 1.0;
                r
            })
            .collect();
        let hard = Tensor::from_rows(&rows).unwrap();
        let mi = mutual_information_fy(&hard, &labels).unwrap();
        assert!((mi - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_fy_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi_f = random_stochastic_rows(16, 4, &mut rng);
        let labels: Vec<usize> = (0..16).map(|_| rng.gen_range(0..3)).collect();
        let mi = mutual_information_fy(&phi_f, &labels).unwrap();

        let n = 16.0;
        let mut expect = 0.0;
        for a in 0..4 {
            for y in 0..3 {
                let joint: f64 = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &yi)| if yi == y { phi_f.get(i, a) } else { 0.0 })
                    .sum::<f64>()
                    / n;
                if joint == 0.0 {
                    continue;
                }
                let pa: f64 = (0..16).map(|i| phi_f.get(i, a)).sum::<f64>() / n;
                let py: f64 = labels.iter().filter(|&&yi| yi == y).count() as f64 / n;
                expect += joint * (joint / (pa * py)).ln();
            }
        }
        assert!((mi - expect).abs() < 1e-12);
    }

    #[test]
    fn ib_loss_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let uniform = Tensor::matrix(n, 3, vec![1.0 / 3.0; n * 3]).unwrap();
        let phi_x = random_stochastic_rows(n, 3, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        assert!(ib_loss(&uniform, &phi_x, &labels).unwrap().abs() < 1e-12);

        // hard aligned phi_f, uniform phi_x -> 0 - log C
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                let mut r = vec![0.0; 3];
                r[y] = 1.0;
                r
            })
            .collect();
        let hard = Tensor::from_rows(&rows).unwrap();
        let ux = Tensor::matrix(n, 3, vec![1.0 / 3.0; n * 3]).unwrap();
        let ib = ib_loss(&hard, &ux, &labels).unwrap();
        assert!((ib + 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ibb_first_term_vanishes_for_hard_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 8;
        let phi_f = random_stochastic_rows(n, 3, &mut rng);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = vec![0.0; 3];
                r[i % 3] = 1.0;
                r
            })
            .collect();
        let phi_x_hard = Tensor::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let q = Tensor::matrix(3, 3, vec![1.0 / 3.0; 9]).unwrap();
        let ibb = ibb_loss(&phi_f, &phi_x_hard, &labels, &q).unwrap();
        // first term is 0, second term reduces to log C, leaving only the
        // weight-constant marginal cross-entropy
        let mce = marginal_cross_entropy(&phi_x_hard, &input_marginal(&phi_x_hard));
        assert!((ibb - mce - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ibb_uniform_factored_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 8;
        let k = 4;
        let uniform = Tensor::matrix(n, k, vec![1.0 / k as f64; n * k]).unwrap();
        let phi_x = random_stochastic_rows(n, k, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let q = Tensor::matrix(k, k, vec![1.0 / k as f64; k * k]).unwrap();
        let ibb = ibb_loss(&uniform, &phi_x, &labels, &q).unwrap();
        let entropy_term: f64 = (0..n)
            .map(|i| phi_x.row(i).iter().map(|&p| xlogx(p)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let mce = marginal_cross_entropy(&phi_x, &input_marginal(&phi_x));
        assert!((ibb - (entropy_term + mce + (k as f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn ibb_rejects_zero_q_with_positive_mass() {
        let phi_f = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let phi_x = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let q = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(ibb_loss(&phi_f, &phi_x, &[0], &q).is_err());
    }

    #[test]
    fn variational_bound_holds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.gen_range(2..32);
            let k = rng.gen_range(2..6);
            let phi_f = random_stochastic_rows(n, k, &mut rng);
            let phi_x = random_stochastic_rows(n, k, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let (q, _) = update_variational_q(&phi_f, &labels, k).unwrap();
            let ib = ib_loss(&phi_f, &phi_x, &labels).unwrap();
            let ibb = ibb_loss(&phi_f, &phi_x, &labels, &q).unwrap();
            assert!(ibb - ib >= -1e-9, "ibb={ibb} ib={ib}");
            // the slack decomposes exactly into the two lemma gaps
            let g1 = lemma1_gap(&phi_f, &phi_x).unwrap();
            let g2 = lemma2_gap(&phi_f, &labels, &q).unwrap();
            assert!(((ibb - ib) - (g1 + g2)).abs() < 1e-9);
        }
    }

    #[test]
    fn ibb_is_separable_and_minibatch_restricts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 8;
        let k = 3;
        let d = 4;
        let feats = Tensor::from_rows(
            &(0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let centroids = Tensor::from_rows(
            &(0..k)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let phi_x = random_stochastic_rows(n, k, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let phi_f = soft_assignment(&feats, &centroids).unwrap();
        let (q, _) = update_variational_q(&phi_f, &labels, k).unwrap();

        // full batch with the same Q equals the dataset-level bound
        let full = ibb_minibatch(&feats, &phi_x, &labels, &centroids, &q, None).unwrap();
        let dataset = ibb_loss(&phi_f, &phi_x, &labels, &q).unwrap();
        assert!((full - dataset).abs() < 1e-12);

        // two disjoint half-batches, holding the dataset-level input marginal
        // fixed, average to the full value
        let p = input_marginal(&phi_x);
        let half = n / 2;
        let take = |lo: usize, hi: usize, marg: Option<&Tensor>| {
            let f = Tensor::from_rows(
                &(lo..hi).map(|i| feats.row(i).to_vec()).collect::<Vec<_>>(),
            )
            .unwrap();
            let px = Tensor::from_rows(
                &(lo..hi).map(|i| phi_x.row(i).to_vec()).collect::<Vec<_>>(),
            )
            .unwrap();
            let lab: Vec<usize> = labels[lo..hi].to_vec();
            ibb_minibatch(&f, &px, &lab, &centroids, &q, marg).unwrap()
        };
        let mean_halves = 0.5 * (take(0, half, Some(&p)) + take(half, n, Some(&p)));
        assert!((mean_halves - full).abs() < 1e-12);

        // hand-rolled triple loop over a batch of the first 4 samples
        let b = 4;
        let batch_px =
            Tensor::from_rows(&(0..b).map(|i| phi_x.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let phi_fb = soft_assignment(
            &Tensor::from_rows(&(0..b).map(|i| feats.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap(),
            &centroids,
        )
        .unwrap();
        let mut expect = 0.0;
        for i in 0..b {
            for a in 0..k {
                for bb in 0..k {
                    expect += phi_fb.get(i, a) * xlogx(phi_x.get(i, bb));
                }
                expect -= phi_fb.get(i, a) * q.get(a, labels[i]).ln();
            }
        }
        expect /= b as f64;
        expect += marginal_cross_entropy(&batch_px, &input_marginal(&batch_px));
        let got = take(0, b, None);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn q_update_identity_and_uniform() {
        let labels: Vec<usize> = vec![0, 1, 2, 0, 1, 2];
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                let mut r = vec![0.0; 3];
                r[y] = 1.0;
                r
            })
            .collect();
        let hard = Tensor::from_rows(&rows).unwrap();
        let (q, empty) = update_variational_q(&hard, &labels, 3).unwrap();
        assert!(empty.is_empty());
        for a in 0..3 {
            for y in 0..3 {
                // zero entries are floored to keep every column strictly
                // positive, so identity only up to the floor scale
                let expect = if a == y { 1.0 } else { 0.0 };
                assert!((q.get(a, y) - expect).abs() < 1e-11);
                assert!(q.get(a, y) > 0.0);
            }
        }

        let uniform = Tensor::matrix(6, 3, vec![1.0 / 3.0; 18]).unwrap();
        let (q, _) = update_variational_q(&uniform, &labels, 3).unwrap();
        assert!(q.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn q_update_matches_weighted_average_and_is_column_stochastic() {
        let phi = Tensor::from_rows(&[
            vec![0.7, 0.3],
            vec![0.2, 0.8],
            vec![0.6, 0.4],
            vec![0.1, 0.9],
        ])
        .unwrap();
        let labels = vec![0, 0, 1, 1];
        let (q, _) = update_variational_q(&phi, &labels, 2).unwrap();
        assert!((q.get(0, 0) - 0.45).abs() < 1e-15);
        assert!((q.get(1, 0) - 0.55).abs() < 1e-15);
        assert!((q.get(0, 1) - 0.35).abs() < 1e-15);
        assert!((q.get(1, 1) - 0.65).abs() < 1e-15);
        for y in 0..2 {
            let col: f64 = (0..2).map(|a| q.get(a, y)).sum();
            assert!((col - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn q_update_empty_class_gets_uniform_column() {
        let phi = Tensor::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        let labels = vec![0, 0];
        let (q, empty) = update_variational_q(&phi, &labels, 2).unwrap();
        assert_eq!(empty, vec![1]);
        assert!((q.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((q.get(1, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn centroid_update_cases() {
        let feats = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (c, _) = update_centroids(&feats, &[0, 1], 2, None).unwrap();
        assert_eq!(c, feats);

        let feats = Tensor::from_rows(&[vec![2.0, -1.0], vec![-2.0, 1.0]]).unwrap();
        let (c, _) = update_centroids(&feats, &[0, 0], 1, None).unwrap();
        assert!(c.data().iter().all(|&v| v.abs() < 1e-15));

        // grouped-mean oracle on a random instance
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..20).map(|_| rng.gen_range(0..4)).collect();
        let feats = Tensor::from_rows(&rows).unwrap();
        let (c, _) = update_centroids(&feats, &labels, 4, None).unwrap();
        for y in 0..4 {
            let members: Vec<&Vec<f64>> = rows
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == y)
                .map(|(r, _)| r)
                .collect();
            for j in 0..3 {
                let mean: f64 =
                    members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
                assert!((c.get(y, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centroid_update_empty_class_carries_previous() {
        let prev = Tensor::from_rows(&[vec![9.0, 9.0], vec![7.0, 7.0]]).unwrap();
        let feats = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (c, empty) = update_centroids(&feats, &[0], 2, Some(&prev)).unwrap();
        assert_eq!(empty, vec![1]);
        assert_eq!(c.row(1), &[7.0, 7.0]);
    }

    #[test]
    fn lemma_gaps_nonnegative_and_exact_q_tightens() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(2..24);
            let k = rng.gen_range(2..5);
            let phi_f = random_stochastic_rows(n, k, &mut rng);
            let phi_x = random_stochastic_rows(n, k, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let (q, _) = update_variational_q(&phi_f, &labels, k).unwrap();
            assert!(lemma1_gap(&phi_f, &phi_x).unwrap() >= -1e-9);
            let exact = lemma2_gap(&phi_f, &labels, &q).unwrap();
            assert!(exact >= -1e-9);
            let uniform = Tensor::matrix(k, k, vec![1.0 / k as f64; k * k]).unwrap();
            let loose = lemma2_gap(&phi_f, &labels, &uniform).unwrap();
            assert!(exact <= loose + 1e-9, "exact={exact} loose={loose}");
        }
    }

    #[test]
    fn lemma2_gap_zero_for_hard_assignments_with_exact_q() {
        // all mass on one cluster: the KL slack vanishes because Q equals the
        // conditional, and the feature-marginal entropy slack vanishes because
        // P(F) is concentrated
        let labels = vec![0usize, 1, 2, 0, 1, 2];
        let hard =
            Tensor::from_rows(&vec![vec![1.0, 0.0, 0.0]; 6]).unwrap();
        let (q, _) = update_variational_q(&hard, &labels, 3).unwrap();
        let gap = lemma2_gap(&hard, &labels, &q).unwrap();
        assert!(gap.abs() < 1e-9, "gap={gap}");
    }
}
