//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every [`Var`] is a node on a [`Tape`]; operations record their parents and
//! a closure producing per-parent gradient contributions. A tape is confined
//! to one logical thread; tensors themselves are immutable and shareable.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

type BackFn = Box<dyn Fn(&Tensor, &[Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Record a leaf. Leaves have no parents; their gradients are read back
    /// after [`backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        let rows = value.rows();
        let cols = value.cols();
        let mut nodes = self.inner.borrow_mut();
        debug_assert!(parents.iter().all(|&p| p < nodes.len()), "parents precede node");
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var {
            tape: self.clone(),
            id: nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.inner.borrow()[id].value.clone()
    }
}

#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

/// Gradients of a scalar loss with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, var: &Var) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(var.rows, var.cols))
    }
}

/// Reverse pass from a scalar loss. Populates a gradient for every node the
/// loss depends on, visiting each node exactly once.
pub fn backward(loss: &Var) -> Result<Gradients> {
    if loss.rows * loss.cols != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape [{}, {}]",
            loss.rows, loss.cols
        )));
    }
    let nodes = loss.tape.inner.borrow();
    let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
    grads[loss.id] = Some(Tensor::scalar(1.0));
    for id in (0..=loss.id).rev() {
        let Some(upstream) = grads[id].clone() else {
            continue;
        };
        let node = &nodes[id];
        let Some(back) = &node.backward else {
            continue;
        };
        let parent_values: Vec<Tensor> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
        let contributions = back(&upstream, &parent_values);
        debug_assert_eq!(contributions.len(), node.parents.len());
        for (&pid, contrib) in node.parents.iter().zip(contributions) {
            grads[pid] = Some(match grads[pid].take() {
                None => contrib,
                Some(acc) => tensor::add(&acc, &contrib)?,
            });
        }
    }
    Ok(Gradients { grads })
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn unary(&self, value: Tensor, back: BackFn) -> Var {
        self.tape.push(value, vec![self.id], Some(back))
    }

    fn binary(&self, other: &Var, value: Tensor, back: BackFn) -> Var {
        self.tape
            .push(value, vec![self.id, other.id], Some(back))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = tensor::add(&self.value(), &other.value())?;
        Ok(self.binary(other, v, Box::new(|g, _| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = tensor::sub(&self.value(), &other.value())?;
        Ok(self.binary(
            other,
            v,
            Box::new(|g, _| vec![g.clone(), tensor::scale(g, -1.0)]),
        ))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = tensor::hadamard(&self.value(), &other.value())?;
        Ok(self.binary(
            other,
            v,
            Box::new(|g, p| {
                vec![
                    tensor::hadamard(g, &p[1]).expect("shapes recorded"),
                    tensor::hadamard(g, &p[0]).expect("shapes recorded"),
                ]
            }),
        ))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let v = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.binary(
            other,
            v,
            Box::new(|g, p| {
                let da = tensor::matmul(g, &tensor::transpose(&p[1])).expect("shapes recorded");
                let db = tensor::matmul(&tensor::transpose(&p[0]), g).expect("shapes recorded");
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&self) -> Var {
        let v = tensor::transpose(&self.value());
        self.unary(v, Box::new(|g, _| vec![tensor::transpose(g)]))
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = tensor::scale(&self.value(), c);
        self.unary(v, Box::new(move |g, _| vec![tensor::scale(g, c)]))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.value().map(|x| x + c);
        self.unary(v, Box::new(|g, _| vec![g.clone()]))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        let y = v.clone();
        self.unary(
            v,
            Box::new(move |g, _| {
                vec![g
                    .zip(&y, "sigmoid_back", |gi, yi| gi * yi * (1.0 - yi))
                    .expect("shapes recorded")]
            }),
        )
    }

    pub fn exp(&self) -> Var {
        let v = self.value().map(f64::exp);
        let y = v.clone();
        self.unary(
            v,
            Box::new(move |g, _| vec![tensor::hadamard(g, &y).expect("shapes recorded")]),
        )
    }

    pub fn ln(&self) -> Var {
        let v = self.value().map(f64::ln);
        self.unary(
            v,
            Box::new(|g, p| {
                vec![g.zip(&p[0], "ln_back", |gi, xi| gi / xi).expect("shapes recorded")]
            }),
        )
    }

    pub fn relu(&self) -> Var {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(
            v,
            Box::new(|g, p| {
                vec![g
                    .zip(&p[0], "relu_back", |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                    .expect("shapes recorded")]
            }),
        )
    }

    /// sqrt(max(x, 0)); the derivative is clamped near zero so hinge-style
    /// losses at coincident points do not blow up.
    pub fn sqrt(&self) -> Var {
        let v = self.value().map(|x| x.max(0.0).sqrt());
        let y = v.clone();
        self.unary(
            v,
            Box::new(move |g, _| {
                vec![g
                    .zip(&y, "sqrt_back", |gi, yi| {
                        if yi < 1e-12 {
                            0.0
                        } else {
                            gi * 0.5 / yi
                        }
                    })
                    .expect("shapes recorded")]
            }),
        )
    }

    pub fn softmax_rows(&self) -> Var {
        let v = tensor::softmax_rows(&self.value());
        let y = v.clone();
        self.unary(
            v,
            Box::new(move |g, _| {
                let (m, n) = (y.rows(), y.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        out[i * n + j] = (g.get(i, j) - dot) * y.get(i, j);
                    }
                }
                vec![Tensor::matrix(m, n, out).expect("shapes recorded")]
            }),
        )
    }

    /// Row-wise log-sum-exp, producing an m x 1 column.
    pub fn logsumexp_rows(&self) -> Var {
        let x = self.value();
        let m = x.rows();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let max = x.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = x.row(i).iter().map(|&v| (v - max).exp()).sum();
            out[i] = max + s.ln();
        }
        let v = Tensor::matrix(m, 1, out).expect("logsumexp");
        self.unary(
            v,
            Box::new(|g, p| {
                let sm = tensor::softmax_rows(&p[0]);
                let (m, n) = (sm.rows(), sm.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.get(i, 0);
                    for j in 0..n {
                        out[i * n + j] = gi * sm.get(i, j);
                    }
                }
                vec![Tensor::matrix(m, n, out).expect("shapes recorded")]
            }),
        )
    }

    pub fn sum(&self) -> Var {
        let s: f64 = self.value().data().iter().sum();
        let (m, n) = (self.rows, self.cols);
        self.unary(
            Tensor::scalar(s),
            Box::new(move |g, _| {
                let gi = g.item();
                vec![Tensor::matrix(m, n, vec![gi; m * n]).expect("shapes recorded")]
            }),
        )
    }

    pub fn mean(&self) -> Var {
        let numel = (self.rows * self.cols) as f64;
        self.sum().scale(1.0 / numel)
    }

    /// Column sums, producing a 1 x n row.
    pub fn sum_axis0(&self) -> Var {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += x.get(i, j);
            }
        }
        let v = Tensor::matrix(1, n, out).expect("sum_axis0");
        self.unary(
            v,
            Box::new(move |g, _| {
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    out[i * n..(i + 1) * n].copy_from_slice(g.row(0));
                }
                vec![Tensor::matrix(m, n, out).expect("shapes recorded")]
            }),
        )
    }

    /// Row sums, producing an m x 1 column.
    pub fn sum_axis1(&self) -> Var {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let out: Vec<f64> = (0..m).map(|i| x.row(i).iter().sum()).collect();
        let v = Tensor::matrix(m, 1, out).expect("sum_axis1");
        self.unary(
            v,
            Box::new(move |g, _| {
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.get(i, 0);
                    for j in 0..n {
                        out[i * n + j] = gi;
                    }
                }
                vec![Tensor::matrix(m, n, out).expect("shapes recorded")]
            }),
        )
    }

    pub fn mean_axis0(&self) -> Var {
        let m = self.rows as f64;
        self.sum_axis0().scale(1.0 / m)
    }

    /// Broadcast-add a 1 x n row vector to every row.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: vec![self.rows, self.cols],
                rhs: vec![row.rows, row.cols],
            });
        }
        let x = self.value();
        let r = row.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = x.get(i, j) + r.get(0, j);
            }
        }
        let v = Tensor::matrix(m, n, out).expect("add_row");
        Ok(self.binary(
            row,
            v,
            Box::new(move |g, _| {
                let mut rg = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        rg[j] += g.get(i, j);
                    }
                }
                vec![g.clone(), Tensor::matrix(1, n, rg).expect("shapes recorded")]
            }),
        ))
    }

    /// Broadcast-multiply every row by a 1 x n row vector.
    pub fn mul_row(&self, row: &Var) -> Result<Var> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                lhs: vec![self.rows, self.cols],
                rhs: vec![row.rows, row.cols],
            });
        }
        let x = self.value();
        let r = row.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = x.get(i, j) * r.get(0, j);
            }
        }
        let v = Tensor::matrix(m, n, out).expect("mul_row");
        Ok(self.binary(
            row,
            v,
            Box::new(move |g, p| {
                let (x, r) = (&p[0], &p[1]);
                let mut xg = vec![0.0; m * n];
                let mut rg = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        xg[i * n + j] = g.get(i, j) * r.get(0, j);
                        rg[j] += g.get(i, j) * x.get(i, j);
                    }
                }
                vec![
                    Tensor::matrix(m, n, xg).expect("shapes recorded"),
                    Tensor::matrix(1, n, rg).expect("shapes recorded"),
                ]
            }),
        ))
    }

    /// Broadcast-add an m x 1 column vector to every column.
    pub fn add_col(&self, col: &Var) -> Result<Var> {
        if col.cols != 1 || col.rows != self.rows {
            return Err(Error::ShapeMismatch {
                op: "add_col",
                lhs: vec![self.rows, self.cols],
                rhs: vec![col.rows, col.cols],
            });
        }
        let x = self.value();
        let c = col.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = x.get(i, j) + c.get(i, 0);
            }
        }
        let v = Tensor::matrix(m, n, out).expect("add_col");
        Ok(self.binary(
            col,
            v,
            Box::new(move |g, _| {
                let cg: Vec<f64> = (0..m).map(|i| g.row(i).iter().sum()).collect();
                vec![g.clone(), Tensor::matrix(m, 1, cg).expect("shapes recorded")]
            }),
        ))
    }

    /// Broadcast-multiply every column by an m x 1 column vector.
    pub fn mul_col(&self, col: &Var) -> Result<Var> {
        if col.cols != 1 || col.rows != self.rows {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                lhs: vec![self.rows, self.cols],
                rhs: vec![col.rows, col.cols],
            });
        }
        let x = self.value();
        let c = col.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = x.get(i, j) * c.get(i, 0);
            }
        }
        let v = Tensor::matrix(m, n, out).expect("mul_col");
        Ok(self.binary(
            col,
            v,
            Box::new(move |g, p| {
                let (x, c) = (&p[0], &p[1]);
                let mut xg = vec![0.0; m * n];
                let mut cg = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        xg[i * n + j] = g.get(i, j) * c.get(i, 0);
                        cg[i] += g.get(i, j) * x.get(i, j);
                    }
                }
                vec![
                    Tensor::matrix(m, n, xg).expect("shapes recorded"),
                    Tensor::matrix(m, 1, cg).expect("shapes recorded"),
                ]
            }),
        ))
    }

    /// Select row `i` as a 1 x n var; the gradient scatters back.
    pub fn select_row(&self, i: usize) -> Var {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        assert!(i < m, "row index out of range");
        let v = Tensor::matrix(1, n, x.row(i).to_vec()).expect("select_row");
        self.unary(
            v,
            Box::new(move |g, _| {
                let mut out = vec![0.0; m * n];
                out[i * n..(i + 1) * n].copy_from_slice(g.row(0));
                vec![Tensor::matrix(m, n, out).expect("shapes recorded")]
            }),
        )
    }

    /// Forward pass binarizes at 0.5 with a strict `>`; the backward pass is
    /// the identity (straight-through).
    pub fn straight_through_binarize(&self) -> Var {
        let v = self.value().map(|x| if x > 0.5 { 1.0 } else { 0.0 });
        self.unary(v, Box::new(|g, _| vec![g.clone()]))
    }
}

/// Stack 1 x n rows into an m x n var.
pub fn concat_rows(tape: &Tape, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("concat_rows on empty slice".into()));
    }
    let n = rows[0].cols;
    let m = rows.len();
    let mut data = Vec::with_capacity(m * n);
    for r in rows {
        if r.rows != 1 || r.cols != n {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: vec![1, n],
                rhs: vec![r.rows, r.cols],
            });
        }
        data.extend_from_slice(r.value().data());
    }
    let v = Tensor::matrix(m, n, data)?;
    let parents: Vec<usize> = rows.iter().map(|r| r.id).collect();
    Ok(tape.push(
        v,
        parents,
        Some(Box::new(move |g, _| {
            (0..m)
                .map(|i| Tensor::matrix(1, n, g.row(i).to_vec()).expect("shapes recorded"))
                .collect()
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap());
        let loss = x.sum();
        let grads = backward(&loss).unwrap();
        assert!(grads.wrt(&x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_sum_of_squares_is_2x() {
        let tape = Tape::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(Tensor::matrix(2, 2, data.clone()).unwrap());
        let loss = x.mul(&x).unwrap().sum();
        let grads = backward(&loss).unwrap();
        for (g, v) in grads.wrt(&x).data().iter().zip(&data) {
            assert!((g - 2.0 * v).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(backward(&x).is_err());
    }

    #[test]
    fn straight_through_forward_binarizes_backward_passes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 4, vec![0.4, 0.5, 0.6, 0.9]).unwrap());
        let h = x.straight_through_binarize();
        assert_eq!(h.value().data(), &[0.0, 0.0, 1.0, 1.0]);
        let w = tape.leaf(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = h.mul(&w).unwrap().sum();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
