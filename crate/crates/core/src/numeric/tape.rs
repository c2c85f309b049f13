//! Reverse-mode differentiation over a closed operator set.
//!
//! A [`Tape`] records every operation in execution order. [`Tape::backward`]
//! walks the records from the loss back to index 0 and, for each record,
//! pushes adjoints to its operands in operand order. Because both traversals
//! are fixed, adjoint accumulation is deterministic and replaying the same
//! forward pass reproduces every value bit-for-bit.

use super::matrix::{dot, norm, Matrix};
use super::ops::{log_sum_exp, ZERO_NORM};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Concat(Var, Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    CosineDistill {
        t: Var,
        t_hat: Var,
        mask: Vec<bool>,
        active: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of its shape when nothing flowed into it.
    pub fn take(&mut self, v: Var) -> Matrix {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Matrix::zeros(r, c)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Concat(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Scale(x, _) | Op::Tanh(x) | Op::L2Normalize { x, .. } => self.needs(*x),
            Op::SoftmaxCe { logits, .. } => self.needs(*logits),
            Op::CosineDistill { t, t_hat, .. } => self.needs(*t) || self.needs(*t_hat),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Records a parameter or input that receives an adjoint.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a value treated as constant: no adjoint is computed for it
    /// and [`Gradients::take`] yields zeros.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the batched form of applying weight `b` to rows of `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds the `1 × d` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    /// Column-wise `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hcat(self.value(b))?;
        Ok(self.push(v, Op::Concat(a, b)))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, as a `1 × 1` value.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: z.rows(),
            });
        }
        if z.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let c = z.cols();
        let mut probs = Vec::with_capacity(z.len());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::IndexOutOfRange { index: y, len: c });
            }
            let row = z.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[y];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let loss = total / labels.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let probs = Matrix::from_raw(z.rows(), c, probs);
        Ok(self.push(
            Matrix::from_raw(1, 1, vec![loss]),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean of `1 - cos(t_hat_i, t_i)` over rows with `mask[i]` set.
    ///
    /// Rows outside the mask contribute nothing; with no active rows the
    /// loss is 0.
    pub fn cosine_distill(&mut self, t: Var, t_hat: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (tv, hv) = (self.value(t), self.value(t_hat));
        if tv.shape() != hv.shape() {
            return Err(Error::ShapeMismatch {
                expected: tv.shape(),
                got: hv.shape(),
            });
        }
        let mask = match mask {
            Some(m) if m.len() != tv.rows() => {
                return Err(Error::LengthMismatch {
                    left: m.len(),
                    right: tv.rows(),
                })
            }
            Some(m) => m.to_vec(),
            None => vec![true; tv.rows()],
        };
        let mut total = 0.0;
        let mut active = 0;
        for (i, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
            let (a, b) = (tv.row(i), hv.row(i));
            let (na, nb) = (norm(a), norm(b));
            if na < ZERO_NORM || nb < ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            total += 1.0 - dot(a, b) / (na * nb);
            active += 1;
        }
        let loss = if active == 0 {
            0.0
        } else {
            total / active as f64
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(self.push(
            Matrix::from_raw(1, 1, vec![loss]),
            Op::CosineDistill {
                t,
                t_hat,
                mask,
                active,
            },
        ))
    }

    /// Row-wise L2 normalization.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.len());
        for i in 0..xv.rows() {
            let r = xv.row(i);
            let n = norm(r);
            if n < ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            norms.push(n);
            data.extend(r.iter().map(|v| v / n));
        }
        let out = Matrix::from_raw(xv.rows(), xv.cols(), data);
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    /// Adjoints of the `1 × 1` value `loss` with respect to every record.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                expected: (1, 1),
                got: self.value(loss).shape(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_raw(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = g.matmul_t(self.value(*b))?;
                        self.accumulate(&mut grads, *a, da)?;
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).t_matmul(&g)?;
                        self.accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        let da = g.matmul(self.value(*b))?;
                        self.accumulate(&mut grads, *a, da)?;
                    }
                    if self.needs(*b) {
                        let db = g.t_matmul(self.value(*a))?;
                        self.accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g.clone())?;
                }
                Op::AddBias(x, b) => {
                    let db = g.sum_rows();
                    self.accumulate(&mut grads, *x, g.clone())?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(x, s) => self.accumulate(&mut grads, *x, g.scale(*s))?,
                Op::Tanh(x) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    self.accumulate(&mut grads, *x, Matrix::from_raw(y.rows(), y.cols(), data))?;
                }
                Op::Concat(a, b) => {
                    let (ga, gb) = g.split_cols(self.value(*a).cols());
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let v = d.get(r, y);
                        d.set(r, y, v - 1.0);
                    }
                    self.accumulate(&mut grads, *logits, d.scale(scale))?;
                }
                Op::CosineDistill {
                    t,
                    t_hat,
                    mask,
                    active,
                } => {
                    let (tv, hv) = (self.value(*t), self.value(*t_hat));
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    let mut dh = Matrix::zeros(tv.rows(), tv.cols());
                    if *active > 0 {
                        let scale = g.get(0, 0) / *active as f64;
                        let d = tv.cols();
                        for (r, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
                            let (a, b) = (tv.row(r), hv.row(r));
                            let (na, nb) = (norm(a), norm(b));
                            let inv = 1.0 / (na * nb);
                            let c = dot(a, b) * inv;
                            for k in 0..d {
                                dh.data_mut()[r * d + k] =
                                    -scale * (a[k] * inv - c * b[k] / (nb * nb));
                                dt.data_mut()[r * d + k] =
                                    -scale * (b[k] * inv - c * a[k] / (na * na));
                            }
                        }
                    }
                    self.accumulate(&mut grads, *t, dt)?;
                    self.accumulate(&mut grads, *t_hat, dh)?;
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    let d = y.cols();
                    for (r, &n) in norms.iter().enumerate() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let proj = dot(yr, gr);
                        for k in 0..d {
                            dx.data_mut()[r * d + k] = (gr[k] - yr[k] * proj) / n;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx)?;
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::grad_check;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Builds a scalar loss exercising one operator, returns (loss, grads of params).
    fn check_op(
        params: Vec<Matrix>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> f64 {
        grad_check(&params, 1e-5, |ps| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
            let loss = build(&mut tape, &vars)?;
            let mut g = tape.backward(loss)?;
            let value = tape.value(loss).get(0, 0);
            Ok((value, vars.iter().map(|&v| g.take(v)).collect()))
        })
        .unwrap()
    }

    // Reduces an arbitrary matrix to a scalar with a fixed random readout.
    fn readout(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
        let (r, c) = tape.value(x).shape();
        let mut rng = Rng::new(seed);
        let labels: Vec<usize> = (0..r).map(|_| rng.below(c.max(1))).collect();
        tape.softmax_ce(x, &labels)
    }

    #[test]
    fn every_operator_passes_gradient_check() {
        for seed in 0..10u64 {
            let mut rng = Rng::new(seed);
            let (b, d, k) = (3, 4, 5);

            let err = check_op(vec![random(&mut rng, b, d), random(&mut rng, d, k)], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y, seed)
            });
            assert!(err < 1e-4, "matmul {err}");

            let err = check_op(vec![random(&mut rng, b, d), random(&mut rng, k, d)], |t, v| {
                let y = t.matmul_t(v[0], v[1])?;
                readout(t, y, seed)
            });
            assert!(err < 1e-4, "matmul_t {err}");

            let err = check_op(
                vec![random(&mut rng, b, d), random(&mut rng, b, d), random(&mut rng, 1, d)],
                |t, v| {
                    let y = t.add(v[0], v[1])?;
                    let y = t.add_bias(y, v[2])?;
                    let y = t.scale(y, 0.7);
                    let y = t.tanh(y);
                    readout(t, y, seed)
                },
            );
            assert!(err < 1e-4, "add/bias/scale/tanh {err}");

            let err = check_op(vec![random(&mut rng, b, 2), random(&mut rng, b, 3)], |t, v| {
                let y = t.concat(v[0], v[1])?;
                readout(t, y, seed)
            });
            assert!(err < 1e-4, "concat {err}");

            let err = check_op(vec![random(&mut rng, b, d), random(&mut rng, b, d)], |t, v| {
                t.cosine_distill(v[0], v[1], Some(&[true, false, true]))
            });
            assert!(err < 1e-4, "cosine_distill {err}");

            let err = check_op(vec![random(&mut rng, b, d)], |t, v| {
                let y = t.l2_normalize(v[0])?;
                readout(t, y, seed)
            });
            assert!(err < 1e-4, "l2_normalize {err}");
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = Rng::new(42);
        let x = random(&mut rng, 4, 6);
        let w = random(&mut rng, 3, 6);
        let run = || {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let y = t.matmul_t(xv, wv).unwrap();
            let y = t.tanh(y);
            let loss = t.softmax_ce(y, &[0, 1, 2, 0]).unwrap();
            let mut g = t.backward(loss).unwrap();
            (t.value(y).clone(), t.value(loss).clone(), g.take(wv))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::identity(2));
        let unused = t.leaf(Matrix::zeros(1, 3));
        let loss = t.softmax_ce(a, &[0, 1]).unwrap();
        let mut g = t.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.take(unused), Matrix::zeros(1, 3));
    }

    #[test]
    fn constants_get_no_adjoint_and_leave_leaf_gradients_unchanged() {
        let mut rng = Rng::new(4);
        let (x, w) = (random(&mut rng, 3, 4), random(&mut rng, 2, 4));
        let run = |const_x: bool| {
            let mut t = Tape::new();
            let xv = if const_x { t.constant(x.clone()) } else { t.leaf(x.clone()) };
            let wv = t.leaf(w.clone());
            let z = t.matmul_t(xv, wv).unwrap();
            let loss = t.softmax_ce(z, &[0, 1, 1]).unwrap();
            let mut g = t.backward(loss).unwrap();
            (g.get(xv).is_some(), g.take(wv))
        };
        let (x_has, gw_leaf) = run(false);
        let (x_const_has, gw_const) = run(true);
        assert!(x_has);
        assert!(!x_const_has);
        assert_eq!(gw_leaf, gw_const);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::identity(2));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn distill_with_empty_mask_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::identity(2));
        let b = t.leaf(Matrix::identity(2));
        let loss = t.cosine_distill(a, b, Some(&[false, false])).unwrap();
        assert_eq!(t.value(loss).get(0, 0), 0.0);
    }
}
