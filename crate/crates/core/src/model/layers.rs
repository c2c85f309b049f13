//! Trainable building blocks. Every forward pass runs on a [`Tape`], so
//! inference and training share one code path.

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Tape, Var};
use crate::rng::Rng;

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian draw")
}

fn expect_shape(m: &Matrix, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape,
            got: m.shape(),
        });
    }
    Ok(())
}

fn bind(tape: &mut Tape, m: &Matrix, train: bool) -> Var {
    if train {
        tape.leaf(m.clone())
    } else {
        tape.constant(m.clone())
    }
}

fn check_input(x: &Matrix, d_in: usize) -> Result<()> {
    if x.cols() != d_in {
        return Err(Error::DimensionMismatch {
            expected: d_in,
            got: x.cols(),
        });
    }
    Ok(())
}

/// `y = x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ + bias` with `W` frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    base: Matrix,
    a: Matrix,
    b: Matrix,
    bias: Option<Matrix>,
    alpha: f64,
}

impl LoraLinear {
    pub fn new(base: Matrix, a: Matrix, b: Matrix, bias: Option<Matrix>, alpha: f64) -> Result<Self> {
        let (d_out, d_in) = base.shape();
        let r = a.rows();
        if r == 0 {
            return Err(Error::ConfigInvalid("LoRA rank must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::ConfigInvalid(format!("LoRA alpha {alpha} must be positive")));
        }
        expect_shape(&a, (r, d_in))?;
        expect_shape(&b, (d_out, r))?;
        if let Some(bias) = &bias {
            expect_shape(bias, (1, d_out))?;
        }
        Ok(Self {
            base,
            a,
            b,
            bias,
            alpha,
        })
    }

    /// Identity base, `A ~ N(0, 1/d)`, `B = 0`, no bias.
    pub fn identity(d: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let a = gaussian(rng, rank, d, 1.0 / (d as f64).sqrt());
        Self::new(Matrix::identity(d), a, Matrix::zeros(d, rank), None, alpha)
    }

    pub fn d_in(&self) -> usize {
        self.base.cols()
    }

    pub fn d_out(&self) -> usize {
        self.base.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn bias(&self) -> Option<&Matrix> {
        self.bias.as_ref()
    }

    /// `A`, `B` and the bias when present.
    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.a, &self.b];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.a, &mut self.b];
        v.extend(self.bias.as_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, train: bool) -> LoraVars {
        LoraVars {
            d_in: self.d_in(),
            base: tape.constant(self.base.clone()),
            a: bind(tape, &self.a, train),
            b: bind(tape, &self.b, train),
            bias: self.bias.as_ref().map(|m| bind(tape, m, train)),
            scale: self.scale(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = vars.apply(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(x)?)?.into_data())
    }

    pub fn param_count(&self) -> usize {
        self.base.len() + self.trainable_count()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|m| m.len()).sum()
    }

    pub fn flops(&self) -> usize {
        let r = self.rank();
        2 * self.d_in() * self.d_out() + 2 * self.d_in() * r + 2 * r * self.d_out()
    }

    pub(crate) fn parts(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.base, &self.a, &self.b];
        v.extend(self.bias.as_ref());
        v
    }
}

#[derive(Clone, Debug)]
pub struct LoraVars {
    d_in: usize,
    base: Var,
    a: Var,
    b: Var,
    bias: Option<Var>,
    scale: f64,
}

impl LoraVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_input(tape.value(x), self.d_in)?;
        let base = tape.matmul_t(x, self.base)?;
        let xa = tape.matmul_t(x, self.a)?;
        let delta = tape.matmul_t(xa, self.b)?;
        let delta = tape.scale(delta, self.scale);
        let y = tape.add(base, delta)?;
        match self.bias {
            Some(b) => tape.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn trainable(&self) -> Vec<Var> {
        let mut v = vec![self.a, self.b];
        v.extend(self.bias);
        v
    }
}

/// `y = x·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    weight: Matrix,
    bias: Matrix,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        expect_shape(&bias, (1, weight.rows()))?;
        Ok(Self { weight, bias })
    }

    /// Weights `N(0, 1/d_in)`, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: gaussian(rng, d_out, d_in, 1.0 / (d_in as f64).sqrt()),
            bias: Matrix::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape, train: bool) -> AffineVars {
        AffineVars {
            d_in: self.d_in(),
            weight: bind(tape, &self.weight, train),
            bias: bind(tape, &self.bias, train),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = vars.apply(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn flops(&self) -> usize {
        2 * self.d_in() * self.d_out()
    }
}

#[derive(Clone, Debug)]
pub struct AffineVars {
    d_in: usize,
    weight: Var,
    bias: Var,
}

impl AffineVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_input(tape.value(x), self.d_in)?;
        let y = tape.matmul_t(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }
}

/// Two affine layers with a tanh between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub first: Affine,
    pub second: Affine,
}

impl Mlp {
    pub fn new(first: Affine, second: Affine) -> Result<Self> {
        if first.d_out() != second.d_in() {
            return Err(Error::DimensionMismatch {
                expected: first.d_out(),
                got: second.d_in(),
            });
        }
        Ok(Self { first, second })
    }

    pub fn init(d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        let first = Affine::init(d_in, hidden, rng);
        let second = Affine::init(hidden, d_out, rng);
        Self { first, second }
    }

    pub fn d_in(&self) -> usize {
        self.first.d_in()
    }

    pub fn hidden(&self) -> usize {
        self.first.d_out()
    }

    pub fn d_out(&self) -> usize {
        self.second.d_out()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.first.params_mut();
        v.extend(self.second.params_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, train: bool) -> MlpVars {
        MlpVars {
            first: self.first.bind(tape, train),
            second: self.second.bind(tape, train),
        }
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }

    pub fn flops(&self) -> usize {
        self.first.flops() + self.hidden() + self.second.flops()
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    first: AffineVars,
    second: AffineVars,
}

impl MlpVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.first.apply(tape, x)?;
        let h = tape.tanh(h);
        self.second.apply(tape, h)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.first.vars();
        v.extend(self.second.vars());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_computed_lora() {
        let layer = LoraLinear::new(
            Matrix::identity(2),
            m(&[&[1.0, 0.0]]),
            m(&[&[0.0], &[1.0]]),
            None,
            1.0,
        )
        .unwrap();
        assert_eq!(layer.forward_vec(&[1.0, 0.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn zero_b_is_exactly_base_plus_bias() {
        let mut rng = Rng::new(3);
        let base = gaussian(&mut rng, 3, 4, 1.0);
        let bias = gaussian(&mut rng, 1, 3, 1.0);
        let layer = LoraLinear::new(base.clone(), gaussian(&mut rng, 2, 4, 1.0), Matrix::zeros(3, 2), Some(bias.clone()), 4.0)
            .unwrap();
        let x = gaussian(&mut rng, 5, 4, 1.0);
        let expected = x.matmul_t(&base).unwrap().add_row(&bias).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), expected);
    }

    #[test]
    fn doubling_alpha_doubles_delta() {
        let mut rng = Rng::new(8);
        let (a, b) = (gaussian(&mut rng, 2, 3, 1.0), gaussian(&mut rng, 3, 2, 1.0));
        let x = [0.3, -1.2, 0.7];
        let at = |alpha| {
            LoraLinear::new(Matrix::identity(3), a.clone(), b.clone(), None, alpha)
                .unwrap()
                .forward_vec(&x)
                .unwrap()
        };
        let (one, two) = (at(1.0), at(2.0));
        for k in 0..3 {
            assert!(((two[k] - x[k]) - 2.0 * (one[k] - x[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_validation() {
        assert!(LoraLinear::new(Matrix::identity(2), Matrix::zeros(0, 2), Matrix::zeros(2, 0), None, 1.0).is_err());
        assert!(LoraLinear::new(Matrix::identity(2), Matrix::zeros(1, 2), Matrix::zeros(2, 1), None, 0.0).is_err());
        assert!(LoraLinear::new(Matrix::identity(2), Matrix::zeros(1, 3), Matrix::zeros(2, 1), None, 1.0).is_err());
        let layer = LoraLinear::identity(2, 1, 1.0, &mut Rng::new(0)).unwrap();
        assert!(matches!(layer.forward_vec(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn counts() {
        let mut rng = Rng::new(0);
        let aff = Affine::init(4, 3, &mut rng);
        assert_eq!(aff.param_count(), 15);
        assert_eq!(aff.flops(), 24);
        let lora = LoraLinear::identity(4, 2, 1.0, &mut rng).unwrap();
        assert_eq!(lora.trainable_count(), 16);
        assert_eq!(lora.param_count(), 32);
        let mlp = Mlp::init(4, 5, 3, &mut rng);
        assert_eq!(mlp.param_count(), 25 + 18);
        assert_eq!(mlp.flops(), 40 + 5 + 30);
    }

    #[test]
    fn frozen_base_gets_no_gradient() {
        let mut rng = Rng::new(1);
        let mut layer = LoraLinear::identity(3, 2, 2.0, &mut rng).unwrap();
        layer.b = gaussian(&mut rng, 3, 2, 1.0);
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape, true);
        let x = tape.constant(gaussian(&mut rng, 4, 3, 1.0));
        let y = vars.apply(&mut tape, x).unwrap();
        let loss = tape.softmax_ce(y, &[0, 1, 2, 0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(vars.base).is_none());
        assert!(vars.trainable().iter().all(|v| g.get(*v).is_some()));
    }
}
