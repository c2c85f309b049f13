use std::fmt;

use serde::{Deserialize, Serialize};

use super::layers::{Affine, AffineVars, LoraLinear, LoraVars, Mlp, MlpVars};
use crate::error::{Error, Result};
use crate::numeric::{argmax, Matrix, Tape, Var};
use crate::rng::Rng;

/// Architectural hyperparameters shared by every model kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_t: usize,
    /// Hidden width of the distillation module.
    pub hidden: usize,
    pub classes: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl ModelDims {
    /// Hidden width defaults to `max(d_v, d_t)`; LoRA to `r = 8, α = 8`.
    pub fn new(d_v: usize, d_t: usize, classes: usize) -> Self {
        Self {
            d_v,
            d_t,
            hidden: d_v.max(d_t),
            classes,
            rank: 8,
            alpha: 8.0,
        }
    }

    pub fn with_lora(mut self, rank: usize, alpha: f64) -> Self {
        self.rank = rank;
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_t == 0 || self.hidden == 0 {
            return Err(Error::ConfigInvalid("model dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::ConfigInvalid(format!("{} classes; need at least 2", self.classes)));
        }
        if self.rank == 0 {
            return Err(Error::ConfigInvalid("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::ConfigInvalid(format!("LoRA alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Distillation plus learned logit fusion.
    Late,
    /// One affine classifier over `[v | t̂]` (or `[v | t]`).
    Early,
    /// Text projected into the vision space and distilled there.
    Direct,
    VisionOnly,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Late => 0,
            ModelKind::Early => 1,
            ModelKind::Direct => 2,
            ModelKind::VisionOnly => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => ModelKind::Late,
            1 => ModelKind::Early,
            2 => ModelKind::Direct,
            3 => ModelKind::VisionOnly,
            c => return Err(Error::InvalidCheckpoint(format!("unknown model kind {c}"))),
        })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Late => "late",
            ModelKind::Early => "early",
            ModelKind::Direct => "direct",
            ModelKind::VisionOnly => "vision_only",
        })
    }
}

/// Everything after the vision adapter.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Late {
        h_t: Affine,
        h_v: Affine,
        h_d: Mlp,
        g: Affine,
    },
    Early {
        h_d: Mlp,
        classifier: Affine,
        real_text: bool,
    },
    Direct {
        h_v: Affine,
        /// Training-only map from text to vision space.
        projection: Option<Affine>,
    },
    VisionOnly {
        h_v: Affine,
    },
}

impl Head {
    pub fn kind(&self) -> ModelKind {
        match self {
            Head::Late { .. } => ModelKind::Late,
            Head::Early { .. } => ModelKind::Early,
            Head::Direct { .. } => ModelKind::Direct,
            Head::VisionOnly { .. } => ModelKind::VisionOnly,
        }
    }
}

/// Groups of parameters that a training stage can update together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    VisionAdapter,
    TextAdapter,
    TextHead,
    VisionHead,
    Distiller,
    Fusion,
    Classifier,
    Projection,
}

/// `[½I | ½I]` with zero bias: the mean of the two logit vectors.
pub fn averaging_fusion(classes: usize) -> Affine {
    let mut w = Matrix::zeros(classes, 2 * classes);
    for c in 0..classes {
        w.set(c, c, 0.5);
        w.set(c, classes + c, 0.5);
    }
    Affine::new(w, Matrix::zeros(1, classes)).expect("fusion shapes agree")
}

/// The CLIP-IT model: vision adapter `f′_v`, optional text adapter `f_t`
/// and a head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipItModel {
    dims: ModelDims,
    lambda: f64,
    f_v: LoraLinear,
    f_t: Option<LoraLinear>,
    head: Head,
}

/// Result of a joint forward pass.
///
/// For late and early models `t = f_t(x_t)` and `t_hat = h_d(v)`. For the
/// direct model `t` is the projected text and `t_hat` is `v` itself.
#[derive(Clone, Debug, PartialEq)]
pub struct JointOutput {
    pub logits: Matrix,
    pub t: Option<Matrix>,
    pub t_hat: Option<Matrix>,
}

impl ClipItModel {
    /// Fresh model. Draw order: `f′_v.A`, `f_t.A`, then head parameters in
    /// declaration order.
    pub fn init(kind: ModelKind, dims: ModelDims, lambda: f64, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let f_v = LoraLinear::identity(dims.d_v, dims.rank, dims.alpha, rng)?;
        let f_t = match kind {
            ModelKind::VisionOnly => None,
            _ => Some(LoraLinear::identity(dims.d_t, dims.rank, dims.alpha, rng)?),
        };
        let c = dims.classes;
        let head = match kind {
            ModelKind::Late => Head::Late {
                h_t: Affine::init(dims.d_t, c, rng),
                h_v: Affine::init(dims.d_v, c, rng),
                h_d: Mlp::init(dims.d_v, dims.hidden, dims.d_t, rng),
                g: averaging_fusion(c),
            },
            ModelKind::Early => Head::Early {
                h_d: Mlp::init(dims.d_v, dims.hidden, dims.d_t, rng),
                classifier: Affine::init(dims.d_v + dims.d_t, c, rng),
                real_text: false,
            },
            ModelKind::Direct => Head::Direct {
                h_v: Affine::init(dims.d_v, c, rng),
                projection: Some(Affine::init(dims.d_t, dims.d_v, rng)),
            },
            ModelKind::VisionOnly => Head::VisionOnly {
                h_v: Affine::init(dims.d_v, c, rng),
            },
        };
        Self::from_parts(dims, lambda, f_v, f_t, head)
    }

    /// Assembles a model, checking every submodule against `dims`.
    pub fn from_parts(
        dims: ModelDims,
        lambda: f64,
        f_v: LoraLinear,
        f_t: Option<LoraLinear>,
        head: Head,
    ) -> Result<Self> {
        dims.validate()?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::ConfigInvalid(format!("lambda {lambda} must be non-negative")));
        }
        let bad = |what: &str| Err(Error::ConfigInvalid(format!("{what} does not match model dimensions")));
        let (dv, dt, c) = (dims.d_v, dims.d_t, dims.classes);
        if (f_v.d_in(), f_v.d_out(), f_v.rank()) != (dv, dv, dims.rank) || f_v.alpha() != dims.alpha {
            return bad("vision adapter");
        }
        if let Some(f_t) = &f_t {
            if (f_t.d_in(), f_t.d_out(), f_t.rank()) != (dt, dt, dims.rank) || f_t.alpha() != dims.alpha {
                return bad("text adapter");
            }
        }
        let affine = |a: &Affine, d_in, d_out| a.d_in() == d_in && a.d_out() == d_out;
        let mlp = |m: &Mlp| m.d_in() == dv && m.hidden() == dims.hidden && m.d_out() == dt;
        let ok = match &head {
            Head::Late { h_t, h_v, h_d, g } => {
                affine(h_t, dt, c) && affine(h_v, dv, c) && mlp(h_d) && affine(g, 2 * c, c)
            }
            Head::Early {
                h_d,
                classifier,
                real_text,
            } => mlp(h_d) && affine(classifier, dv + dt, c) && !(*real_text && f_t.is_none()),
            Head::Direct { h_v, projection } => {
                affine(h_v, dv, c) && projection.as_ref().is_none_or(|p| affine(p, dt, dv))
            }
            Head::VisionOnly { h_v } => affine(h_v, dv, c),
        };
        if !ok {
            return bad("head");
        }
        Ok(Self {
            dims,
            lambda,
            f_v,
            f_t,
            head,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn kind(&self) -> ModelKind {
        self.head.kind()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::ConfigInvalid(format!("lambda {lambda} must be non-negative")));
        }
        self.lambda = lambda;
        Ok(())
    }

    pub fn vision_adapter(&self) -> &LoraLinear {
        &self.f_v
    }

    pub fn text_adapter(&self) -> Option<&LoraLinear> {
        self.f_t.as_ref()
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Swaps in a text adapter and, for late models, a text head, for
    /// example from a text-only fine-tuning stage.
    pub fn set_text_branch(&mut self, f_t: LoraLinear, h_t: Option<Affine>) -> Result<()> {
        if (f_t.d_in(), f_t.d_out(), f_t.rank()) != (self.dims.d_t, self.dims.d_t, self.dims.rank) {
            return Err(Error::ConfigInvalid("text adapter does not match model dimensions".into()));
        }
        if let Some(new) = h_t {
            match &mut self.head {
                Head::Late { h_t, .. } if new.d_in() == h_t.d_in() && new.d_out() == h_t.d_out() => *h_t = new,
                _ => return Err(Error::ConfigInvalid("text head does not fit this model".into())),
            }
        }
        self.f_t = Some(f_t);
        Ok(())
    }

    /// Drops everything inference from images alone does not need.
    pub fn into_unimodal(mut self) -> Self {
        if !matches!(self.head, Head::Early { real_text: true, .. }) {
            self.f_t = None;
        }
        if let Head::Direct { projection, .. } = &mut self.head {
            *projection = None;
        }
        self
    }

    /// Parts present in this model, in checkpoint order.
    pub fn parts(&self) -> Vec<Part> {
        let mut out = vec![Part::VisionAdapter];
        if self.f_t.is_some() {
            out.push(Part::TextAdapter);
        }
        match &self.head {
            Head::Late { .. } => out.extend([Part::TextHead, Part::VisionHead, Part::Distiller, Part::Fusion]),
            Head::Early { .. } => out.extend([Part::Distiller, Part::Classifier]),
            Head::Direct { projection, .. } => {
                out.push(Part::VisionHead);
                if projection.is_some() {
                    out.push(Part::Projection);
                }
            }
            Head::VisionOnly { .. } => out.push(Part::VisionHead),
        }
        out
    }

    pub fn has_part(&self, part: Part) -> bool {
        self.parts().contains(&part)
    }

    /// Trainable matrices of `part`; frozen adapter bases are excluded.
    pub fn part_params(&self, part: Part) -> Vec<&Matrix> {
        match (part, &self.head) {
            (Part::VisionAdapter, _) => self.f_v.trainable(),
            (Part::TextAdapter, _) => self.f_t.as_ref().map(LoraLinear::trainable).unwrap_or_default(),
            (Part::TextHead, Head::Late { h_t, .. }) => h_t.params(),
            (Part::VisionHead, Head::Late { h_v, .. } | Head::Direct { h_v, .. } | Head::VisionOnly { h_v }) => {
                h_v.params()
            }
            (Part::Distiller, Head::Late { h_d, .. } | Head::Early { h_d, .. }) => h_d.params(),
            (Part::Fusion, Head::Late { g, .. }) => g.params(),
            (Part::Classifier, Head::Early { classifier, .. }) => classifier.params(),
            (Part::Projection, Head::Direct { projection: Some(p), .. }) => p.params(),
            _ => Vec::new(),
        }
    }

    pub fn part_params_mut(&mut self, part: Part) -> Vec<&mut Matrix> {
        self.params_of_mut(&[part])
    }

    /// Trainable matrices of `parts`, concatenated in the given order.
    pub fn params_of(&self, parts: &[Part]) -> Vec<&Matrix> {
        parts.iter().flat_map(|&p| self.part_params(p)).collect()
    }

    pub fn params_of_mut(&mut self, parts: &[Part]) -> Vec<&mut Matrix> {
        let mut all = self.all_params_mut();
        let mut out = Vec::new();
        for p in parts {
            if let Some(pos) = all.iter().position(|(q, _)| q == p) {
                out.extend(all.swap_remove(pos).1);
            }
        }
        out
    }

    fn all_params_mut(&mut self) -> Vec<(Part, Vec<&mut Matrix>)> {
        let ClipItModel { f_v, f_t, head, .. } = self;
        let mut out = vec![(Part::VisionAdapter, f_v.trainable_mut())];
        if let Some(f) = f_t {
            out.push((Part::TextAdapter, f.trainable_mut()));
        }
        match head {
            Head::Late { h_t, h_v, h_d, g } => out.extend([
                (Part::TextHead, h_t.params_mut()),
                (Part::VisionHead, h_v.params_mut()),
                (Part::Distiller, h_d.params_mut()),
                (Part::Fusion, g.params_mut()),
            ]),
            Head::Early { h_d, classifier, .. } => out.extend([
                (Part::Distiller, h_d.params_mut()),
                (Part::Classifier, classifier.params_mut()),
            ]),
            Head::Direct { h_v, projection } => {
                out.push((Part::VisionHead, h_v.params_mut()));
                if let Some(p) = projection {
                    out.push((Part::Projection, p.params_mut()));
                }
            }
            Head::VisionOnly { h_v } => out.push((Part::VisionHead, h_v.params_mut())),
        }
        out
    }

    /// Records all parameters on `tape`; those in `train` as leaves, the
    /// rest as constants.
    pub fn bind(&self, tape: &mut Tape, train: &[Part]) -> Result<Bound> {
        for p in train {
            if !self.has_part(*p) {
                return Err(Error::ConfigInvalid(format!("model has no {p:?} to train")));
            }
        }
        let on = |p: Part| train.contains(&p);
        let f_v = self.f_v.bind(tape, on(Part::VisionAdapter));
        let f_t = self.f_t.as_ref().map(|f| f.bind(tape, on(Part::TextAdapter)));
        let head = match &self.head {
            Head::Late { h_t, h_v, h_d, g } => HeadVars::Late {
                h_t: h_t.bind(tape, on(Part::TextHead)),
                h_v: h_v.bind(tape, on(Part::VisionHead)),
                h_d: h_d.bind(tape, on(Part::Distiller)),
                g: g.bind(tape, on(Part::Fusion)),
            },
            Head::Early {
                h_d,
                classifier,
                real_text,
            } => HeadVars::Early {
                h_d: h_d.bind(tape, on(Part::Distiller)),
                classifier: classifier.bind(tape, on(Part::Classifier)),
                real_text: *real_text,
            },
            Head::Direct { h_v, projection } => HeadVars::Direct {
                h_v: h_v.bind(tape, on(Part::VisionHead)),
                projection: projection.as_ref().map(|p| p.bind(tape, on(Part::Projection))),
            },
            Head::VisionOnly { h_v } => HeadVars::VisionOnly {
                h_v: h_v.bind(tape, on(Part::VisionHead)),
            },
        };
        let mut order = Vec::new();
        for p in self.parts() {
            if on(p) {
                order.push(p);
            }
        }
        Ok(Bound {
            d_v: self.dims.d_v,
            d_t: self.dims.d_t,
            f_v,
            f_t,
            head,
            train: order,
        })
    }

    fn check_rows(&self, x: &Matrix, d: usize) -> Result<()> {
        if x.cols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.cols(),
            });
        }
        Ok(())
    }

    fn run(&self, x_v: &Matrix, x_t: Option<&Matrix>) -> Result<JointOutput> {
        self.check_rows(x_v, self.dims.d_v)?;
        if let Some(x_t) = x_t {
            self.check_rows(x_t, self.dims.d_t)?;
            if x_t.rows() != x_v.rows() {
                return Err(Error::LengthMismatch {
                    left: x_v.rows(),
                    right: x_t.rows(),
                });
            }
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[])?;
        let xv = tape.constant(x_v.clone());
        let xt = x_t.map(|m| tape.constant(m.clone()));
        let out = bound.forward(&mut tape, xv, xt)?;
        Ok(JointOutput {
            logits: tape.value(out.logits).clone(),
            t: out.t.map(|v| tape.value(v).clone()),
            t_hat: out.t_hat.map(|v| tape.value(v).clone()),
        })
    }

    /// Fused logits plus the distillation pair for a batch of rows.
    pub fn forward_joint(&self, x_v: &Matrix, x_t: &Matrix) -> Result<JointOutput> {
        self.run(x_v, Some(x_t))
    }

    /// Logits from images alone; the text adapter is never evaluated.
    pub fn predict_logits(&self, x_v: &Matrix) -> Result<Matrix> {
        if matches!(self.head, Head::Early { real_text: true, .. }) {
            return Err(Error::ConfigInvalid(
                "early fusion on real text needs text at inference".into(),
            ));
        }
        Ok(self.run(x_v, None)?.logits)
    }

    /// Class per row (lowest index on ties) and the logits.
    pub fn predict_unimodal(&self, x_v: &Matrix) -> Result<(Vec<usize>, Matrix)> {
        let logits = self.predict_logits(x_v)?;
        let classes = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
        Ok((classes, logits))
    }

    /// Text-branch logits `h_t(f_t(x_t))` for late models.
    pub fn text_logits(&self, x_t: &Matrix) -> Result<Matrix> {
        let (Some(f_t), Head::Late { h_t, .. }) = (&self.f_t, &self.head) else {
            return Err(Error::ConfigInvalid("model has no text branch".into()));
        };
        self.check_rows(x_t, self.dims.d_t)?;
        h_t.forward(&f_t.forward(x_t)?)
    }
}

#[derive(Clone, Debug)]
enum HeadVars {
    Late {
        h_t: AffineVars,
        h_v: AffineVars,
        h_d: MlpVars,
        g: AffineVars,
    },
    Early {
        h_d: MlpVars,
        classifier: AffineVars,
        real_text: bool,
    },
    Direct {
        h_v: AffineVars,
        projection: Option<AffineVars>,
    },
    VisionOnly {
        h_v: AffineVars,
    },
}

/// Tape handles for one model's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    d_v: usize,
    d_t: usize,
    f_v: LoraVars,
    f_t: Option<LoraVars>,
    head: HeadVars,
    train: Vec<Part>,
}

/// Tape handles produced by [`Bound::forward`].
#[derive(Clone, Copy, Debug)]
pub struct TapeOutput {
    pub logits: Var,
    pub t: Option<Var>,
    pub t_hat: Option<Var>,
}

impl Bound {
    /// Parts bound as leaves, in model order.
    pub fn trained_parts(&self) -> &[Part] {
        &self.train
    }

    /// Leaf handles in the same order as [`ClipItModel::params_of`] over
    /// [`Bound::trained_parts`].
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for p in &self.train {
            match (p, &self.head) {
                (Part::VisionAdapter, _) => out.extend(self.f_v.trainable()),
                (Part::TextAdapter, _) => out.extend(self.f_t.iter().flat_map(LoraVars::trainable)),
                (Part::TextHead, HeadVars::Late { h_t, .. }) => out.extend(h_t.vars()),
                (
                    Part::VisionHead,
                    HeadVars::Late { h_v, .. } | HeadVars::Direct { h_v, .. } | HeadVars::VisionOnly { h_v },
                ) => out.extend(h_v.vars()),
                (Part::Distiller, HeadVars::Late { h_d, .. } | HeadVars::Early { h_d, .. }) => {
                    out.extend(h_d.vars())
                }
                (Part::Fusion, HeadVars::Late { g, .. }) => out.extend(g.vars()),
                (Part::Classifier, HeadVars::Early { classifier, .. }) => out.extend(classifier.vars()),
                (Part::Projection, HeadVars::Direct { projection: Some(p), .. }) => out.extend(p.vars()),
                _ => {}
            }
        }
        out
    }

    /// Text adapter applied to `x_t`.
    pub fn encode_text(&self, tape: &mut Tape, x_t: Var) -> Result<Var> {
        match &self.f_t {
            Some(f) => f.apply(tape, x_t),
            None => Err(Error::ConfigInvalid("model has no text adapter".into())),
        }
    }

    /// Text-branch logits `h_t(f_t(x_t))`.
    pub fn text_logits(&self, tape: &mut Tape, x_t: Var) -> Result<Var> {
        let t = self.encode_text(tape, x_t)?;
        match &self.head {
            HeadVars::Late { h_t, .. } => h_t.apply(tape, t),
            _ => Err(Error::ConfigInvalid("model has no text head".into())),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x_v: Var, x_t: Option<Var>) -> Result<TapeOutput> {
        if tape.value(x_v).cols() != self.d_v {
            return Err(Error::DimensionMismatch {
                expected: self.d_v,
                got: tape.value(x_v).cols(),
            });
        }
        if let Some(x) = x_t {
            if tape.value(x).cols() != self.d_t {
                return Err(Error::DimensionMismatch {
                    expected: self.d_t,
                    got: tape.value(x).cols(),
                });
            }
        }
        let v = self.f_v.apply(tape, x_v)?;
        let t = match (x_t, &self.f_t) {
            (Some(x), Some(f)) => Some(f.apply(tape, x)?),
            _ => None,
        };
        match &self.head {
            HeadVars::Late { h_t, h_v, h_d, g } => {
                let t_hat = h_d.apply(tape, v)?;
                let lt = h_t.apply(tape, t_hat)?;
                let lv = h_v.apply(tape, v)?;
                let both = tape.concat(lt, lv)?;
                let logits = g.apply(tape, both)?;
                Ok(TapeOutput {
                    logits,
                    t,
                    t_hat: Some(t_hat),
                })
            }
            HeadVars::Early {
                h_d,
                classifier,
                real_text,
            } => {
                let t_hat = h_d.apply(tape, v)?;
                let side = if *real_text {
                    t.ok_or_else(|| Error::ConfigInvalid("early fusion on real text needs text".into()))?
                } else {
                    t_hat
                };
                let both = tape.concat(v, side)?;
                let logits = classifier.apply(tape, both)?;
                Ok(TapeOutput {
                    logits,
                    t,
                    t_hat: Some(t_hat),
                })
            }
            HeadVars::Direct { h_v, projection } => {
                let logits = h_v.apply(tape, v)?;
                let projected = match (t, projection) {
                    (Some(t), Some(p)) => Some(p.apply(tape, t)?),
                    _ => None,
                };
                Ok(TapeOutput {
                    logits,
                    t: projected,
                    t_hat: projected.map(|_| v),
                })
            }
            HeadVars::VisionOnly { h_v } => Ok(TapeOutput {
                logits: h_v.apply(tape, v)?,
                t: None,
                t_hat: None,
            }),
        }
    }
}
