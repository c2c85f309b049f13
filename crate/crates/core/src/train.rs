//! Text fine-tuning, multimodal distillation training and the ablation
//! variants.
//!
//! Seeds derive from `TrainConfig::seed`: model initialization uses the
//! seed itself, stage-1 shuffling `seed + 1000 + epoch`, stage-2
//! shuffling `seed + 2000 + epoch`, and the temporary text head of
//! variants without one `seed + 3000`.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, PseudoPairedDataset};
use crate::error::{Error, Result};
use crate::model::{joint_loss, Affine, ClipItModel, LoraLinear, ModelDims, ModelKind, Part};
use crate::numeric::{argmax, AdamConfig, AdamState, Matrix, Tape};
use crate::rng::Rng;

pub const STAGE1_SEED_OFFSET: u64 = 1000;
pub const STAGE2_SEED_OFFSET: u64 = 2000;
pub const TEXT_HEAD_SEED_OFFSET: u64 = 3000;

/// Datasets at or above this size train for one epoch by default.
pub const LARGE_DATASET: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Standard,
    NoLora,
    EarlyFusion,
    DirectDistill,
    ArchOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Standard,
        Variant::NoLora,
        Variant::EarlyFusion,
        Variant::DirectDistill,
        Variant::ArchOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::NoLora => "no_lora",
            Variant::EarlyFusion => "early_fusion",
            Variant::DirectDistill => "direct_distill",
            Variant::ArchOnly => "arch_only",
        }
    }

    pub fn model_kind(self) -> ModelKind {
        match self {
            Variant::Standard | Variant::NoLora | Variant::ArchOnly => ModelKind::Late,
            Variant::EarlyFusion => ModelKind::Early,
            Variant::DirectDistill => ModelKind::Direct,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs per stage; `None` picks 25, or 1 for large datasets.
    pub epochs: Option<usize>,
    pub lambda: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Keep the text adapter and text head fixed during stage 2.
    pub freeze_text: bool,
    /// Early fusion on real text features instead of distilled ones.
    pub early_real_text: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: None,
            lambda: 1.0,
            lora_rank: 8,
            lora_alpha: 8.0,
            seed: 0,
            variant: Variant::Standard,
            freeze_text: false,
            early_real_text: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == Some(0) {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.lora_rank == 0 || !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return bad("LoRA rank and alpha must be positive".into());
        }
        Ok(())
    }

    pub fn epochs_for(&self, n: usize) -> usize {
        self.epochs.unwrap_or(if n < LARGE_DATASET { 25 } else { 1 })
    }

    /// λ actually used: the architecture-only ablation forces 0.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant == Variant::ArchOnly {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn dims(&self, d_v: usize, d_t: usize, classes: usize) -> ModelDims {
        ModelDims::new(d_v, d_t, classes).with_lora(self.lora_rank, self.lora_alpha)
    }
}

/// Task-space images aligned with their paired text embeddings.
///
/// Rows whose paired text is empty (for example after word dropout) are
/// excluded from the text stage and from the distillation term.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    images: Matrix,
    texts: Matrix,
    text_mask: Vec<bool>,
    labels: Vec<usize>,
    classes: usize,
}

impl TrainingSet {
    pub fn new(images: Matrix, texts: Matrix, text_mask: Vec<bool>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = images.rows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        for len in [texts.rows(), text_mask.len(), labels.len()] {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        if classes < 2 {
            return Err(Error::ConfigInvalid(format!("{classes} classes; need at least 2")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::IndexOutOfRange { index: y, len: classes });
        }
        Ok(Self {
            images,
            texts,
            text_mask,
            labels,
            classes,
        })
    }

    /// Images only; every text row is zero and masked out.
    pub fn vision_only(images: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = images.rows();
        Self::new(images, Matrix::zeros(n, 1), vec![false; n], labels, classes)
    }

    /// Looks up each image's paired report in an encoded text store.
    ///
    /// All-zero text rows (reports emptied by word dropout) are masked.
    pub fn from_text_store(images: &EmbeddingStore, pairs: &PseudoPairedDataset, texts: &EmbeddingStore) -> Result<Self> {
        if pairs.len() != images.len() {
            return Err(Error::LengthMismatch {
                left: images.len(),
                right: pairs.len(),
            });
        }
        let ids = texts
            .ids()
            .ok_or_else(|| Error::ConfigInvalid("text store has no ids".into()))?;
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(j, id)| (id.as_str(), j)).collect();
        let labels = images.class_labels()?;
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        let mut rows = Vec::with_capacity(pairs.len());
        for rec in pairs.records() {
            let j = *index
                .get(rec.text_id.as_str())
                .ok_or_else(|| Error::UnknownTextId(rec.text_id.clone()))?;
            rows.push(j);
        }
        let mask = rows.iter().map(|&j| texts.row(j).iter().any(|&x| x != 0.0)).collect();
        Self::new(images.vectors().clone(), texts.vectors().select_rows(&rows), mask, labels, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn texts(&self) -> &Matrix {
        &self.texts
    }

    pub fn text_mask(&self) -> &[bool] {
        &self.text_mask
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn d_v(&self) -> usize {
        self.images.cols()
    }

    pub fn d_t(&self) -> usize {
        self.texts.cols()
    }

    fn text_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.text_mask[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    /// Not written to disk, so reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,ce_loss,kd_loss,train_acc\n");
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?},{:?}", e.epoch, e.ce_loss, e.kd_loss, e.train_acc).unwrap();
        }
        out
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_acc)
    }
}

/// Everything one training run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ClipItModel,
    pub logs: Vec<TrainLog>,
}

impl TrainOutcome {
    pub fn summary_json(&self, cfg: &TrainConfig) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a TrainConfig,
            effective_lambda: f64,
            model_kind: String,
            stages: &'a [TrainLog],
        }
        let s = Summary {
            config: cfg,
            effective_lambda: cfg.effective_lambda(),
            model_kind: self.model.kind().to_string(),
            stages: &self.logs,
        };
        serde_json::to_string_pretty(&s).expect("summary serializes") + "\n"
    }

    pub fn save_logs(&self, dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<()> {
        let dir = dir.as_ref();
        for log in &self.logs {
            let path = dir.join(format!("train_log_{}.csv", log.stage));
            fs::write(&path, log.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("train_summary.json");
        fs::write(&path, self.summary_json(cfg)).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Default)]
struct EpochTally {
    ce: f64,
    kd: f64,
    kd_rows: usize,
    correct: usize,
    rows: usize,
}

impl EpochTally {
    fn record(&mut self, epoch: usize) -> Result<EpochRecord> {
        let r = EpochRecord {
            epoch,
            ce_loss: self.ce / self.rows as f64,
            kd_loss: if self.kd_rows == 0 {
                0.0
            } else {
                self.kd / self.kd_rows as f64
            },
            train_acc: self.correct as f64 / self.rows as f64,
        };
        if !(r.ce_loss.is_finite() && r.kd_loss.is_finite()) {
            return Err(Error::NonFiniteLoss);
        }
        Ok(r)
    }
}

fn count_correct(logits: &Matrix, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count()
}

/// Minibatch loop shared by both stages: one seeded permutation of `rows`
/// per epoch, batches taken in order.
fn run_epochs(
    rows: &[usize],
    epochs: usize,
    batch: usize,
    seed_base: u64,
    mut step: impl FnMut(&[usize], &mut EpochTally) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let perm = Rng::new(seed_base.wrapping_add(epoch as u64)).permutation(rows.len());
        let order: Vec<usize> = perm.iter().map(|&p| rows[p]).collect();
        let mut tally = EpochTally::default();
        for chunk in order.chunks(batch) {
            step(chunk, &mut tally)?;
        }
        out.push(tally.record(epoch)?);
    }
    Ok(out)
}

/// Stage 1: trains `h_t` (and `f_t` when `train_adapter`) on paired texts
/// with cross-entropy.
pub fn finetune_text_stage(
    f_t: &mut LoraLinear,
    h_t: &mut Affine,
    set: &TrainingSet,
    cfg: &TrainConfig,
    train_adapter: bool,
) -> Result<TrainLog> {
    cfg.validate()?;
    if set.d_t() != f_t.d_in() {
        return Err(Error::DimensionMismatch {
            expected: f_t.d_in(),
            got: set.d_t(),
        });
    }
    let start = Instant::now();
    let rows = set.text_rows();
    let params: Vec<&Matrix> = if train_adapter {
        f_t.trainable().into_iter().chain(h_t.params()).collect()
    } else {
        h_t.params()
    };
    let mut adam = AdamState::new(cfg.adam(), &params);
    let epochs = run_epochs(
        &rows,
        cfg.epochs_for(set.len()),
        cfg.batch_size,
        cfg.seed.wrapping_add(STAGE1_SEED_OFFSET),
        |batch, tally| {
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            let mut tape = Tape::new();
            let fv = f_t.bind(&mut tape, train_adapter);
            let hv = h_t.bind(&mut tape, true);
            let x = tape.constant(set.texts.select_rows(batch));
            let t = fv.apply(&mut tape, x)?;
            let logits = hv.apply(&mut tape, t)?;
            let loss = tape.softmax_ce(logits, &labels)?;
            let mut grads = tape.backward(loss)?;
            let mut vars = if train_adapter { fv.trainable() } else { Vec::new() };
            vars.extend(hv.vars());
            let g: Vec<Matrix> = vars.into_iter().map(|v| grads.take(v)).collect();
            tally.ce += tape.value(loss).get(0, 0) * batch.len() as f64;
            tally.correct += count_correct(tape.value(logits), &labels);
            tally.rows += batch.len();
            let mut params: Vec<&mut Matrix> = if train_adapter {
                f_t.trainable_mut().into_iter().chain(h_t.params_mut()).collect()
            } else {
                h_t.params_mut()
            };
            adam.step(&mut params, &g)
        },
    )?;
    Ok(TrainLog {
        stage: "text".into(),
        epochs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Stage 2: minimizes `CE + λ·KD` over the parts in `train`.
///
/// With `lambda = 0` the distillation loss is still reported.
pub fn train_multimodal(
    model: &mut ClipItModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    train: &[Part],
    lambda: f64,
) -> Result<TrainLog> {
    cfg.validate()?;
    let start = Instant::now();
    let parts: Vec<Part> = model.parts().into_iter().filter(|p| train.contains(p)).collect();
    let has_text = model.text_adapter().is_some();
    if has_text && set.d_t() != model.dims().d_t {
        return Err(Error::DimensionMismatch {
            expected: model.dims().d_t,
            got: set.d_t(),
        });
    }
    let mut adam = AdamState::new(cfg.adam(), &model.params_of(&parts));
    let all: Vec<usize> = (0..set.len()).collect();
    let epochs = run_epochs(
        &all,
        cfg.epochs_for(set.len()),
        cfg.batch_size,
        cfg.seed.wrapping_add(STAGE2_SEED_OFFSET),
        |batch, tally| {
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            let mask: Vec<bool> = batch.iter().map(|&i| set.text_mask[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &parts)?;
            let xv = tape.constant(set.images.select_rows(batch));
            let xt = has_text.then(|| tape.constant(set.texts.select_rows(batch)));
            let out = bound.forward(&mut tape, xv, xt)?;
            let (loss, ce, kd) = joint_loss(&mut tape, &out, &labels, lambda, Some(&mask))?;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Matrix> = bound.trainable_vars().into_iter().map(|v| grads.take(v)).collect();
            tally.ce += tape.value(ce).get(0, 0) * batch.len() as f64;
            if let Some(kd) = kd {
                let active = mask.iter().filter(|&&m| m).count();
                tally.kd += tape.value(kd).get(0, 0) * active as f64;
                tally.kd_rows += active;
            }
            tally.correct += count_correct(tape.value(out.logits), &labels);
            tally.rows += batch.len();
            adam.step(&mut model.params_of_mut(&parts), &g)
        },
    )?;
    Ok(TrainLog {
        stage: "multimodal".into(),
        epochs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Parts updated in stage 2 for each variant.
pub fn stage2_parts(cfg: &TrainConfig) -> Vec<Part> {
    let text = !cfg.freeze_text;
    let mut p = match cfg.variant {
        Variant::Standard => vec![Part::VisionAdapter, Part::VisionHead, Part::Distiller, Part::Fusion],
        Variant::NoLora => vec![Part::VisionHead, Part::Distiller, Part::Fusion],
        Variant::ArchOnly => {
            return vec![Part::VisionAdapter, Part::TextHead, Part::VisionHead, Part::Distiller, Part::Fusion]
        }
        Variant::EarlyFusion => vec![Part::VisionAdapter, Part::Distiller, Part::Classifier],
        Variant::DirectDistill => vec![Part::VisionAdapter, Part::VisionHead, Part::Projection],
    };
    if text {
        if cfg.variant != Variant::NoLora {
            p.push(Part::TextAdapter);
        }
        if matches!(cfg.variant, Variant::Standard | Variant::NoLora) {
            p.push(Part::TextHead);
        }
    }
    p
}

/// Initializes and trains the model for `cfg.variant`: text stage (skipped
/// for the architecture-only ablation), then the multimodal stage.
pub fn train_variant(set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = cfg.dims(set.d_v(), set.d_t(), set.classes());
    let kind = cfg.variant.model_kind();
    let mut model = ClipItModel::init(kind, dims, cfg.effective_lambda(), &mut Rng::new(cfg.seed))?;
    if let (Variant::EarlyFusion, true) = (cfg.variant, cfg.early_real_text) {
        model = ClipItModel::from_parts(
            dims,
            model.lambda(),
            model.vision_adapter().clone(),
            model.text_adapter().cloned(),
            match model.head().clone() {
                crate::model::Head::Early { h_d, classifier, .. } => crate::model::Head::Early {
                    h_d,
                    classifier,
                    real_text: true,
                },
                other => other,
            },
        )?;
    }
    let mut logs = Vec::new();
    if cfg.variant != Variant::ArchOnly {
        let mut f_t = model
            .text_adapter()
            .cloned()
            .ok_or_else(|| Error::ConfigInvalid("variant needs a text adapter".into()))?;
        let mut h_t = match model.head() {
            crate::model::Head::Late { h_t, .. } => h_t.clone(),
            _ => Affine::init(
                dims.d_t,
                dims.classes,
                &mut Rng::new(cfg.seed.wrapping_add(TEXT_HEAD_SEED_OFFSET)),
            ),
        };
        let train_adapter = cfg.variant != Variant::NoLora;
        logs.push(finetune_text_stage(&mut f_t, &mut h_t, set, cfg, train_adapter)?);
        let h_t = (kind == ModelKind::Late).then_some(h_t);
        model.set_text_branch(f_t, h_t)?;
    }
    let parts = stage2_parts(cfg);
    logs.push(train_multimodal(&mut model, set, cfg, &parts, cfg.effective_lambda())?);
    Ok(TrainOutcome { model, logs })
}

/// Baseline: vision adapter and vision head trained with cross-entropy.
pub fn train_vision_only(set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = cfg.dims(set.d_v(), set.d_t().max(1), set.classes());
    let mut model = ClipItModel::init(ModelKind::VisionOnly, dims, 0.0, &mut Rng::new(cfg.seed))?;
    let log = train_multimodal(&mut model, set, cfg, &[Part::VisionAdapter, Part::VisionHead], 0.0)?;
    Ok(TrainOutcome { model, logs: vec![log] })
}

/// Predicted classes of `model` on `images` from images alone.
pub fn predict(model: &ClipItModel, images: &Matrix) -> Result<Vec<usize>> {
    Ok(model.predict_unimodal(images)?.0)
}
