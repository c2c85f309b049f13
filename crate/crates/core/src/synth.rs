//! Deterministic synthetic benchmark with a controllable amount of
//! text complementarity.
//!
//! Each class has `2^(b−1)` subtypes. Task embeddings are
//! `μ_y + γ·Σ s_k e_k + σ·ε` over `b` cue directions: the first `b − 1`
//! signs are the subtype's bits and the last is their product, negated
//! for odd classes. The class is then a parity of the cue signs, which no
//! linear map separates. A fraction `c` of the
//! samples is vision-ambiguous: `μ_y` is replaced by the midpoint of `μ_y`
//! and the decoy `μ_{(y+1) mod C}`, so only the nonlinear cue still tells
//! the class apart. Retrieval embeddings sit near a prototype per (class,
//! subtype), and reports of that subtype sit near the same prototype and
//! use its slice of the class vocabulary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, PseudoPairedDataset, Report, TextCorpus};
use crate::error::{Error, Result};
use crate::numeric::matrix::dot;
use crate::numeric::Matrix;
use crate::rng::Rng;

const FILLER: [&str; 16] = [
    "tissue", "sample", "section", "observed", "noted", "area", "region", "cells", "pattern", "present", "focal",
    "mild", "shows", "with", "within", "seen",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples: usize,
    pub test_samples: usize,
    pub reports: usize,
    pub retrieval_dim: usize,
    pub vision_dim: usize,
    pub text_dim: usize,
    /// Fraction of vision-ambiguous samples.
    pub ambiguous_fraction: f64,
    pub noise: f64,
    /// Keywords per class, split evenly between its subtypes.
    pub vocab_per_class: usize,
    /// Strength of the subtype cue in task space.
    pub cue: f64,
    /// Cue directions; each class has `2^(cue_bits − 1)` subtypes.
    pub cue_bits: usize,
    /// Noise on report retrieval embeddings.
    pub report_jitter: f64,
    /// Each keyword appears between `repeats.0` and `repeats.1` times.
    pub repeats: (usize, usize),
    /// Filler words appended to each report.
    pub filler_words: usize,
    /// When false, report keywords come from a random class and carry no
    /// class information.
    pub informative_text: bool,
    pub organ: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            samples: 4000,
            test_samples: 1000,
            reports: 40,
            retrieval_dim: 32,
            vision_dim: 64,
            text_dim: 64,
            ambiguous_fraction: 0.3,
            noise: 0.1,
            vocab_per_class: 24,
            cue: 0.27,
            cue_bits: 3,
            report_jitter: 0.05,
            filler_words: 1,
            repeats: (3, 4),
            informative_text: true,
            organ: "breast".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.classes < 2 {
            return bad(format!("{} classes; need at least 2", self.classes));
        }
        for (name, v) in [
            ("samples", self.samples),
            ("test samples", self.test_samples),
            ("reports", self.reports),
            ("retrieval dim", self.retrieval_dim),
            ("vision dim", self.vision_dim),
            ("text dim", self.text_dim),
            ("vocabulary size", self.vocab_per_class),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.reports < self.classes {
            return bad(format!("{} reports for {} classes", self.reports, self.classes));
        }
        if self.text_dim < 2 {
            return bad("text dim must be at least 2".into());
        }
        if !(2..=8).contains(&self.cue_bits) {
            return bad(format!("cue bits {} outside 2..=8", self.cue_bits));
        }
        if self.vocab_per_class < self.subtypes() {
            return bad(format!("vocabulary per class must be at least {}", self.subtypes()));
        }
        if self.vision_dim < self.classes + self.cue_bits {
            return bad(format!("vision dim must be at least {}", self.classes + self.cue_bits));
        }
        if self.retrieval_dim < self.classes * self.subtypes() {
            return bad(format!("retrieval dim must be at least {}", self.classes * self.subtypes()));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return bad(format!("ambiguous fraction {} outside [0, 1]", self.ambiguous_fraction));
        }
        for (name, v) in [("noise", self.noise), ("cue", self.cue), ("report jitter", self.report_jitter)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be non-negative"));
            }
        }
        if self.repeats.0 == 0 || self.repeats.0 > self.repeats.1 {
            return bad(format!("keyword repeats {:?} must be a non-empty positive range", self.repeats));
        }
        if self.organ.trim().is_empty() {
            return bad("organ term is empty".into());
        }
        Ok(())
    }

    pub fn subtypes(&self) -> usize {
        1 << (self.cue_bits - 1)
    }

    /// Cue signs of a (class, subtype): the subtype's bits, then their
    /// parity flipped for odd classes.
    pub fn cue_signs(&self, class: usize, subtype: usize) -> Vec<f64> {
        let mut signs: Vec<f64> = (0..self.cue_bits - 1)
            .map(|b| if subtype >> b & 1 == 0 { 1.0 } else { -1.0 })
            .collect();
        let parity: f64 = signs.iter().product();
        signs.push(if class.is_multiple_of(2) { parity } else { -parity });
        signs
    }

    /// Expected cosine between an image and its matching report in
    /// retrieval space.
    pub fn target_similarity(&self) -> f64 {
        let d = self.retrieval_dim as f64;
        1.0 / ((1.0 + self.noise * self.noise * d) * (1.0 + self.report_jitter * self.report_jitter * d)).sqrt()
    }
}

/// Ground truth for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitTruth {
    pub classes: Vec<usize>,
    pub subtypes: Vec<usize>,
    pub ambiguous: Vec<bool>,
}

impl SplitTruth {
    pub fn ambiguous_count(&self) -> usize {
        self.ambiguous.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTruth {
    pub id: String,
    pub class: usize,
    pub subtype: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub target_similarity: f64,
    pub train: SplitTruth,
    pub test: SplitTruth,
    pub reports: Vec<ReportTruth>,
}

impl SynthManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplit {
    /// Retrieval-space image embeddings, labelled.
    pub retrieval: EmbeddingStore,
    /// Task-space image embeddings, labelled.
    pub task: EmbeddingStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: SynthSplit,
    pub test: SynthSplit,
    /// Retrieval-space report embeddings, keyed by report id.
    pub report_retrieval: EmbeddingStore,
    pub corpus: TextCorpus,
    pub manifest: SynthManifest,
}

pub const FILE_NAMES: [&str; 7] = [
    "train_retrieval.cipe",
    "train_task.cipe",
    "test_retrieval.cipe",
    "test_task.cipe",
    "report_retrieval.cipe",
    "corpus.jsonl",
    "manifest.json",
];

impl SynthDataset {
    /// Writes every artifact into `dir` under [`FILE_NAMES`].
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        let paths: Vec<_> = FILE_NAMES.iter().map(|n| dir.join(n)).collect();
        self.train.retrieval.save(&paths[0])?;
        self.train.task.save(&paths[1])?;
        self.test.retrieval.save(&paths[2])?;
        self.test.task.save(&paths[3])?;
        self.report_retrieval.save(&paths[4])?;
        self.corpus.save(&paths[5])?;
        self.manifest.save(&paths[6])?;
        Ok(paths)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = |i: usize| dir.join(FILE_NAMES[i]);
        Ok(Self {
            train: SynthSplit {
                retrieval: EmbeddingStore::load(p(0))?,
                task: EmbeddingStore::load(p(1))?,
            },
            test: SynthSplit {
                retrieval: EmbeddingStore::load(p(2))?,
                task: EmbeddingStore::load(p(3))?,
            },
            report_retrieval: EmbeddingStore::load(p(4))?,
            corpus: TextCorpus::load(p(5))?,
            manifest: SynthManifest::load(p(6))?,
        })
    }
}

/// `count` orthonormal vectors in `dim` dimensions from Gram-Schmidt on
/// Gaussian draws.
fn orthonormal(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for u in &out {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn noisy(center: &[f64], scale: f64, rng: &mut Rng) -> Vec<f64> {
    center.iter().map(|&c| c + scale * rng.normal()).collect()
}

struct Geometry {
    class_protos: Vec<Vec<f64>>,
    cue: Vec<Vec<f64>>,
    retrieval_protos: Vec<Vec<f64>>,
}

fn make_split(cfg: &SynthConfig, geo: &Geometry, n: usize, rng: &mut Rng) -> Result<(SynthSplit, SplitTruth)> {
    let c = cfg.classes;
    let classes: Vec<usize> = (0..n).map(|i| i % c).collect();
    let s_count = cfg.subtypes();
    let subtypes: Vec<usize> = (0..n).map(|i| (i / c) % s_count).collect();
    let mut ambiguous = vec![false; n];
    let n_amb = (cfg.ambiguous_fraction * n as f64).floor() as usize;
    for &i in &rng.permutation(n)[..n_amb] {
        ambiguous[i] = true;
    }
    let mut task = Vec::with_capacity(n * cfg.vision_dim);
    let mut retrieval = Vec::with_capacity(n * cfg.retrieval_dim);
    for i in 0..n {
        let (y, s) = (classes[i], subtypes[i]);
        let signs = cfg.cue_signs(y, s);
        let mu = &geo.class_protos[y];
        let decoy = &geo.class_protos[(y + 1) % c];
        let center: Vec<f64> = (0..cfg.vision_dim)
            .map(|k| {
                let base = if ambiguous[i] { 0.5 * (mu[k] + decoy[k]) } else { mu[k] };
                base + cfg.cue * signs.iter().zip(&geo.cue).map(|(s, e)| s * e[k]).sum::<f64>()
            })
            .collect();
        task.extend(noisy(&center, cfg.noise, rng));
        retrieval.extend(noisy(&geo.retrieval_protos[y * s_count + s], cfg.noise, rng));
    }
    let labels: Vec<u32> = classes.iter().map(|&y| y as u32).collect();
    let split = SynthSplit {
        retrieval: EmbeddingStore::new(Matrix::new(n, cfg.retrieval_dim, retrieval)?, Some(labels.clone()), None)?,
        task: EmbeddingStore::new(Matrix::new(n, cfg.vision_dim, task)?, Some(labels), None)?,
    };
    Ok((
        split,
        SplitTruth {
            classes,
            subtypes,
            ambiguous,
        },
    ))
}

fn report_text(cfg: &SynthConfig, word_class: usize, subtype: usize, rng: &mut Rng) -> String {
    let per = cfg.vocab_per_class / cfg.subtypes();
    let mut words = Vec::new();
    for j in subtype * per..(subtype + 1) * per {
        let copies = cfg.repeats.0 + rng.below(cfg.repeats.1 - cfg.repeats.0 + 1);
        words.extend(std::iter::repeat_n(format!("c{word_class}kw{j}"), copies));
    }
    for _ in 0..cfg.filler_words {
        words.push(FILLER[rng.below(FILLER.len())].to_string());
    }
    rng.shuffle(&mut words);
    words.join(" ")
}

/// Builds the benchmark. Draw order: task-space prototypes and cue
/// directions, retrieval prototypes, training split, test split, reports.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut task_basis = orthonormal(cfg.classes + cfg.cue_bits, cfg.vision_dim, &mut rng);
    let cue = task_basis.split_off(cfg.classes);
    let s_count = cfg.subtypes();
    let geo = Geometry {
        class_protos: task_basis,
        cue,
        retrieval_protos: orthonormal(cfg.classes * s_count, cfg.retrieval_dim, &mut rng),
    };
    let (train, train_truth) = make_split(cfg, &geo, cfg.samples, &mut rng)?;
    let (test, test_truth) = make_split(cfg, &geo, cfg.test_samples, &mut rng)?;

    let mut reports = Vec::with_capacity(cfg.reports);
    let mut truth = Vec::with_capacity(cfg.reports);
    let mut emb = Vec::with_capacity(cfg.reports * cfg.retrieval_dim);
    for j in 0..cfg.reports {
        let (y, s) = (j % cfg.classes, (j / cfg.classes) % s_count);
        let id = format!("r{j:05}");
        let word_class = if cfg.informative_text { y } else { rng.below(cfg.classes) };
        reports.push(Report {
            id: id.clone(),
            text: report_text(cfg, word_class, s, &mut rng),
            tags: vec![cfg.organ.clone()],
        });
        emb.extend(noisy(&geo.retrieval_protos[y * s_count + s], cfg.report_jitter, &mut rng));
        truth.push(ReportTruth { id, class: y, subtype: s });
    }
    let ids = truth.iter().map(|r| r.id.clone()).collect();
    let labels = truth.iter().map(|r| r.class as u32).collect();
    Ok(SynthDataset {
        train,
        test,
        report_retrieval: EmbeddingStore::new(Matrix::new(cfg.reports, cfg.retrieval_dim, emb)?, Some(labels), Some(ids))?,
        corpus: TextCorpus::new(reports)?,
        manifest: SynthManifest {
            config: cfg.clone(),
            target_similarity: cfg.target_similarity(),
            train: train_truth,
            test: test_truth,
            reports: truth,
        },
    })
}

/// Fraction of images whose matched report has the image's true class.
pub fn oracle_eval(truth: &SplitTruth, reports: &[ReportTruth], pairs: &PseudoPairedDataset) -> Result<f64> {
    if pairs.len() != truth.classes.len() {
        return Err(Error::InstanceMismatch(format!(
            "{} pairs for {} images",
            pairs.len(),
            truth.classes.len()
        )));
    }
    let mut hits = 0;
    for rec in pairs.records() {
        let report = reports
            .iter()
            .find(|r| r.id == rec.text_id)
            .ok_or_else(|| Error::InstanceMismatch(format!("report '{}' not in manifest", rec.text_id)))?;
        hits += usize::from(report.class == truth.classes[rec.image_index]);
    }
    Ok(hits as f64 / pairs.len() as f64)
}
