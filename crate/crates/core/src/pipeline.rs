//! End-to-end run: filter and pair, encode text, train both stages,
//! extract the image-only model, evaluate.
//!
//! Seeds derive from `train.seed`: random pairing uses `seed + 5000`,
//! word dropout `seed + 4000`; training offsets are in [`crate::train`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, PseudoPairedDataset, TextCorpus};
use crate::error::{Error, Result};
use crate::eval::{accuracy, omega, save_predictions, Metrics, Omega, Prediction, PredictionSet};
use crate::model::{checkpoint, count_cost, ClipItModel, CostReport};
use crate::numeric::{argmax, cosine_similarity};
use crate::pairing::{pair, similarity_histogram, PairingMode, PairingRequest, SimilarityHistogram};
use crate::text::{encode_corpus, HashedEncoderConfig};
use crate::train::{train_variant, train_vision_only, TrainConfig, TrainLog, TrainingSet};

pub const RANDOM_PAIRING_SEED_OFFSET: u64 = 5000;
pub const DROPOUT_SEED_OFFSET: u64 = 4000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    /// Use the k-th most similar report.
    pub rank: usize,
    /// Pair uniformly at random instead.
    pub random: bool,
    /// Report filter; empty keeps every report.
    pub keywords: Vec<String>,
    pub bins: usize,
    pub workers: usize,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            random: false,
            keywords: Vec::new(),
            bins: 20,
            workers: 1,
        }
    }
}

impl PairingConfig {
    pub fn mode(&self, seed: u64) -> PairingMode {
        if self.random {
            PairingMode::Random {
                seed: seed.wrapping_add(RANDOM_PAIRING_SEED_OFFSET),
            }
        } else {
            PairingMode::Rank(self.rank)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub dim: usize,
    pub hash_seed: u64,
    /// Word-dropout probability applied to training reports.
    pub dropout: f64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hash_seed: 0,
            dropout: 0.0,
        }
    }
}

impl TextConfig {
    pub fn encoder(&self) -> Result<HashedEncoderConfig> {
        HashedEncoderConfig::new(self.dim, self.hash_seed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pairing: PairingConfig,
    pub text: TextConfig,
    pub train: TrainConfig,
    /// Also train the image-only baseline and report Ω against it.
    pub baseline: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.text.encoder()?;
        if !(0.0..=1.0).contains(&self.text.dropout) {
            return Err(Error::ConfigInvalid(format!("word dropout {} outside [0, 1]", self.text.dropout)));
        }
        if self.pairing.bins == 0 {
            return Err(Error::ConfigInvalid("histogram needs at least one bin".into()));
        }
        if !self.pairing.random && self.pairing.rank == 0 {
            return Err(Error::ConfigInvalid("rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Inputs of one run. Test retrieval embeddings are optional; without
/// them Ω and distillation fidelity are not computed.
#[derive(Clone, Copy, Debug)]
pub struct PipelineInputs<'a> {
    pub train_retrieval: &'a EmbeddingStore,
    pub train_task: &'a EmbeddingStore,
    pub test_retrieval: Option<&'a EmbeddingStore>,
    pub test_task: &'a EmbeddingStore,
    pub report_retrieval: &'a EmbeddingStore,
    pub corpus: &'a TextCorpus,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub pairs: PseudoPairedDataset,
    pub histogram: SimilarityHistogram,
    /// Corpus encoding used for training, after word dropout.
    pub text_store: EmbeddingStore,
    /// Trained model including the text branch.
    pub full_model: ClipItModel,
    /// Image-only model written as the checkpoint.
    pub model: ClipItModel,
    pub logs: Vec<TrainLog>,
    pub predictions: Vec<Prediction>,
    pub accuracy: f64,
    pub cost: CostReport,
    pub baseline_predictions: Option<Vec<Prediction>>,
    pub baseline_accuracy: Option<f64>,
    /// Mean cos(t̂, t) over held-out samples with paired text.
    pub fidelity: Option<f64>,
    pub omega: Option<Omega>,
    pub metrics: Metrics,
}

fn predictions(model: &ClipItModel, images: &EmbeddingStore) -> Result<Vec<Prediction>> {
    let (classes, logits) = model.predict_unimodal(images.vectors())?;
    Ok(classes
        .into_iter()
        .enumerate()
        .map(|(i, c)| Prediction {
            index: i,
            class: c,
            max_logit: logits.get(i, c),
        })
        .collect())
}

fn classes_of(preds: &[Prediction]) -> Vec<usize> {
    preds.iter().map(|p| p.class).collect()
}

pub fn run_pipeline(inputs: &PipelineInputs<'_>, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    let encoder = cfg.text.encoder()?;
    let mode = cfg.pairing.mode(seed);
    let request = |images| {
        let mut req = PairingRequest::new(images, inputs.report_retrieval).with_workers(cfg.pairing.workers);
        if !cfg.pairing.keywords.is_empty() {
            req = req.with_filter(inputs.corpus, cfg.pairing.keywords.clone());
        }
        req
    };
    let pairs = pair(&request(inputs.train_retrieval), mode)?;
    let histogram = similarity_histogram(&pairs, cfg.pairing.bins)?;

    let text_store = encode_corpus(
        inputs.corpus,
        &encoder,
        cfg.text.dropout,
        seed.wrapping_add(DROPOUT_SEED_OFFSET),
    )?;
    let set = TrainingSet::from_text_store(inputs.train_task, &pairs, &text_store)?;
    let trained = train_variant(&set, &cfg.train)?;
    let full_model = trained.model;
    let model = full_model.clone().into_unimodal();

    let labels = inputs.test_task.class_labels()?;
    let preds = predictions(&model, inputs.test_task)?;
    let acc = accuracy(&classes_of(&preds), &labels)?;
    let cost = count_cost(&model);

    let (baseline_predictions, baseline_accuracy) = if cfg.baseline {
        let vset = TrainingSet::vision_only(set.images().clone(), set.labels().to_vec(), set.classes())?;
        let base = train_vision_only(&vset, &cfg.train)?.model;
        let p = predictions(&base, inputs.test_task)?;
        let a = accuracy(&classes_of(&p), &labels)?;
        (Some(p), Some(a))
    } else {
        (None, None)
    };

    let mut fidelity = None;
    let mut omega_result = None;
    if let Some(test_retrieval) = inputs.test_retrieval {
        let test_pairs = pair(&request(test_retrieval), PairingMode::Rank(1))?;
        let clean = if cfg.text.dropout > 0.0 {
            encode_corpus(inputs.corpus, &encoder, 0.0, 0)?
        } else {
            text_store.clone()
        };
        let test_set = TrainingSet::from_text_store(inputs.test_task, &test_pairs, &clean)?;
        if full_model.text_adapter().is_some() {
            let out = full_model.forward_joint(test_set.images(), test_set.texts())?;
            if let (Some(t), Some(t_hat)) = (&out.t, &out.t_hat) {
                let rows: Vec<usize> = (0..test_set.len()).filter(|&i| test_set.text_mask()[i]).collect();
                if !rows.is_empty() {
                    let total: f64 = rows
                        .iter()
                        .map(|&i| cosine_similarity(t_hat.row(i), t.row(i)))
                        .collect::<Result<Vec<_>>>()?
                        .iter()
                        .sum();
                    fidelity = Some(total / rows.len() as f64);
                }
            }
        }
        if let (Some(base), Ok(text_logits)) = (&baseline_predictions, full_model.text_logits(test_set.texts())) {
            let text_pred = (0..text_logits.rows()).map(|i| argmax(text_logits.row(i))).collect();
            let set = PredictionSet::new(labels.clone(), classes_of(base), Some(text_pred), None, set.classes())?;
            omega_result = Some(omega(&set)?);
        }
    }

    let mut metrics = Metrics {
        accuracy_mean: acc,
        accuracy_std: 0.0,
        ..Metrics::default()
    }
    .with_cost(&cost);
    if let Some(o) = omega_result {
        metrics = metrics.with_omega(o);
    }

    Ok(PipelineOutcome {
        pairs,
        histogram,
        text_store,
        full_model,
        model,
        logs: trained.logs,
        predictions: preds,
        accuracy: acc,
        cost,
        baseline_predictions,
        baseline_accuracy,
        fidelity,
        omega: omega_result,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub accuracy: f64,
    pub baseline_accuracy: Option<f64>,
    pub fidelity: Option<f64>,
    pub artifacts: Vec<Artifact>,
}

impl PipelineOutcome {
    /// Writes every artifact plus `run_manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut out = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            let path = dir.join(name);
            f(&path)?;
            written.push(path);
            Ok(())
        };
        out("pairs.jsonl", &|p| self.pairs.save(p))?;
        out("similarity_histogram.csv", &|p| self.histogram.save_csv(p))?;
        out("text_embeddings.cipe", &|p| self.text_store.save(p))?;
        for log in &self.logs {
            let csv = log.to_csv();
            out(&format!("train_log_{}.csv", log.stage), &|p| {
                fs::write(p, &csv).map_err(|e| Error::io(p, e))
            })?;
        }
        out("model.cipm", &|p| checkpoint::save(&self.model, p))?;
        out("predictions.csv", &|p| save_predictions(&self.predictions, p))?;
        if let Some(b) = &self.baseline_predictions {
            out("baseline_predictions.csv", &|p| save_predictions(b, p))?;
        }
        out("metrics.json", &|p| self.metrics.save(p))?;
        out("metrics.csv", &|p| self.metrics.save_csv(&cfg.train.variant.to_string(), p))?;

        let artifacts = written
            .iter()
            .map(|p| {
                let bytes = fs::metadata(p).map_err(|e| Error::io(p, e))?.len();
                Ok(Artifact {
                    name: p.file_name().unwrap().to_string_lossy().into_owned(),
                    bytes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            config: cfg.clone(),
            accuracy: self.accuracy,
            baseline_accuracy: self.baseline_accuracy,
            fidelity: self.fidelity,
            artifacts,
        };
        let path = dir.join("run_manifest.json");
        let json = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny() -> (crate::synth::SynthDataset, PipelineConfig) {
        let ds = generate(&SynthConfig {
            samples: 200,
            test_samples: 60,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = PipelineConfig {
            baseline: true,
            train: TrainConfig {
                epochs: Some(2),
                seed: 7,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        };
        (ds, cfg)
    }

    fn inputs(ds: &crate::synth::SynthDataset) -> PipelineInputs<'_> {
        PipelineInputs {
            train_retrieval: &ds.train.retrieval,
            train_task: &ds.train.task,
            test_retrieval: Some(&ds.test.retrieval),
            test_task: &ds.test.task,
            report_retrieval: &ds.report_retrieval,
            corpus: &ds.corpus,
        }
    }

    #[test]
    fn pipeline_reports_everything_and_drops_text_encoder() {
        let (ds, cfg) = tiny();
        let out = run_pipeline(&inputs(&ds), &cfg).unwrap();
        assert!(out.model.text_adapter().is_none());
        assert!(out.full_model.text_adapter().is_some());
        assert_eq!(out.predictions.len(), 60);
        assert!(out.baseline_accuracy.is_some() && out.fidelity.is_some() && out.omega.is_some());
        assert_eq!(out.metrics.param_total, Some(out.cost.param_total));
        let bytes = checkpoint::to_bytes(&out.model);
        assert!(bytes.len() < checkpoint::to_bytes(&out.full_model).len());
        assert!(checkpoint::from_bytes(&bytes).unwrap().text_adapter().is_none());
    }

    #[test]
    fn saved_run_is_byte_identical_on_rerun() {
        let (ds, cfg) = tiny();
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path();
        let read = |d: &Path| {
            let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(d)
                .unwrap()
                .map(|e| {
                    let p = e.unwrap().path();
                    (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
                })
                .collect();
            files.sort();
            files
        };
        for run in ["a", "b"] {
            run_pipeline(&inputs(&ds), &cfg).unwrap().save(base.join(run), &cfg).unwrap();
        }
        let (a, b) = (read(&base.join("a")), read(&base.join("b")));
        assert!(a.iter().any(|(n, _)| n == "model.cipm"));
        assert_eq!(a, b);
    }

    #[test]
    fn config_errors_surface_before_work() {
        let (ds, mut cfg) = tiny();
        cfg.pairing.rank = 0;
        assert!(matches!(run_pipeline(&inputs(&ds), &cfg), Err(Error::ConfigInvalid(_))));
        let (_, mut cfg) = tiny();
        cfg.text.dropout = 2.0;
        assert!(matches!(run_pipeline(&inputs(&ds), &cfg), Err(Error::ConfigInvalid(_))));
    }
}
