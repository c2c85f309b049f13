use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use clipit_core::data::{EmbeddingStore, PseudoPairedDataset, TextCorpus};
use clipit_core::eval::{
    accuracy, aggregate_runs, fisher_combined, load_predictions, omega, save_predictions, Metrics, Prediction,
    PredictionSet,
};
use clipit_core::model::{checkpoint, count_cost};
use clipit_core::numeric::argmax;
use clipit_core::pairing::{pair, similarity_histogram, PairingRequest};
use clipit_core::pipeline::{run_pipeline, PipelineInputs, DROPOUT_SEED_OFFSET};
use clipit_core::synth::{generate, SynthDataset};
use clipit_core::text::encode_corpus;
use clipit_core::train::{train_variant, TrainingSet, Variant};

use crate::args::{explicit, Branch, Cli, Command, TrainFlags};
use crate::config::FileConfig;
use crate::UsageError;

pub fn run(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let mut file = FileConfig::load(cli.config.as_deref())?;
    if explicit(matches, "workers") || explicit(sub, "workers") {
        file.pairing.workers = cli.workers;
    }
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let out = Output { dir: &cli.out_dir };
    match &cli.command {
        Command::Synth(a) => {
            a.apply(sub, &mut file.synth);
            let ds = generate(&file.synth)?;
            for p in ds.save(&cli.out_dir)? {
                out.report(&p);
            }
        }
        Command::EncodeText(a) => {
            a.text.apply(sub, &mut file.text);
            let corpus = TextCorpus::load(&a.corpus)?;
            let seed = if explicit(sub, "seed") { a.seed } else { file.train.seed };
            let store = encode_corpus(
                &corpus,
                &file.text.encoder()?,
                file.text.dropout,
                seed.wrapping_add(DROPOUT_SEED_OFFSET),
            )?;
            out.write(&a.output, |p| Ok(store.save(p)?))?;
        }
        Command::Pair(a) => {
            a.pairing.apply(sub, &mut file.pairing);
            let seed = if explicit(sub, "seed") { a.seed } else { file.train.seed };
            let images = EmbeddingStore::load(&a.images)?;
            let texts = EmbeddingStore::load(&a.texts)?;
            let corpus = a.corpus.as_deref().map(TextCorpus::load).transpose()?;
            let mut req = PairingRequest::new(&images, &texts).with_workers(file.pairing.workers);
            if !file.pairing.keywords.is_empty() {
                let Some(corpus) = &corpus else {
                    bail!(UsageError("--keywords needs --corpus".into()));
                };
                req = req.with_filter(corpus, file.pairing.keywords.clone());
            }
            if file.pairing.bins == 0 {
                bail!(UsageError("--bins must be at least 1".into()));
            }
            let pairs = pair(&req, file.pairing.mode(seed))?;
            let hist = similarity_histogram(&pairs, file.pairing.bins)?;
            out.write("pairs.jsonl", |p| Ok(pairs.save(p)?))?;
            out.write("similarity_histogram.csv", |p| Ok(hist.save_csv(p)?))?;
        }
        Command::Train(a) => {
            apply_train(&a.train, sub, &mut file);
            let images = EmbeddingStore::load(&a.images)?;
            let pairs = PseudoPairedDataset::load(&a.pairs)?;
            let texts = EmbeddingStore::load(&a.texts)?;
            let set = TrainingSet::from_text_store(&images, &pairs, &texts)?;
            let trained = train_variant(&set, &file.train)?;
            out.write("model.cipm", |p| Ok(checkpoint::save(&trained.model.clone().into_unimodal(), p)?))?;
            out.write("model_full.cipm", |p| Ok(checkpoint::save(&trained.model, p)?))?;
            trained.save_logs(&cli.out_dir, &file.train)?;
            for log in &trained.logs {
                out.report(&cli.out_dir.join(format!("train_log_{}.csv", log.stage)));
            }
            out.report(&cli.out_dir.join("train_summary.json"));
        }
        Command::Infer(a) => {
            let model = checkpoint::load(&a.checkpoint)?;
            let images = EmbeddingStore::load(&a.images)?;
            let logits = match a.branch {
                Branch::Unimodal => model.predict_unimodal(images.vectors())?.1,
                Branch::Text => {
                    let (Some(texts), Some(pairs)) = (&a.texts, &a.pairs) else {
                        bail!(UsageError("--branch text needs --texts and --pairs".into()));
                    };
                    let texts = EmbeddingStore::load(texts)?;
                    let pairs = PseudoPairedDataset::load(pairs)?;
                    let set = TrainingSet::from_text_store(&images, &pairs, &texts)?;
                    model.text_logits(set.texts())?
                }
            };
            let preds: Vec<Prediction> = (0..logits.rows())
                .map(|i| {
                    let c = argmax(logits.row(i));
                    Prediction {
                        index: i,
                        class: c,
                        max_logit: logits.get(i, c),
                    }
                })
                .collect();
            out.write(&a.output, |p| Ok(save_predictions(&preds, p)?))?;
        }
        Command::Eval(a) => {
            let labels = EmbeddingStore::load(&a.labels)?.class_labels()?;
            let classes = labels.iter().max().map_or(2, |m| m + 1);
            let mut accs = Vec::new();
            let mut first = None;
            for path in &a.predictions {
                let preds = classes_of(&load_predictions(path)?);
                accs.push(accuracy(&preds, &labels).with_context(|| format!("scoring {}", path.display()))?);
                first.get_or_insert(preds);
            }
            let runs = aggregate_runs(&accs)?;
            let mut metrics = Metrics {
                accuracy_mean: runs.mean,
                accuracy_std: runs.std,
                ..Metrics::default()
            };
            if let Some(tp) = &a.text_predictions {
                let text = classes_of(&load_predictions(tp)?);
                let set = PredictionSet::new(labels.clone(), first.unwrap(), Some(text), None, classes.max(2))?;
                metrics = metrics.with_omega(omega(&set)?);
            }
            if !a.p_values.is_empty() {
                metrics = metrics.with_fisher(fisher_combined(&a.p_values)?);
            }
            if let Some(ck) = &a.checkpoint {
                metrics = metrics.with_cost(&count_cost(&checkpoint::load(ck)?));
            }
            out.write(&a.output, |p| Ok(metrics.save(p)?))?;
            let csv = Path::new(&a.output).with_extension("csv");
            let run = a.predictions[0].file_stem().unwrap_or_default().to_string_lossy();
            out.write(&csv.to_string_lossy(), |p| Ok(metrics.save_csv(&run, p)?))?;
        }
        Command::Pipeline(a) => {
            a.pairing.apply(sub, &mut file.pairing);
            a.text.apply(sub, &mut file.text);
            apply_train(&a.train, sub, &mut file);
            if explicit(sub, "baseline") {
                file.baseline = a.baseline;
            }
            let ds = match &a.data {
                Some(dir) => SynthDataset::load(dir)?,
                None => {
                    file.synth.seed = file.train.seed;
                    let ds = generate(&file.synth)?;
                    let dir = cli.out_dir.join("data");
                    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                    for p in ds.save(&dir)? {
                        out.report(&p);
                    }
                    ds
                }
            };
            let inputs = PipelineInputs {
                train_retrieval: &ds.train.retrieval,
                train_task: &ds.train.task,
                test_retrieval: Some(&ds.test.retrieval),
                test_task: &ds.test.task,
                report_retrieval: &ds.report_retrieval,
                corpus: &ds.corpus,
            };
            let cfg = file.pipeline();
            let outcome = run_pipeline(&inputs, &cfg)?;
            for p in outcome.save(&cli.out_dir, &cfg)? {
                out.report(&p);
            }
            eprintln!("accuracy {:.4}", outcome.accuracy);
            if let Some(b) = outcome.baseline_accuracy {
                eprintln!("baseline accuracy {b:.4}");
            }
        }
    }
    Ok(())
}

fn apply_train(flags: &TrainFlags, sub: &ArgMatches, file: &mut FileConfig) {
    flags.apply(sub, &mut file.train);
    let lambda_given = explicit(sub, "lambda") || file.lambda_set;
    if file.train.variant == Variant::ArchOnly && lambda_given && file.train.lambda != 0.0 {
        eprintln!(
            "warning: arch_only trains without distillation; lambda {} is ignored (using 0)",
            file.train.lambda
        );
    }
}

fn classes_of(preds: &[Prediction]) -> Vec<usize> {
    preds.iter().map(|p| p.class).collect()
}

struct Output<'a> {
    dir: &'a Path,
}

impl Output<'_> {
    fn report(&self, path: &Path) {
        println!("{}", path.display());
    }

    fn write(&self, name: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        f(&path)?;
        self.report(&path);
        Ok(path)
    }
}
