use clipit_core::data::{EmbeddingStore, PseudoPairedDataset};
use clipit_core::eval::load_predictions;
use clipit_core::model::checkpoint;
use clipit_core::pipeline::{run_pipeline, PipelineConfig, PipelineInputs};
use clipit_core::synth::{generate, oracle_eval, SynthConfig, SynthDataset};
use clipit_core::train::Variant;

fn small() -> SynthConfig {
    SynthConfig {
        samples: 400,
        test_samples: 100,
        seed: 2,
        ..SynthConfig::default()
    }
}

fn inputs(ds: &SynthDataset) -> PipelineInputs<'_> {
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
fn saved_benchmark_reloads_and_pairs_with_its_planted_classes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small()).unwrap();
    ds.save(dir.path()).unwrap();
    let back = SynthDataset::load(dir.path()).unwrap();
    assert_eq!(back.train.task, ds.train.task);
    assert_eq!(back.corpus, ds.corpus);
    assert_eq!(back.manifest, ds.manifest);

    let out = run_pipeline(&inputs(&back), &PipelineConfig::default()).unwrap();
    let q = oracle_eval(&back.manifest.train, &back.manifest.reports, &out.pairs).unwrap();
    assert!(q > 0.99, "{q}");
}

#[test]
fn every_variant_runs_and_its_checkpoint_reproduces_predictions() {
    let ds = generate(&small()).unwrap();
    for variant in Variant::ALL {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.train.variant = variant;
        cfg.train.epochs = Some(3);
        let out = run_pipeline(&inputs(&ds), &cfg).unwrap();
        assert!(out.accuracy > 0.5, "{variant}: {}", out.accuracy);
        out.save(dir.path(), &cfg).unwrap();

        let model = checkpoint::load(dir.path().join("model.cipm")).unwrap();
        assert!(model.text_adapter().is_none());
        let (classes, _) = model.predict_unimodal(ds.test.task.vectors()).unwrap();
        let saved: Vec<usize> = load_predictions(dir.path().join("predictions.csv"))
            .unwrap()
            .iter()
            .map(|p| p.class)
            .collect();
        assert_eq!(classes, saved, "{variant}");

        let pairs = PseudoPairedDataset::load(dir.path().join("pairs.jsonl")).unwrap();
        assert_eq!(pairs, out.pairs);
        let texts = EmbeddingStore::load(dir.path().join("text_embeddings.cipe")).unwrap();
        assert_eq!(texts, out.text_store);
        let csv = std::fs::read_to_string(dir.path().join("train_log_multimodal.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
}

#[test]
fn baseline_run_reports_omega_and_fidelity() {
    let ds = generate(&small()).unwrap();
    let cfg = PipelineConfig {
        baseline: true,
        ..PipelineConfig::default()
    };
    let out = run_pipeline(&inputs(&ds), &cfg).unwrap();
    let o = out.omega.unwrap();
    assert_eq!(o.fraction, o.count as f64 / 100.0);
    let f = out.fidelity.unwrap();
    assert!((-1.0..=1.0).contains(&f));
    assert!(out.baseline_accuracy.is_some());
    assert_eq!(out.metrics.omega_count, Some(o.count));
}
