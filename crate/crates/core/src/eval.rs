//! Accuracy, the Ω complementarity count, run aggregation and Fisher's
//! combined probability test.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CostReport;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    same_len(preds.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Labels with per-branch predictions over the same samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionSet {
    labels: Vec<usize>,
    vision: Vec<usize>,
    text: Option<Vec<usize>>,
    fused: Option<Vec<usize>>,
}

impl PredictionSet {
    pub fn new(
        labels: Vec<usize>,
        vision: Vec<usize>,
        text: Option<Vec<usize>>,
        fused: Option<Vec<usize>>,
        classes: usize,
    ) -> Result<Self> {
        for v in [Some(&vision), text.as_ref(), fused.as_ref()].into_iter().flatten() {
            same_len(labels.len(), v.len())?;
        }
        for &c in labels
            .iter()
            .chain(&vision)
            .chain(text.iter().flatten())
            .chain(fused.iter().flatten())
        {
            if c >= classes {
                return Err(Error::IndexOutOfRange { index: c, len: classes });
            }
        }
        Ok(Self {
            labels,
            vision,
            text,
            fused,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vision(&self) -> &[usize] {
        &self.vision
    }

    pub fn text(&self) -> Option<&[usize]> {
        self.text.as_deref()
    }

    pub fn fused(&self) -> Option<&[usize]> {
        self.fused.as_deref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Omega {
    pub count: usize,
    pub fraction: f64,
}

impl Omega {
    pub fn percent(&self) -> f64 {
        self.fraction * 100.0
    }
}

/// Samples the text branch gets right while the vision branch gets wrong.
pub fn omega(p: &PredictionSet) -> Result<Omega> {
    let text = p.text().ok_or(Error::MissingTextPredictions)?;
    if p.labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let count = p
        .labels
        .iter()
        .zip(&p.vision)
        .zip(text)
        .filter(|((y, v), t)| t == y && v != y)
        .count();
    Ok(Omega {
        count,
        fraction: count as f64 / p.labels.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunSummary> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RunSummary { mean, std })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Survival function of χ² with even degrees of freedom `2k`:
/// `exp(−x/2)·Σ_{i<k} (x/2)^i / i!`, summed in log space.
pub fn chi2_survival_even(x: f64, k: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let h = x / 2.0;
    let ln_h = h.ln();
    let mut log_terms = Vec::with_capacity(k);
    let mut ln_fact = 0.0;
    for i in 0..k {
        if i > 0 {
            ln_fact += (i as f64).ln();
        }
        log_terms.push(i as f64 * ln_h - ln_fact);
    }
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    (lse - h).exp().min(1.0)
}

pub fn fisher_combined(p_values: &[f64]) -> Result<FisherResult> {
    if p_values.is_empty() {
        return Err(Error::EmptyInput);
    }
    for &p in p_values {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidPValue(p));
        }
    }
    let statistic = -2.0 * p_values.iter().map(|p| p.ln()).sum::<f64>();
    let k = p_values.len();
    Ok(FisherResult {
        statistic,
        dof: 2 * k,
        p_value: chi2_survival_even(statistic, k),
    })
}

/// Evaluation summary written as JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub omega_count: Option<usize>,
    pub omega_pct: Option<f64>,
    pub fisher_stat: Option<f64>,
    pub fisher_dof: Option<usize>,
    pub fisher_p: Option<f64>,
    pub param_total: Option<usize>,
    pub param_trainable: Option<usize>,
    pub flops_per_sample: Option<usize>,
}

impl Metrics {
    pub fn with_omega(mut self, o: Omega) -> Self {
        self.omega_count = Some(o.count);
        self.omega_pct = Some(o.percent());
        self
    }

    pub fn with_fisher(mut self, f: FisherResult) -> Self {
        self.fisher_stat = Some(f.statistic);
        self.fisher_dof = Some(f.dof);
        self.fisher_p = Some(f.p_value);
        self
    }

    pub fn with_cost(mut self, c: &CostReport) -> Self {
        self.param_total = Some(c.param_total);
        self.param_trainable = Some(c.param_trainable);
        self.flops_per_sample = Some(c.flops_per_sample);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    pub const CSV_HEADER: &'static str = "run,accuracy_mean,accuracy_std,omega_count,omega_pct,fisher_stat,\
fisher_dof,fisher_p,param_total,param_trainable,flops_per_sample";

    /// One CSV row; rows from many runs concatenate under [`Self::CSV_HEADER`].
    pub fn csv_row(&self, run: &str) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        [
            run.replace([',', '\n'], "_"),
            self.accuracy_mean.to_string(),
            self.accuracy_std.to_string(),
            opt(self.omega_count),
            opt(self.omega_pct),
            opt(self.fisher_stat),
            opt(self.fisher_dof),
            opt(self.fisher_p),
            opt(self.param_total),
            opt(self.param_trainable),
            opt(self.flops_per_sample),
        ]
        .join(",")
    }

    pub fn save_csv(&self, run: &str, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row(run));
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// One row of a predictions file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub class: usize,
    pub max_logit: f64,
}

pub fn predictions_to_csv(preds: &[Prediction]) -> String {
    let mut out = String::from("index,predicted_class,max_logit\n");
    for p in preds {
        writeln!(out, "{},{},{:?}", p.index, p.class, p.max_logit).unwrap();
    }
    out
}

pub fn parse_predictions_csv(input: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedLine { line: i + 1, reason };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", cols.len())));
        }
        let index = cols[0].parse().map_err(|e| bad(format!("index: {e}")))?;
        if index != out.len() {
            return Err(bad(format!("index {index} out of order")));
        }
        out.push(Prediction {
            index,
            class: cols[1].parse().map_err(|e| bad(format!("class: {e}")))?,
            max_logit: cols[2].parse().map_err(|e| bad(format!("max_logit: {e}")))?,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

pub fn save_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, predictions_to_csv(preds)).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions_csv(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert!((accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(accuracy(&[], &[]), Err(Error::EmptyInput)));
    }

    fn set(y: &[usize], v: &[usize], t: Option<&[usize]>) -> PredictionSet {
        PredictionSet::new(y.to_vec(), v.to_vec(), t.map(<[usize]>::to_vec), None, 4).unwrap()
    }

    #[test]
    fn omega_examples() {
        let o = omega(&set(&[0, 1, 0, 1], &[0, 0, 1, 1], Some(&[1, 1, 0, 0]))).unwrap();
        assert_eq!((o.count, o.fraction), (2, 0.5));
        let o = omega(&set(&[0, 1, 2], &[0, 1, 2], Some(&[3, 3, 3]))).unwrap();
        assert_eq!(o.count, 0);
        let o = omega(&set(&[0, 1, 2], &[1, 2, 0], Some(&[0, 1, 2]))).unwrap();
        assert_eq!((o.count, o.fraction), (3, 1.0));
        assert!(matches!(omega(&set(&[0], &[0], None)), Err(Error::MissingTextPredictions)));
        assert!(PredictionSet::new(vec![0, 1], vec![0], None, None, 2).is_err());
        assert!(PredictionSet::new(vec![0, 2], vec![0, 1], None, None, 2).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate_runs(&[0.9, 0.9, 0.9]).unwrap();
        assert!((s.mean - 0.9).abs() < 1e-15 && s.std.abs() < 1e-15);
        let s = aggregate_runs(&[0.8, 1.0]).unwrap();
        assert!((s.mean - 0.9).abs() < 1e-15);
        assert!((s.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(aggregate_runs(&[0.5]).unwrap(), RunSummary { mean: 0.5, std: 0.0 });
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn fisher_examples() {
        let f = fisher_combined(&[1.0, 1.0]).unwrap();
        assert_eq!((f.statistic, f.dof, f.p_value), (0.0, 4, 1.0));
        let e = (-1.0f64).exp();
        let f = fisher_combined(&[e, e]).unwrap();
        assert!((f.statistic - 4.0).abs() < 1e-12);
        assert_eq!(f.dof, 4);
        assert!((f.p_value - 3.0 * (-2.0f64).exp()).abs() < 1e-10);
        for p in [1e-12, 0.003, 0.5, 0.999] {
            assert!((fisher_combined(&[p]).unwrap().p_value - p).abs() < 1e-12);
        }
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(fisher_combined(&[0.5, bad]), Err(Error::InvalidPValue(_))));
        }
    }

    #[test]
    fn fisher_matches_reference_distribution() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let k = 1 + rng.below(12);
            let ps: Vec<f64> = (0..k).map(|_| 1.0 - rng.next_f64()).collect();
            let f = fisher_combined(&ps).unwrap();
            let reference = ChiSquared::new(f.dof as f64).unwrap().sf(f.statistic);
            assert!((f.p_value - reference).abs() < 1e-10, "{ps:?}");
        }
    }

    #[test]
    fn metrics_csv_row_matches_header() {
        let m = Metrics {
            accuracy_mean: 0.5,
            ..Metrics::default()
        }
        .with_omega(Omega { count: 3, fraction: 0.25 });
        let row = m.csv_row("a,b");
        assert_eq!(row, "a_b,0.5,0,3,25,,,,,,");
        assert_eq!(row.split(',').count(), Metrics::CSV_HEADER.split(',').count());
    }

    #[test]
    fn predictions_csv_roundtrip() {
        let preds = vec![
            Prediction { index: 0, class: 1, max_logit: 0.25 },
            Prediction { index: 1, class: 0, max_logit: -3.0e-7 },
        ];
        let csv = predictions_to_csv(&preds);
        assert!(csv.starts_with("index,predicted_class,max_logit\n0,1,0.25\n"));
        assert_eq!(parse_predictions_csv(&csv).unwrap(), preds);
        assert!(parse_predictions_csv("h\n0,1\n").is_err());
        assert!(parse_predictions_csv("h\n1,1,0.0\n").is_err());
    }

    #[test]
    fn metrics_json_has_every_field() {
        let m = Metrics::default().with_omega(Omega { count: 3, fraction: 0.25 });
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        for key in [
            "accuracy_mean", "accuracy_std", "omega_count", "omega_pct", "fisher_stat",
            "fisher_dof", "fisher_p", "param_total", "param_trainable", "flops_per_sample",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["omega_pct"], 25.0);
    }

    proptest! {
        #[test]
        fn omega_matches_index_loop(seed in any::<u64>(), n in 1usize..200, c in 2usize..5) {
            let mut rng = Rng::new(seed);
            let mut draw = || (0..n).map(|_| rng.below(c)).collect::<Vec<_>>();
            let (y, v, t) = (draw(), draw(), draw());
            let mut count = 0;
            for i in 0..n {
                if t[i] == y[i] && v[i] != y[i] {
                    count += 1;
                }
            }
            let o = omega(&PredictionSet::new(y.clone(), v, Some(t.clone()), None, c).unwrap()).unwrap();
            prop_assert_eq!(o.count, count);
            let o = omega(&PredictionSet::new(y.clone(), y, Some(t), None, c).unwrap()).unwrap();
            prop_assert_eq!(o.count, 0);
        }

        #[test]
        fn accuracy_permutation_invariant(seed in any::<u64>(), n in 1usize..100) {
            let mut rng = Rng::new(seed);
            let p: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let perm = rng.permutation(n);
            let pp: Vec<usize> = perm.iter().map(|&i| p[i]).collect();
            let yy: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
            prop_assert_eq!(accuracy(&p, &y).unwrap(), accuracy(&pp, &yy).unwrap());
        }

        #[test]
        fn fisher_monotone(seed in any::<u64>(), k in 1usize..8, shrink in 0.01f64..1.0) {
            let mut rng = Rng::new(seed);
            let ps: Vec<f64> = (0..k).map(|_| 1.0 - rng.next_f64()).collect();
            let mut lower = ps.clone();
            let i = rng.below(k);
            lower[i] *= shrink;
            prop_assert!(fisher_combined(&lower).unwrap().p_value <= fisher_combined(&ps).unwrap().p_value + 1e-15);
        }
    }
}
