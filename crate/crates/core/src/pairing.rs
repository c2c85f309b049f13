//! Retrieval-based pseudo-pairing of images with external reports.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, PairRecord, PseudoPairedDataset, TextCorpus};
use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, l2_normalize, Matrix};
use crate::numeric::matrix::dot;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// k-th most similar report, `k = 1` being the argmax.
    Rank(usize),
    Random { seed: u64 },
}

impl Default for PairingMode {
    fn default() -> Self {
        PairingMode::Rank(1)
    }
}

/// Retrieval-space inputs for pairing.
///
/// `texts` must carry ids. When `keywords` is non-empty, `corpus` is
/// required and only text rows whose id survives the keyword filter are
/// candidates.
#[derive(Clone, Debug)]
pub struct PairingRequest<'a> {
    pub images: &'a EmbeddingStore,
    pub texts: &'a EmbeddingStore,
    pub corpus: Option<&'a TextCorpus>,
    pub keywords: Vec<String>,
    pub workers: usize,
}

impl<'a> PairingRequest<'a> {
    pub fn new(images: &'a EmbeddingStore, texts: &'a EmbeddingStore) -> Self {
        Self {
            images,
            texts,
            corpus: None,
            keywords: Vec::new(),
            workers: 1,
        }
    }

    pub fn with_filter(mut self, corpus: &'a TextCorpus, keywords: Vec<String>) -> Self {
        self.corpus = Some(corpus);
        self.keywords = keywords;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    fn text_ids(&self) -> Result<&'a [String]> {
        self.texts
            .ids()
            .ok_or_else(|| Error::ConfigInvalid("text retrieval store has no ids".into()))
    }

    /// Indices into `texts` that remain candidates, in store order.
    fn candidates(&self) -> Result<Vec<usize>> {
        if self.images.dim() != self.texts.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.images.dim(),
                got: self.texts.dim(),
            });
        }
        let ids = self.text_ids()?;
        if self.keywords.is_empty() {
            return Ok((0..ids.len()).collect());
        }
        let corpus = self
            .corpus
            .ok_or_else(|| Error::ConfigInvalid("keyword filter needs a corpus".into()))?;
        let kept = corpus.filter(&self.keywords)?;
        let keep: HashSet<&str> = kept.reports().iter().map(|r| r.id.as_str()).collect();
        let idx: Vec<usize> = (0..ids.len()).filter(|&j| keep.contains(ids[j].as_str())).collect();
        if idx.is_empty() {
            return Err(Error::EmptyFilterResult);
        }
        Ok(idx)
    }
}

pub fn pair(req: &PairingRequest<'_>, mode: PairingMode) -> Result<PseudoPairedDataset> {
    match mode {
        PairingMode::Rank(k) => pair_modalities(req, k),
        PairingMode::Random { seed } => pair_random(req, seed),
    }
}

fn normalized_rows(m: &Matrix, rows: impl Iterator<Item = usize>) -> Result<Vec<Vec<f64>>> {
    rows.map(|i| l2_normalize(m.row(i))).collect()
}

/// Descending similarity, then ascending index.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Position in `texts` of the k-th ranked candidate for one image.
fn kth_for(image: &[f64], texts: &[Vec<f64>], k: usize, scratch: &mut Vec<(f64, usize)>) -> usize {
    if k == 1 {
        let mut best = 0;
        let mut best_s = dot(image, &texts[0]);
        for (j, t) in texts.iter().enumerate().skip(1) {
            let s = dot(image, t);
            if s > best_s {
                best = j;
                best_s = s;
            }
        }
        return best;
    }
    scratch.clear();
    scratch.extend(texts.iter().enumerate().map(|(j, t)| (dot(image, t), j)));
    scratch.select_nth_unstable_by(k - 1, rank_order);
    scratch[k - 1].1
}

/// Pairs every image with its `k`-th most similar candidate report.
///
/// Work is split into contiguous image blocks across `req.workers`
/// threads; each result is written at its image index.
pub fn pair_modalities(req: &PairingRequest<'_>, k: usize) -> Result<PseudoPairedDataset> {
    let cand = req.candidates()?;
    if k == 0 || k > cand.len() {
        return Err(Error::RankExceedsCorpus {
            rank: k,
            corpus: cand.len(),
        });
    }
    let texts = normalized_rows(req.texts.vectors(), cand.iter().copied())?;
    let images = normalized_rows(req.images.vectors(), 0..req.images.len())?;
    let n = images.len();
    let mut picks = vec![0usize; n];
    let workers = req.workers.clamp(1, n);
    let block = n.div_ceil(workers);
    std::thread::scope(|s| {
        for (chunk_idx, out) in picks.chunks_mut(block).enumerate() {
            let images = &images;
            let texts = &texts;
            s.spawn(move || {
                let mut scratch = Vec::with_capacity(texts.len());
                for (o, img) in out.iter_mut().zip(&images[chunk_idx * block..]) {
                    *o = kth_for(img, texts, k, &mut scratch);
                }
            });
        }
    });
    records(req, &cand, &picks)
}

/// Pairs every image with a uniformly drawn candidate report.
pub fn pair_random(req: &PairingRequest<'_>, seed: u64) -> Result<PseudoPairedDataset> {
    let cand = req.candidates()?;
    let mut rng = Rng::new(seed);
    let picks: Vec<usize> = (0..req.images.len()).map(|_| rng.below(cand.len())).collect();
    records(req, &cand, &picks)
}

fn records(req: &PairingRequest<'_>, cand: &[usize], picks: &[usize]) -> Result<PseudoPairedDataset> {
    let ids = req.text_ids()?;
    let labels = req.images.labels();
    let recs = picks
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let j = cand[p];
            Ok(PairRecord {
                image_index: i,
                text_id: ids[j].clone(),
                label: labels.map(|l| l[i]),
                similarity: cosine_similarity(req.images.row(i), req.texts.row(j))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PseudoPairedDataset::new(recs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub bins: Vec<HistogramBin>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl SimilarityHistogram {
    pub fn counts(&self) -> Vec<usize> {
        self.bins.iter().map(|b| b.count).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for b in &self.bins {
            writeln!(out, "{},{},{}", b.low, b.high, b.count).unwrap();
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Equal-width histogram of stored similarities over `[-1, 1]`.
pub fn similarity_histogram(pairs: &PseudoPairedDataset, bins: usize) -> Result<SimilarityHistogram> {
    if bins == 0 {
        return Err(Error::ConfigInvalid("histogram needs at least one bin".into()));
    }
    let width = 2.0 / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            low: -1.0 + b as f64 * width,
            high: if b + 1 == bins { 1.0 } else { -1.0 + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    let sims = pairs.similarities();
    for &s in &sims {
        let b = (((s + 1.0) / width).floor() as usize).min(bins - 1);
        out[b].count += 1;
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(SimilarityHistogram {
        bins: out,
        mean,
        std: var.sqrt(),
    })
}
