//! Signed feature-hashing text encoder and word-dropout corruption.

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, TextCorpus};
use crate::error::{Error, Result};
use crate::numeric::{l2_normalize, Matrix};
use crate::rng::Rng;

pub const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
pub const FNV_PRIME: u64 = 1_099_511_628_211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET_BASIS;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedEncoderConfig {
    pub dim: usize,
    pub hash_seed: u64,
}

impl Default for HashedEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hash_seed: 0,
        }
    }
}

impl HashedEncoderConfig {
    pub fn new(dim: usize, hash_seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::ConfigInvalid(format!("text dimension {dim} < 2")));
        }
        Ok(Self { dim, hash_seed })
    }
}

/// Lowercased maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Bag-of-words hashed into `cfg.dim` signed buckets, L2-normalized.
///
/// Each token's FNV-1a hash is XORed with the seed; the bucket is
/// `hash mod dim` and the sign is `-1` when the top bit is set.
pub fn encode_text(text: &str, cfg: &HashedEncoderConfig) -> Result<Vec<f64>> {
    if cfg.dim < 2 {
        return Err(Error::ConfigInvalid(format!("text dimension {} < 2", cfg.dim)));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyText(None));
    }
    let mut v = vec![0.0; cfg.dim];
    for t in &tokens {
        let h = fnv1a64(t.as_bytes()) ^ cfg.hash_seed;
        let bucket = (h % cfg.dim as u64) as usize;
        v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    l2_normalize(&v)
}

/// Drops each whitespace-separated word with probability `p`.
pub fn corrupt_text(text: &str, p: f64, seed: u64) -> Result<String> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::ConfigInvalid(format!("drop probability {p} outside [0, 1]")));
    }
    let mut rng = Rng::new(seed);
    let kept: Vec<&str> = text
        .split_whitespace()
        .filter(|_| rng.next_f64() >= p)
        .collect();
    Ok(kept.join(" "))
}

/// Encodes every report into a store keyed by report id.
///
/// With `dropout > 0` report `j` is first corrupted with seed `seed + j`.
/// Reports left without tokens become zero rows.
pub fn encode_corpus(corpus: &TextCorpus, cfg: &HashedEncoderConfig, dropout: f64, seed: u64) -> Result<EmbeddingStore> {
    let mut data = Vec::with_capacity(corpus.len() * cfg.dim);
    for (j, r) in corpus.reports().iter().enumerate() {
        let text = if dropout > 0.0 {
            corrupt_text(&r.text, dropout, seed.wrapping_add(j as u64))?
        } else {
            r.text.clone()
        };
        match encode_text(&text, cfg) {
            Ok(v) => data.extend(v),
            Err(Error::EmptyText(_) | Error::ZeroVector) => data.extend(std::iter::repeat_n(0.0, cfg.dim)),
            Err(e) => return Err(e),
        }
    }
    let ids = corpus.reports().iter().map(|r| r.id.clone()).collect();
    EmbeddingStore::new(Matrix::new(corpus.len(), cfg.dim, data)?, None, Some(ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dim: usize) -> HashedEncoderConfig {
        HashedEncoderConfig::new(dim, 0).unwrap()
    }

    #[test]
    fn fnv_matches_reference_crate() {
        use std::hash::Hasher;
        for word in ["", "a", "invasive", "carcinoma", "naïve"] {
            let mut h = fnv::FnvHasher::default();
            h.write(word.as_bytes());
            assert_eq!(fnv1a64(word.as_bytes()), h.finish(), "{word}");
        }
    }

    #[test]
    fn known_bucket_pattern() {
        // FNV-1a("invasive") = 0x63c34d47efe69d3e -> bucket 14, top bit 0
        // FNV-1a("carcinoma") = 0x7e331d051a45c024 -> bucket 4, top bit 0
        let v = encode_text("invasive carcinoma", &cfg(16)).unwrap();
        let mut expected = vec![0.0; 16];
        expected[4] = std::f64::consts::FRAC_1_SQRT_2;
        expected[14] = std::f64::consts::FRAC_1_SQRT_2;
        for (a, b) in v.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let a = encode_text("Tumor cells, high grade!", &cfg(64)).unwrap();
        let b = encode_text("Tumor cells, high grade!", &cfg(64)).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repetition_and_order_do_not_matter() {
        let c = cfg(32);
        assert_eq!(encode_text("tumor tumor", &c).unwrap(), encode_text("tumor", &c).unwrap());
        assert_eq!(
            encode_text("nuclei stroma", &c).unwrap(),
            encode_text("STROMA; nuclei", &c).unwrap()
        );
    }

    #[test]
    fn seed_changes_features() {
        let a = encode_text("mitotic figures", &HashedEncoderConfig::new(64, 0).unwrap()).unwrap();
        let b = encode_text("mitotic figures", &HashedEncoderConfig::new(64, 99).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn no_tokens_is_empty_text() {
        assert!(matches!(encode_text(" ,;- ", &cfg(8)), Err(Error::EmptyText(_))));
        assert!(HashedEncoderConfig::new(1, 0).is_err());
    }

    #[test]
    fn corrupt_extremes() {
        assert_eq!(corrupt_text("  a   b\tc ", 0.0, 1).unwrap(), "a b c");
        assert_eq!(corrupt_text("a b c", 1.0, 1).unwrap(), "");
        assert!(corrupt_text("a", 1.5, 1).is_err());
    }

    #[test]
    fn corrupt_rate_and_determinism() {
        let text = vec!["w"; 10_000].join(" ");
        let out = corrupt_text(&text, 0.3, 17).unwrap();
        assert_eq!(out, corrupt_text(&text, 0.3, 17).unwrap());
        let kept = out.split_whitespace().count();
        let removed = 1.0 - kept as f64 / 10_000.0;
        assert!((removed - 0.3).abs() < 0.02, "{removed}");
    }

    #[test]
    fn corrupt_preserves_order() {
        let out = corrupt_text("one two three four five six seven eight", 0.5, 3).unwrap();
        let words = ["one", "two", "three", "four", "five", "six", "seven", "eight"];
        let mut pos = 0;
        for w in out.split_whitespace() {
            let at = words[pos..].iter().position(|x| *x == w).unwrap();
            pos += at + 1;
        }
    }

    #[test]
    fn corpus_encoding_keeps_ids_and_zeroes_emptied_reports() {
        use crate::data::Report;
        let corpus = TextCorpus::new(vec![
            Report { id: "a".into(), text: "nuclei stroma".into(), tags: vec![] },
            Report { id: "b".into(), text: "mitosis".into(), tags: vec![] },
        ])
        .unwrap();
        let store = encode_corpus(&corpus, &cfg(32), 0.0, 0).unwrap();
        assert_eq!(store.ids().unwrap(), ["a", "b"]);
        assert_eq!(store.row(1), encode_text("mitosis", &cfg(32)).unwrap().as_slice());
        let dropped = encode_corpus(&corpus, &cfg(32), 1.0, 0).unwrap();
        assert!(dropped.vectors().data().iter().all(|&x| x == 0.0));
    }
}
