use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::TextCorpus;
use crate::error::{Error, Result};

/// One image matched to one report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image_index: usize,
    pub text_id: String,
    pub label: Option<u32>,
    pub similarity: f64,
}

/// The pseudo-paired dataset: exactly one record per image, in image order.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPairedDataset {
    records: Vec<PairRecord>,
}

impl PseudoPairedDataset {
    pub fn new(records: Vec<PairRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, r) in records.iter().enumerate() {
            if r.image_index != i {
                return Err(Error::ConfigInvalid(format!(
                    "pair record {i} has image_index {}",
                    r.image_index
                )));
            }
            if !(-1.0..=1.0).contains(&r.similarity) {
                return Err(Error::ConfigInvalid(format!(
                    "similarity {} outside [-1, 1]",
                    r.similarity
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn similarities(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.similarity).collect()
    }

    /// Every `text_id` must name a report in `corpus`.
    pub fn validate_against(&self, corpus: &TextCorpus) -> Result<()> {
        let ids: HashSet<&str> = corpus.reports().iter().map(|r| r.id.as_str()).collect();
        match self.records.iter().find(|r| !ids.contains(r.text_id.as_str())) {
            Some(r) => Err(Error::UnknownTextId(r.text_id.clone())),
            None => Ok(()),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(input: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: PairRecord = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push(r);
        }
        Self::new(records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::Report;

    fn rec(i: usize, id: &str) -> PairRecord {
        PairRecord {
            image_index: i,
            text_id: id.into(),
            label: Some(1),
            similarity: 0.25,
        }
    }

    #[test]
    fn one_record_per_image_in_order() {
        assert!(PseudoPairedDataset::new(vec![rec(0, "a"), rec(1, "a")]).is_ok());
        assert!(PseudoPairedDataset::new(vec![rec(1, "a")]).is_err());
        assert!(PseudoPairedDataset::new(vec![]).is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_validation() {
        let p = PseudoPairedDataset::new(vec![rec(0, "a"), rec(1, "b")]).unwrap();
        let back = PseudoPairedDataset::parse_jsonl(&p.to_jsonl()).unwrap();
        assert_eq!(back, p);
        let corpus = TextCorpus::new(vec![Report {
            id: "a".into(),
            text: "x".into(),
            tags: vec![],
        }])
        .unwrap();
        assert!(matches!(p.validate_against(&corpus), Err(Error::UnknownTextId(id)) if id == "b"));
    }
}
