//! External report collections, stored as JSONL with `id`, `text` and
//! `tags` fields.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextCorpus {
    reports: Vec<Report>,
}

impl TextCorpus {
    /// Validates ids and texts; tags are lowercased.
    pub fn new(reports: Vec<Report>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(reports.len());
        let mut out = Vec::with_capacity(reports.len());
        for mut r in reports {
            if r.text.trim().is_empty() {
                return Err(Error::EmptyText(Some(r.id)));
            }
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId(r.id));
            }
            for t in &mut r.tags {
                *t = t.to_lowercase();
            }
            out.push(r);
        }
        Ok(Self { reports: out })
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn reports(&self) -> &[Report] {
        &self.reports
    }

    pub fn get(&self, id: &str) -> Option<&Report> {
        self.reports.iter().find(|r| r.id == id)
    }

    pub fn parse_jsonl(input: &str) -> Result<Self> {
        let mut reports = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let r: Report = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId(r.id));
            }
            reports.push(r);
        }
        Self::new(reports)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&s)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&serde_json::to_string(r).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Keeps reports whose tags or text contain any keyword, case-insensitively.
    pub fn filter(&self, keywords: &[String]) -> Result<Self> {
        let keys: Vec<String> = keywords
            .iter()
            .map(|k| k.trim().to_lowercase())
            .filter(|k| !k.is_empty())
            .collect();
        if keys.is_empty() {
            return Err(Error::ConfigInvalid("keyword list is empty".into()));
        }
        let reports: Vec<Report> = self
            .reports
            .iter()
            .filter(|r| {
                let text = r.text.to_lowercase();
                keys.iter()
                    .any(|k| text.contains(k.as_str()) || r.tags.iter().any(|t| t.contains(k.as_str())))
            })
            .cloned()
            .collect();
        if reports.is_empty() {
            return Err(Error::EmptyFilterResult);
        }
        Ok(Self { reports })
    }
}
