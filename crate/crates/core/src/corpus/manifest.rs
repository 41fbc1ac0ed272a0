//! Corpus manifest: screening pairs, annotated queries and splits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    /// First-screening file, relative to the corpus directory.
    pub a: String,
    /// Second-screening file, relative to the corpus directory.
    pub b: String,
}

/// A query interval in one screening and its annotated target in the other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub video: String,
    pub start: usize,
    pub len: usize,
    pub target_video: String,
    pub target_start: usize,
    pub target_len: usize,
}

/// Pair indices per split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub pairs: Vec<PairEntry>,
    pub queries: Vec<QueryEntry>,
    pub splits: Splits,
}

/// Strips the directory and extension from a manifest path.
pub fn video_id(file: &str) -> String {
    Path::new(file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.to_string())
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: CorpusManifest = serde_json::from_str(&text)?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn pair_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Video files (both screenings) of the pairs in `split`, in pair order.
    pub fn split_files(&self, split: Split) -> Vec<&str> {
        self.pair_indices(split)
            .iter()
            .flat_map(|&p| [self.pairs[p].a.as_str(), self.pairs[p].b.as_str()])
            .collect()
    }

    /// Second-screening files of every pair.
    pub fn second_screenings(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.b.as_str()).collect()
    }

    pub fn file_for_video(&self, id: &str) -> Option<&str> {
        self.pairs
            .iter()
            .flat_map(|p| [p.a.as_str(), p.b.as_str()])
            .find(|f| video_id(f) == id)
    }

    /// Checks the structural invariants that do not need the video files:
    /// splits are disjoint and cover valid pairs, each query names known
    /// videos and a target of equal length.
    pub fn validate(&self) -> Result<()> {
        let n = self.pairs.len();
        let mut seen = vec![false; n];
        for &p in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if p >= n {
                return Err(Error::Contract(format!("split names pair {p} of {n}")));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Contract(format!("pair {p} appears in two splits")));
            }
        }
        for q in &self.queries {
            if self.file_for_video(&q.video).is_none() || self.file_for_video(&q.target_video).is_none() {
                return Err(Error::Contract(format!(
                    "query {}@{} references unknown videos",
                    q.video, q.start
                )));
            }
            if q.len != q.target_len || q.len == 0 {
                return Err(Error::Contract(format!(
                    "query {}@{} has length {} but target length {}",
                    q.video, q.start, q.len, q.target_len
                )));
            }
        }
        Ok(())
    }
}
