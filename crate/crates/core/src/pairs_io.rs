//! Line-delimited JSON pair files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Doc, TextDocument, Vocab};
use crate::error::{Error, Result};
use crate::permgen::{PairSample, Span, Task};

/// One line of a pair file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub task: Task,
    pub source_doc_id: String,
    pub pos: Vec<Vec<String>>,
    pub neg: Vec<Vec<String>>,
    pub permuted_windows: Vec<Span>,
    pub seed: u64,
}

impl PairRecord {
    pub fn from_sample(p: &PairSample<String>, seed: u64) -> Self {
        PairRecord {
            task: p.task,
            source_doc_id: p.source_doc_id.clone(),
            pos: p.pos.sentences.clone(),
            neg: p.neg.sentences.clone(),
            permuted_windows: p.permuted_windows.clone(),
            seed,
        }
    }

    pub fn into_sample(self) -> PairSample<String> {
        PairSample {
            pos: Doc::new(self.source_doc_id.clone(), self.pos),
            neg: Doc::new(self.source_doc_id.clone(), self.neg),
            task: self.task,
            permuted_windows: self.permuted_windows,
            source_doc_id: self.source_doc_id,
        }
    }
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[PairSample<String>], seed: u64) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, &PairRecord::from_sample(p, seed)).map_err(|e| Error::Invalid(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a pair file; malformed lines are reported with their 1-based number.
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairSample<String>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.pos.len() != rec.neg.len() {
            return Err(parse_err(format!("pos has {} sentences, neg {}", rec.pos.len(), rec.neg.len())));
        }
        if rec.pos.is_empty() || rec.pos.iter().chain(&rec.neg).any(|s| s.is_empty()) {
            return Err(parse_err("empty document or sentence".into()));
        }
        pairs.push(rec.into_sample());
    }
    Ok(pairs)
}

pub fn encode_pairs(vocab: &Vocab, pairs: &[PairSample<String>]) -> Vec<PairSample<u32>> {
    pairs
        .iter()
        .map(|p| PairSample {
            pos: vocab.encode_doc(&p.pos),
            neg: vocab.encode_doc(&p.neg),
            task: p.task,
            permuted_windows: p.permuted_windows.clone(),
            source_doc_id: p.source_doc_id.clone(),
        })
        .collect()
}

/// Distinct positive documents of `pairs`, in first-seen order.
pub fn positives(pairs: &[PairSample<String>]) -> Vec<TextDocument> {
    let mut seen = std::collections::HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert(&p.pos.sentences))
        .map(|p| p.pos.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PairSample<String> {
        let s = |t: &str| vec![t.to_string()];
        PairSample {
            pos: Doc::new("a", vec![s("x"), s("y")]),
            neg: Doc::new("a", vec![s("y"), s("x")]),
            task: Task::Global,
            permuted_windows: vec![],
            source_doc_id: "a".into(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_pairs(&path, &[sample(), sample()], 7).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), vec![sample(), sample()]);
    }

    #[test]
    fn bad_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_pairs(&path, &[sample()], 7).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"task\":\"global\"}\n");
        fs::write(&path, text).unwrap();
        match read_pairs(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
