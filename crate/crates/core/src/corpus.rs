//! Corpus loading, vocabulary and static embedding tables.
//!
//! A corpus is a directory of UTF-8 `.txt` files, one document per file and
//! one sentence per line. Tokens are whitespace-separated and lowercased.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ucoh_tensor::Tensor;

use crate::error::{Error, Result};

/// An ordered sequence of sentences, each an ordered sequence of tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Doc<T> {
    pub doc_id: String,
    pub sentences: Vec<Vec<T>>,
}

/// A document of surface tokens, before vocabulary lookup.
pub type TextDocument = Doc<String>;

/// A document of vocabulary ids.
pub type Document = Doc<u32>;

impl<T> Doc<T> {
    pub fn new(doc_id: impl Into<String>, sentences: Vec<Vec<T>>) -> Self {
        Doc {
            doc_id: doc_id.into(),
            sentences,
        }
    }

    /// Number of sentences.
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Tokenizes one document's text: lowercased, whitespace split, blank lines
/// dropped. Returns `None` if nothing remains.
pub fn parse_document(doc_id: &str, text: &str) -> Option<TextDocument> {
    let sentences: Vec<Vec<String>> = text
        .lines()
        .map(|line| line.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    if sentences.is_empty() {
        None
    } else {
        Some(Doc::new(doc_id, sentences))
    }
}

/// Loads every `.txt` file of `dir` in lexicographic filename order.
/// Files with no non-blank line are skipped with a warning.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<TextDocument>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    let mut docs = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match parse_document(&doc_id, &text) {
            Some(doc) => docs.push(doc),
            None => log::warn!("skipping empty document {}", path.display()),
        }
    }
    Ok(docs)
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token/id mapping. The four special tokens occupy ids 0..4; the rest are
/// ordered by descending corpus frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_freq: usize,
}

impl Vocab {
    pub fn build<'a, I>(docs: I, min_freq: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a TextDocument>,
    {
        let min_freq = min_freq.max(1);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in docs {
            for tok in doc.sentences.iter().flatten() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !SPECIALS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(kept.into_iter().map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Vocab::from_tokens(tokens, min_freq)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize]).to_string())
            .collect()
    }

    pub fn encode_doc(&self, doc: &TextDocument) -> Document {
        Doc::new(
            doc.doc_id.clone(),
            doc.sentences.iter().map(|s| self.encode(s)).collect(),
        )
    }

    pub fn decode_doc(&self, doc: &Document) -> TextDocument {
        Doc::new(
            doc.doc_id.clone(),
            doc.sentences.iter().map(|s| self.decode(s)).collect(),
        )
    }

    /// Hex SHA-256 of the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Invalid("vocabulary must start with the four special tokens".into()));
        }
        Ok(Vocab::from_tokens(tokens, 1))
    }
}

/// `|V| x d` word embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub d: usize,
    pub trainable: bool,
}

pub const EMBED_INIT_RANGE: f64 = 0.05;

impl EmbeddingTable {
    /// Every row uniform in `[-0.05, 0.05)`.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, d: usize, rng: &mut R) -> Result<Self> {
        let matrix = Tensor::uniform(&[vocab_size, d], -EMBED_INIT_RANGE, EMBED_INIT_RANGE, rng)?;
        Ok(EmbeddingTable {
            matrix,
            d,
            trainable: true,
        })
    }
}

/// Reads a `token v1 ... vd` text file. Vocabulary tokens found in the file
/// get its vectors; the others keep seeded random rows. File tokens absent
/// from the vocabulary are ignored.
pub fn load_embeddings<R: Rng + ?Sized>(path: impl AsRef<Path>, vocab: &Vocab, d: usize, rng: &mut R) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = EmbeddingTable::random(vocab.len(), d, rng)?;
    let data = table.matrix.data_mut();
    let mut seen = vec![false; vocab.len()];
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != d {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected {d} values, found {}", values.len()),
            });
        }
        let Some(&id) = vocab.index.get(token) else { continue };
        if std::mem::replace(&mut seen[id as usize], true) {
            continue;
        }
        let row = &mut data[id as usize * d..(id as usize + 1) * d];
        for (slot, v) in row.iter_mut().zip(&values) {
            *slot = v.parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("bad float `{v}`: {e}"),
            })?;
        }
    }
    Ok(table)
}
