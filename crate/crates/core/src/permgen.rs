//! Discrimination datasets: global permutations, full inversions and local
//! window permutations, plus a synthetic corpus whose sentence order is
//! recoverable from adjacent sentences.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Doc, TextDocument};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Global,
    Inverse,
    Local,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Global => "global",
            Task::Inverse => "inverse",
            Task::Local => "local",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" | "standard" => Ok(Task::Global),
            "inverse" => Ok(Task::Inverse),
            "local" => Ok(Task::Local),
            other => Err(Error::Invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// Inclusive 1-based sentence span `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(&self) -> usize {
        self.0
    }

    pub fn end(&self) -> usize {
        self.1
    }

    /// Whether the 0-based sentence index `i` lies inside the span.
    pub fn contains_index(&self, i: usize) -> bool {
        i + 1 >= self.0 && i < self.1
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.0 <= other.1 && other.0 <= self.1
    }
}

/// An ordered (more coherent, less coherent) document pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSample<T> {
    pub pos: Doc<T>,
    pub neg: Doc<T>,
    pub task: Task,
    pub permuted_windows: Vec<Span>,
    pub source_doc_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub task: Task,
    /// Numbers of permuted windows to generate datasets for (local task only).
    pub windows: Vec<usize>,
    pub window_size: usize,
    pub max_neg_per_doc: usize,
    pub perms_per_doc: usize,
    pub min_sentences: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(task: Task, seed: u64) -> Self {
        DatasetSpec {
            task,
            windows: vec![1],
            window_size: 3,
            max_neg_per_doc: 20,
            perms_per_doc: 20,
            min_sentences: 11,
            seed,
        }
    }

    pub fn with_windows(mut self, windows: &[usize]) -> Self {
        self.windows = windows.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.window_size) {
            return Err(Error::Invalid(format!("window size {} not in 2..=6", self.window_size)));
        }
        if self.max_neg_per_doc == 0 || self.perms_per_doc == 0 {
            return Err(Error::Invalid("negative caps must be positive".into()));
        }
        if self.task == Task::Local && (self.windows.is_empty() || self.windows.contains(&0)) {
            return Err(Error::Invalid("local task needs window counts >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedDoc {
    pub doc_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub task: Task,
    pub docs: usize,
    pub docs_used: usize,
    pub pairs: usize,
    /// Pair counts keyed by dataset label, e.g. `w=2`.
    pub pairs_by_dataset: BTreeMap<String, usize>,
    pub skipped: Vec<SkippedDoc>,
}

#[derive(Clone, Debug)]
pub struct PairSet<T> {
    pub pairs: Vec<PairSample<T>>,
    pub stats: DatasetStats,
}

/// Up to `perms_per_doc` distinct reorderings of `doc`, none equal to it.
/// Documents with fewer than two sentences yield nothing.
pub fn global_negatives<T, R>(doc: &Doc<T>, perms_per_doc: usize, rng: &mut R) -> Vec<Doc<T>>
where
    T: Clone + Eq + Hash,
    R: Rng + ?Sized,
{
    let n = doc.len();
    if n < 2 {
        log::warn!("document {} has {n} sentence(s); no global permutations", doc.doc_id);
        return Vec::new();
    }
    let arrange = |order: &[usize]| -> Vec<Vec<T>> { order.iter().map(|&i| doc.sentences[i].clone()).collect() };

    let mut seen: HashSet<Vec<Vec<T>>> = HashSet::new();
    seen.insert(doc.sentences.clone());
    let mut out = Vec::new();

    if n <= 6 {
        // Few enough to enumerate: sample without replacement among every
        // distinct non-identity arrangement.
        let mut distinct = Vec::new();
        let mut order: Vec<usize> = (0..n).collect();
        while next_permutation(&mut order) {
            let cand = arrange(&order);
            if seen.insert(cand.clone()) {
                distinct.push(cand);
            }
        }
        distinct.shuffle(rng);
        distinct.truncate(perms_per_doc);
        out.extend(distinct);
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        let mut attempts = 0;
        while out.len() < perms_per_doc && attempts < perms_per_doc * 100 {
            attempts += 1;
            order.shuffle(rng);
            let cand = arrange(&order);
            if seen.insert(cand.clone()) {
                out.push(cand);
            }
        }
    }
    out.into_iter().map(|s| Doc::new(doc.doc_id.clone(), s)).collect()
}

/// The document with its sentence order reversed.
pub fn inverse_negative<T: Clone>(doc: &Doc<T>) -> Result<Doc<T>> {
    if doc.len() < 2 {
        return Err(Error::TooShort { n: doc.len(), needed: 2 });
    }
    let mut sentences = doc.sentences.clone();
    sentences.reverse();
    Ok(Doc::new(doc.doc_id.clone(), sentences))
}

/// Negatives that each reorder `w` pairwise disjoint windows of
/// `window_size` consecutive sentences.
///
/// Window placements are drawn uniformly over all feasible disjoint
/// placements. Inside a window, every sentence moves to a different slot
/// (a derangement), so the negative differs from `doc` at exactly the
/// union of the returned spans. Documents shorter than `min_sentences`
/// are rejected with [`Error::TooShort`].
pub fn local_negatives<T, R>(
    doc: &Doc<T>,
    w: usize,
    window_size: usize,
    max_neg: usize,
    min_sentences: usize,
    rng: &mut R,
) -> Result<Vec<(Doc<T>, Vec<Span>)>>
where
    T: Clone + Eq + Hash,
    R: Rng + ?Sized,
{
    let n = doc.len();
    if n < min_sentences {
        return Err(Error::TooShort { n, needed: min_sentences });
    }
    if w == 0 || w * window_size > n {
        return Err(Error::Invalid(format!(
            "cannot place {w} disjoint windows of size {window_size} in {n} sentences"
        )));
    }
    let derangements = derangements(window_size);
    // Compressed slots: choosing `w` of them and spacing by window_size - 1
    // enumerates every disjoint placement exactly once.
    let slots = n - w * window_size + w;
    let placements = binomial(slots, w);
    let space = placements.saturating_mul((derangements.len() as u128).saturating_pow(w as u32));

    let build = |starts: &[usize], choice: &[usize]| -> Option<Vec<Vec<T>>> {
        let mut sentences = doc.sentences.clone();
        for (&s, &c) in starts.iter().zip(choice) {
            let perm = &derangements[c];
            for (i, &src) in perm.iter().enumerate() {
                if doc.sentences[s + src] == doc.sentences[s + i] {
                    return None;
                }
                sentences[s + i] = doc.sentences[s + src].clone();
            }
        }
        Some(sentences)
    };
    let spans = |starts: &[usize]| -> Vec<Span> { starts.iter().map(|&s| Span(s + 1, s + window_size)).collect() };
    let expand = |compressed: &[usize]| -> Vec<usize> {
        compressed
            .iter()
            .enumerate()
            .map(|(i, &b)| b + i * (window_size - 1))
            .collect()
    };

    let mut seen: HashSet<Vec<Vec<T>>> = HashSet::new();
    let mut out = Vec::new();
    if space <= 20_000 {
        let mut options: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for combo in combinations(slots, w) {
            for choice in product(derangements.len(), w) {
                options.push((combo.clone(), choice));
            }
        }
        options.shuffle(rng);
        for (combo, choice) in options {
            if out.len() >= max_neg {
                break;
            }
            let starts = expand(&combo);
            if let Some(s) = build(&starts, &choice) {
                if seen.insert(s.clone()) {
                    out.push((Doc::new(doc.doc_id.clone(), s), spans(&starts)));
                }
            }
        }
    } else {
        let mut attempts = 0;
        while out.len() < max_neg && attempts < max_neg * 200 {
            attempts += 1;
            let mut combo = index::sample(rng, slots, w).into_vec();
            combo.sort_unstable();
            let choice: Vec<usize> = (0..w).map(|_| rng.gen_range(0..derangements.len())).collect();
            let starts = expand(&combo);
            if let Some(s) = build(&starts, &choice) {
                if seen.insert(s.clone()) {
                    out.push((Doc::new(doc.doc_id.clone(), s), spans(&starts)));
                }
            }
        }
    }
    Ok(out)
}

/// Synthetic corpus with a recoverable sentence order.
///
/// Sentence `i` of every document reads `c{i} <topic> <fillers..> c{i+1}`:
/// consecutive sentences share a chain token, every sentence of a document
/// carries the document's topic token, and 2 to 4 filler tokens are drawn at
/// random. Any non-identity reordering breaks at least one chain link.
pub fn synthetic_corpus(n_docs: usize, n_sents: usize, vocab_size: usize, seed: u64) -> Result<Vec<TextDocument>> {
    if n_docs == 0 {
        return Err(Error::Invalid("synthetic corpus needs at least one document".into()));
    }
    if n_sents < 11 {
        return Err(Error::Invalid(format!("synthetic documents need >= 11 sentences, got {n_sents}")));
    }
    if vocab_size < n_sents + 10 {
        return Err(Error::Invalid(format!(
            "synthetic vocabulary {vocab_size} must be >= sentences + 10 = {}",
            n_sents + 10
        )));
    }
    let rest = vocab_size - (n_sents + 1);
    let topics = (rest / 5).max(1);
    let fillers = rest - topics;
    let mut rng = substream(seed, "synthetic");
    let docs = (0..n_docs)
        .map(|k| {
            let topic = format!("t{}", rng.gen_range(0..topics));
            let sentences = (0..n_sents)
                .map(|i| {
                    let mut s = vec![format!("c{i}"), topic.clone()];
                    for _ in 0..rng.gen_range(2..=4) {
                        s.push(format!("w{}", rng.gen_range(0..fillers)));
                    }
                    s.push(format!("c{}", i + 1));
                    s
                })
                .collect();
            Doc::new(format!("syn{k:05}"), sentences)
        })
        .collect();
    Ok(docs)
}

/// Splits documents (not pairs) into `(kept, held_out)`, holding out
/// `round(frac * len)` of them. Both halves keep the input order.
pub fn split_documents<T: Clone>(docs: &[Doc<T>], frac: f64, seed: u64) -> (Vec<Doc<T>>, Vec<Doc<T>>) {
    let held = ((docs.len() as f64) * frac).round() as usize;
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.shuffle(&mut substream(seed, "split"));
    let mut held_idx: Vec<usize> = idx[..held.min(docs.len())].to_vec();
    held_idx.sort_unstable();
    let held_set: HashSet<usize> = held_idx.iter().copied().collect();
    let kept = (0..docs.len())
        .filter(|i| !held_set.contains(i))
        .map(|i| docs[i].clone())
        .collect();
    let held_out = held_idx.into_iter().map(|i| docs[i].clone()).collect();
    (kept, held_out)
}

/// Builds every pair of `spec` from `docs`, one [`PairSample`] per negative.
/// For the local task the per-`w` datasets are concatenated in the order of
/// `spec.windows`.
pub fn make_pairs<T>(docs: &[Doc<T>], spec: &DatasetSpec) -> Result<PairSet<T>>
where
    T: Clone + Eq + Hash,
{
    spec.validate()?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let mut used: HashSet<usize> = HashSet::new();
    let mut by_dataset = BTreeMap::new();

    let doc_rng = |i: usize, doc: &Doc<T>, tag: &str| {
        ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("{i}:{}:{tag}", doc.doc_id)))
    };

    match spec.task {
        Task::Global => {
            for (i, doc) in docs.iter().enumerate() {
                let negs = global_negatives(doc, spec.perms_per_doc.min(spec.max_neg_per_doc), &mut doc_rng(i, doc, "global"));
                if negs.is_empty() {
                    skipped.push(SkippedDoc {
                        doc_id: doc.doc_id.clone(),
                        reason: format!("{} sentence(s), no distinct permutation", doc.len()),
                    });
                    continue;
                }
                used.insert(i);
                pairs.extend(negs.into_iter().map(|neg| PairSample {
                    pos: doc.clone(),
                    neg,
                    task: Task::Global,
                    permuted_windows: Vec::new(),
                    source_doc_id: doc.doc_id.clone(),
                }));
            }
            by_dataset.insert("global".to_string(), pairs.len());
        }
        Task::Inverse => {
            for (i, doc) in docs.iter().enumerate() {
                match inverse_negative(doc) {
                    Ok(neg) if neg.sentences != doc.sentences => {
                        used.insert(i);
                        pairs.push(PairSample {
                            pos: doc.clone(),
                            neg,
                            task: Task::Inverse,
                            permuted_windows: Vec::new(),
                            source_doc_id: doc.doc_id.clone(),
                        });
                    }
                    Ok(_) => skipped.push(SkippedDoc {
                        doc_id: doc.doc_id.clone(),
                        reason: "reversal equals the original".into(),
                    }),
                    Err(e) => skipped.push(SkippedDoc {
                        doc_id: doc.doc_id.clone(),
                        reason: e.to_string(),
                    }),
                }
            }
            by_dataset.insert("inverse".to_string(), pairs.len());
        }
        Task::Local => {
            for &w in &spec.windows {
                let before = pairs.len();
                for (i, doc) in docs.iter().enumerate() {
                    let mut rng = doc_rng(i, doc, &format!("local{w}"));
                    match local_negatives(doc, w, spec.window_size, spec.max_neg_per_doc, spec.min_sentences, &mut rng) {
                        Ok(negs) if !negs.is_empty() => {
                            used.insert(i);
                            pairs.extend(negs.into_iter().map(|(neg, spans)| PairSample {
                                pos: doc.clone(),
                                neg,
                                task: Task::Local,
                                permuted_windows: spans,
                                source_doc_id: doc.doc_id.clone(),
                            }));
                        }
                        Ok(_) => skipped.push(SkippedDoc {
                            doc_id: doc.doc_id.clone(),
                            reason: format!("w={w}: no distinct window permutation"),
                        }),
                        Err(e) => skipped.push(SkippedDoc {
                            doc_id: doc.doc_id.clone(),
                            reason: format!("w={w}: {e}"),
                        }),
                    }
                }
                by_dataset.insert(format!("w={w}"), pairs.len() - before);
            }
        }
    }

    let stats = DatasetStats {
        task: spec.task,
        docs: docs.len(),
        docs_used: used.len(),
        pairs: pairs.len(),
        pairs_by_dataset: by_dataset,
        skipped,
    };
    Ok(PairSet { pairs, stats })
}

/// Checks the structural invariants of a pair; returns a description of the
/// first violation.
pub fn check_pair<T: Clone + Ord + Eq>(pair: &PairSample<T>, window_size: usize, max_len_filter: Option<usize>) -> std::result::Result<(), String> {
    let (pos, neg) = (&pair.pos.sentences, &pair.neg.sentences);
    if pos.len() != neg.len() {
        return Err("length differs".into());
    }
    if pos == neg {
        return Err("negative equals positive".into());
    }
    let mut a = pos.clone();
    let mut b = neg.clone();
    a.sort();
    b.sort();
    if a != b {
        return Err("sentence multisets differ".into());
    }
    if pair.task != Task::Local {
        return Ok(());
    }
    if let Some(min) = max_len_filter {
        if pos.len() < min {
            return Err(format!("local pair from a {}-sentence document", pos.len()));
        }
    }
    let spans = &pair.permuted_windows;
    if spans.is_empty() {
        return Err("local pair without windows".into());
    }
    for (i, s) in spans.iter().enumerate() {
        if s.end() < s.start() || s.end() - s.start() + 1 != window_size || s.start() == 0 || s.end() > pos.len() {
            return Err(format!("malformed span {s:?}"));
        }
        if spans[i + 1..].iter().any(|o| o.overlaps(s)) {
            return Err(format!("overlapping span {s:?}"));
        }
    }
    for i in 0..pos.len() {
        let inside = spans.iter().any(|s| s.contains_index(i));
        if inside == (pos[i] == neg[i]) {
            return Err(format!("sentence {} {}", i + 1, if inside { "unchanged inside a window" } else { "changed outside windows" }));
        }
    }
    for s in spans {
        let mut a = pos[s.start() - 1..s.end()].to_vec();
        let mut b = neg[s.start() - 1..s.end()].to_vec();
        a.sort();
        b.sort();
        if a != b {
            return Err(format!("window {s:?} mixes sentences from outside"));
        }
    }
    Ok(())
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// All permutations of `0..k` that move every element.
fn derangements(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..k).collect();
    while next_permutation(&mut p) {
        if p.iter().enumerate().all(|(i, &x)| i != x) {
            out.push(p.clone());
        }
    }
    out
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let mut r: u128 = 1;
    for i in 0..k.min(n - k) {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Every length-`k` tuple over `0..base`.
fn product(base: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..base).map(move |d| {
                    let mut p = prefix.clone();
                    p.push(d);
                    p
                })
            })
            .collect();
    }
    out
}
