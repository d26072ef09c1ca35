//! Pairwise discrimination accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::model::CoherenceModel;
use crate::permgen::{PairSample, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub mean: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: Option<Task>,
    pub dataset: String,
    pub pairs: usize,
    pub correct: usize,
    pub ties: usize,
    /// `correct / pairs`; ties count as incorrect.
    pub accuracy: f64,
    /// Distribution of `score(pos) - score(neg)`.
    pub margin: MarginSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Scores every pair with `scorer`. A pair is correct only when the positive
/// document scores strictly higher.
pub fn evaluate_with<'a, F>(pairs: &'a [PairSample<u32>], dataset: &str, mut scorer: F) -> Result<EvalResult>
where
    F: FnMut(&Document) -> Result<f64>,
{
    if pairs.is_empty() {
        return Err(Error::Invalid(format!("dataset `{dataset}` has no pairs")));
    }
    // Positives recur once per negative; score each distinct document once.
    let mut cache: HashMap<&[Vec<u32>], f64> = HashMap::new();
    let mut score = |d: &'a Document| -> Result<f64> {
        if let Some(&s) = cache.get(d.sentences.as_slice()) {
            return Ok(s);
        }
        let s = scorer(d)?;
        cache.insert(d.sentences.as_slice(), s);
        Ok(s)
    };
    let mut correct = 0;
    let mut ties = 0;
    let mut margins = Vec::with_capacity(pairs.len());
    for p in pairs {
        let m = score(&p.pos)? - score(&p.neg)?;
        if m > 0.0 {
            correct += 1;
        } else if m == 0.0 {
            ties += 1;
        }
        margins.push(m);
    }
    let task = pairs[0].task;
    let uniform_task = pairs.iter().all(|p| p.task == task);
    margins.sort_by(f64::total_cmp);
    let n = margins.len();
    let median = if n % 2 == 1 {
        margins[n / 2]
    } else {
        0.5 * (margins[n / 2 - 1] + margins[n / 2])
    };
    Ok(EvalResult {
        task: uniform_task.then_some(task),
        dataset: dataset.to_string(),
        pairs: n,
        correct,
        ties,
        accuracy: correct as f64 / n as f64,
        margin: MarginSummary {
            mean: margins.iter().sum::<f64>() / n as f64,
            min: margins[0],
            median,
            max: margins[n - 1],
        },
        provenance: None,
        warning: None,
    })
}

pub fn evaluate(model: &CoherenceModel, pairs: &[PairSample<u32>], dataset: &str) -> Result<EvalResult> {
    let mut r = evaluate_with(pairs, dataset, |d| model.score(d))?;
    r.provenance = model.provenance;
    Ok(r)
}

/// Evaluates a model trained on the global task on another task's pairs
/// without retraining. A model of other or unknown provenance is still
/// evaluated, with a warning attached.
pub fn transfer_eval(model: &CoherenceModel, pairs: &[PairSample<u32>], dataset: &str) -> Result<EvalResult> {
    let mut r = evaluate(model, pairs, dataset)?;
    if model.provenance != Some(Task::Global) {
        let msg = match model.provenance {
            Some(t) => format!("transfer expects a model trained on the global task, found {t}"),
            None => "transfer expects a model trained on the global task, provenance unknown".to_string(),
        };
        log::warn!("{msg}");
        r.warning = Some(msg);
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub results: Vec<EvalResult>,
    /// `accuracy(w=1) <= accuracy(w=3)`; true when either is missing.
    pub monotone: bool,
}

/// One result per labelled dataset, e.g. `w=1`, `w=2`, `w=3`, `w=1,2,3`.
pub fn difficulty_sweep(model: &CoherenceModel, datasets: &[(String, Vec<PairSample<u32>>)]) -> Result<SweepResult> {
    let results = datasets
        .iter()
        .map(|(label, pairs)| evaluate(model, pairs, label))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        monotone: sweep_monotone(&results, 0.0),
        results,
    })
}

/// Whether `accuracy(w=1) <= accuracy(w=3) + slack`.
pub fn sweep_monotone(results: &[EvalResult], slack: f64) -> bool {
    let acc = |label: &str| results.iter().find(|r| r.dataset == label).map(|r| r.accuracy);
    match (acc("w=1"), acc("w=3")) {
        (Some(a1), Some(a3)) => a1 <= a3 + slack,
        _ => true,
    }
}

/// Fixed-width table of results.
pub fn summary_table(results: &[EvalResult]) -> String {
    let mut out = format!("{:<12} {:>8} {:>8} {:>6} {:>9}\n", "dataset", "pairs", "correct", "ties", "accuracy");
    for r in results {
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>6} {:>8.2}%\n",
            r.dataset,
            r.pairs,
            r.correct,
            r.ties,
            100.0 * r.accuracy
        ));
    }
    out
}
