use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use ucoh_core::corpus::parse_document;
use ucoh_core::evaluator::{summary_table, sweep_monotone};
use ucoh_core::pairs_io::{encode_pairs, read_pairs};
use ucoh_core::{evaluate, transfer_eval, CoherenceModel, Error, EvalResult, PairSample, Task};

use crate::gen::sidecar_vocab;
use crate::manifest::ManifestBuilder;
use crate::{create_dir, say, write_file, CliError, CliResult};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Evaluate on a task other than the one the checkpoint was trained on.
    #[arg(long)]
    pub transfer: bool,
    /// Output directory; defaults to `eval-<pairs stem>` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Plain-text document, one sentence per line.
    pub doc: PathBuf,
}

/// Pairs grouped into evaluation datasets: one per permuted-window count
/// plus their union for the local task, the whole file otherwise.
pub fn datasets(pairs: Vec<PairSample<u32>>, name: &str) -> Vec<(String, Vec<PairSample<u32>>)> {
    let local = pairs.iter().all(|p| p.task == Task::Local);
    if !local || pairs.is_empty() {
        return vec![(name.to_string(), pairs)];
    }
    let mut by_w: BTreeMap<usize, Vec<PairSample<u32>>> = BTreeMap::new();
    for p in &pairs {
        by_w.entry(p.permuted_windows.len()).or_default().push(p.clone());
    }
    let mut out: Vec<_> = by_w.into_iter().map(|(w, ps)| (format!("w={w}"), ps)).collect();
    if out.len() > 1 {
        out.push((name.to_string(), pairs));
    }
    out
}

fn output_dir(args: &EvalArgs, name: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        let parent = args.ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        parent.join(format!("eval-{name}"))
    })
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<Vec<EvalResult>> {
    let model = CoherenceModel::load(&args.ckpt)?;
    if let Some(vocab) = sidecar_vocab(&args.pairs)? {
        if vocab.hash() != model.vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: model.vocab.hash(),
                found: vocab.hash(),
            }
            .into());
        }
    }
    let pairs = encode_pairs(&model.vocab, &read_pairs(&args.pairs)?);
    let name = args
        .pairs
        .file_stem()
        .map_or_else(|| "pairs".to_string(), |s| s.to_string_lossy().into_owned());

    let mut results = Vec::new();
    for (label, set) in datasets(pairs, &name) {
        let r = if args.transfer {
            transfer_eval(&model, &set, &label)?
        } else {
            evaluate(&model, &set, &label)?
        };
        if let Some(w) = &r.warning {
            say(out, format!("warning ({label}): {w}"))?;
        }
        results.push(r);
    }

    let table = summary_table(&results);
    say(out, table.trim_end())?;
    if results.iter().any(|r| r.dataset.starts_with("w=")) {
        say(out, format!("difficulty trend w=1 <= w=3 (slack 0.02): {}", sweep_monotone(&results, 0.02)))?;
    }

    let dir = output_dir(args, &name);
    create_dir(&dir)?;
    let lines: String = results
        .iter()
        .map(|r| serde_json::to_string(r).expect("result serializes") + "\n")
        .collect();
    let results_path = dir.join(RESULTS_FILE);
    let summary_path = dir.join(SUMMARY_FILE);
    write_file(&results_path, lines)?;
    write_file(&summary_path, table)?;

    let mut manifest = ManifestBuilder::new("eval", 0);
    manifest
        .config("transfer", args.transfer)
        .config("vocab_hash", model.vocab.hash())
        .input("ckpt", &args.ckpt)
        .input("pairs", &args.pairs)
        .output(&results_path)
        .output(&summary_path);
    manifest.write(&dir)?;
    Ok(results)
}

/// Window scores `y_1 .. y_n` and their sum.
pub fn cmd_score(args: &ScoreArgs, out: &mut dyn Write) -> CliResult<Vec<f64>> {
    let model = CoherenceModel::load(&args.ckpt)?;
    let text = std::fs::read_to_string(&args.doc).map_err(|e| CliError::io(&args.doc, e))?;
    let id = args.doc.display().to_string();
    let doc = parse_document(&id, &text)
        .ok_or_else(|| Error::Invalid(format!("{id}: document has no sentences")))?;
    let scores = model.window_scores(&model.vocab.encode_doc(&doc))?;
    for (i, y) in scores.iter().enumerate() {
        say(out, format!("y_{}\t{y:.17e}", i + 1))?;
    }
    say(out, format!("total\t{:.17e}", scores.iter().sum::<f64>()))?;
    Ok(scores)
}
