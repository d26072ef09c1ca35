use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgGroup, Args};
use log::info;
use ucoh_core::corpus::{load_corpus, TextDocument};
use ucoh_core::pairs_io::write_pairs;
use ucoh_core::permgen::{make_pairs, split_documents, synthetic_corpus, DatasetSpec, DatasetStats};
use ucoh_core::rng::derive_seed;
use ucoh_core::{Task, Vocab};

use crate::manifest::ManifestBuilder;
use crate::{create_dir, say, to_json, write_file, CliError, CliResult};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const STATS_FILE: &str = "stats.json";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// `docs,sentences,vocab` triple for the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub docs: usize,
    pub sentences: usize,
    pub vocab: usize,
}

impl FromStr for SyntheticSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("expected docs,sentences,vocab, got `{s}`"))?;
        match parts[..] {
            [docs, sentences, vocab] => Ok(SyntheticSpec { docs, sentences, vocab }),
            _ => Err(format!("expected docs,sentences,vocab, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["corpus", "synthetic"])))]
pub struct GenArgs {
    #[arg(long)]
    pub task: Task,
    /// Directory of `*.txt` documents, one sentence per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Synthetic corpus as `docs,sentences,vocab`.
    #[arg(long)]
    pub synthetic: Option<SyntheticSpec>,
    #[arg(long)]
    pub out: PathBuf,
    /// Permuted-window counts of the local task.
    #[arg(long, value_delimiter = ',')]
    pub windows: Option<Vec<usize>>,
    #[arg(long, default_value_t = 20)]
    pub max_neg: usize,
    #[arg(long, default_value_t = 20)]
    pub perms: usize,
    #[arg(long, default_value_t = 3)]
    pub window_size: usize,
    #[arg(long, default_value_t = 11)]
    pub min_sentences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Separate directory of held-out documents.
    #[arg(long, conflicts_with = "test_frac")]
    pub test_corpus: Option<PathBuf>,
    /// Fraction of documents held out for testing (default 0.2).
    #[arg(long)]
    pub test_frac: Option<f64>,
    /// Fraction of the remaining documents used for model selection.
    #[arg(long, default_value_t = 0.1)]
    pub dev_frac: f64,
    /// Minimum training-document frequency for the vocabulary sidecar.
    #[arg(long, default_value_t = 2)]
    pub min_freq: usize,
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    /// Pair file per split, in `SPLITS` order.
    pub files: Vec<PathBuf>,
    pub stats: BTreeMap<String, DatasetStats>,
    pub vocab: Vocab,
}

fn frac(name: &str, v: f64) -> CliResult<f64> {
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("--{name} must be in [0, 1), got {v}")))
    }
}

fn spec(args: &GenArgs, split: &str) -> CliResult<DatasetSpec> {
    let mut spec = DatasetSpec::new(args.task, derive_seed(args.seed, &format!("datagen/pairs/{split}")));
    if let Some(w) = &args.windows {
        spec = spec.with_windows(w);
    }
    spec.max_neg_per_doc = args.max_neg;
    spec.perms_per_doc = args.perms;
    spec.window_size = args.window_size;
    spec.min_sentences = args.min_sentences;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

fn source_docs(args: &GenArgs) -> CliResult<Vec<TextDocument>> {
    match (&args.corpus, args.synthetic) {
        (Some(dir), None) => Ok(load_corpus(dir)?),
        (None, Some(s)) => synthetic_corpus(s.docs, s.sentences, s.vocab, derive_seed(args.seed, "datagen/synthetic"))
            .map_err(|e| CliError::Usage(e.to_string())),
        _ => Err(CliError::Usage("exactly one of --corpus and --synthetic is required".into())),
    }
}

pub fn cmd_gen(args: &GenArgs, out: &mut dyn Write) -> CliResult<GenOutput> {
    if args.windows.is_some() && args.task != Task::Local {
        return Err(CliError::Usage("--windows only applies to --task local".into()));
    }
    if args.min_freq == 0 {
        return Err(CliError::Usage("--min-freq must be at least 1".into()));
    }
    let dev_frac = frac("dev-frac", args.dev_frac)?;
    let test_frac = frac("test-frac", args.test_frac.unwrap_or(0.2))?;
    let specs = SPLITS.iter().map(|s| spec(args, s)).collect::<CliResult<Vec<_>>>()?;

    let docs = source_docs(args)?;
    let (rest, test) = match &args.test_corpus {
        Some(dir) => (docs, load_corpus(dir)?),
        None => split_documents(&docs, test_frac, derive_seed(args.seed, "datagen/test")),
    };
    let (train, dev) = split_documents(&rest, dev_frac, derive_seed(args.seed, "datagen/dev"));
    info!("{} train, {} dev, {} test documents", train.len(), dev.len(), test.len());

    create_dir(&args.out)?;
    let mut manifest = ManifestBuilder::new("gen", args.seed);
    manifest
        .config("task", args.task)
        .config("max_neg", args.max_neg)
        .config("perms", args.perms)
        .config("window_size", args.window_size)
        .config("min_sentences", args.min_sentences)
        .config("dev_frac", dev_frac)
        .config("min_freq", args.min_freq);
    if let Some(w) = &args.windows {
        manifest.config("windows", w.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    }
    if let Some(s) = args.synthetic {
        manifest.config("synthetic", format!("{},{},{}", s.docs, s.sentences, s.vocab));
    }
    match &args.test_corpus {
        Some(dir) => {
            manifest.input("test_corpus", dir);
        }
        None => {
            manifest.config("test_frac", test_frac);
        }
    }
    if let Some(dir) = &args.corpus {
        manifest.input("corpus", dir);
    }

    let mut files = Vec::new();
    let mut stats = BTreeMap::new();
    for ((split, docs), spec) in SPLITS.iter().zip([&train, &dev, &test]).zip(&specs) {
        let set = make_pairs(docs, spec)?;
        let path = args.out.join(format!("{split}.jsonl"));
        write_pairs(&path, &set.pairs, spec.seed)?;
        say(out, format!("{split}: {} documents, {} pairs -> {}", docs.len(), set.pairs.len(), path.display()))?;
        if !set.stats.skipped.is_empty() {
            say(out, format!("{split}: skipped {} document(s)", set.stats.skipped.len()))?;
            for s in &set.stats.skipped {
                say(out, format!("  {}: {}", s.doc_id, s.reason))?;
            }
        }
        manifest.output(&path);
        files.push(path);
        stats.insert(split.to_string(), set.stats);
    }

    let vocab = Vocab::build(&train, args.min_freq);
    let vocab_path = args.out.join(VOCAB_FILE);
    write_file(&vocab_path, vocab.to_text())?;
    let stats_path = args.out.join(STATS_FILE);
    write_file(&stats_path, to_json(&stats))?;
    manifest.output(&vocab_path).output(&stats_path);
    manifest.write(&args.out)?;
    Ok(GenOutput { files, stats, vocab })
}

/// The vocabulary sidecar written next to a pair file, if present.
pub fn sidecar_vocab(pairs: &Path) -> CliResult<Option<Vocab>> {
    let path = pairs.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(Some(Vocab::from_text(&text)?))
}
