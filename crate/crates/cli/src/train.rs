use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use ucoh_core::corpus::load_embeddings;
use ucoh_core::pairs_io::{encode_pairs, positives, read_pairs};
use ucoh_core::rng::substream;
use ucoh_core::trainer::{multi_seed, MultiSeedReport};
use ucoh_core::{train, CoherenceModel, PairSample, TrainConfig, TrainReport, Vocab};

use crate::gen::sidecar_vocab;
use crate::manifest::ManifestBuilder;
use crate::{create_dir, say, to_json, write_file, CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "train_report.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const MULTI_SEED_FILE: &str = "multi_seed.json";

#[derive(Clone, Debug, Default, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Pairs used to keep the best epoch.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// `key=value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Word vectors, one `token v1 .. vd` line each.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Drop the global (lightweight convolution) features.
    #[arg(long)]
    pub no_global: bool,
    /// Drop the language-model loss.
    #[arg(long)]
    pub no_lm: bool,
    /// Train once per seed, e.g. `1,2,3,4,5`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub l2: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lm_weight: Option<String>,
    #[arg(long)]
    pub lm_reduction: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub use_global: Option<String>,
    #[arg(long)]
    pub use_lm: Option<String>,
    #[arg(long)]
    pub d_emb: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub q: Option<String>,
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub min_freq: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 17] {
        [
            ("tau", &self.tau),
            ("lr", &self.lr),
            ("l2", &self.l2),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lm_weight", &self.lm_weight),
            ("lm_reduction", &self.lm_reduction),
            ("seed", &self.seed),
            ("use_global", &self.use_global),
            ("use_lm", &self.use_lm),
            ("d_emb", &self.d_emb),
            ("hidden", &self.hidden),
            ("q", &self.q),
            ("k", &self.k),
            ("groups", &self.groups),
            ("layers", &self.layers),
            ("min_freq", &self.min_freq),
        ]
    }

    /// Defaults, then the config file, then per-key flags, `--set`, and the
    /// ablation switches.
    pub fn resolve_config(&self) -> CliResult<TrainConfig> {
        let usage = |e: ucoh_core::Error| CliError::Usage(e.to_string());
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            cfg.apply_kv(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v).map_err(usage)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v).map_err(usage)?;
        }
        if self.no_global {
            cfg.use_global = false;
        }
        if self.no_lm {
            cfg.use_lm = false;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<TrainReport>,
    pub multi_seed: Option<MultiSeedReport>,
}

struct Data {
    vocab: Vocab,
    pairs: Vec<PairSample<u32>>,
    dev: Vec<PairSample<u32>>,
}

fn load_data(args: &TrainArgs, cfg: &TrainConfig) -> CliResult<Data> {
    let text = read_pairs(&args.pairs)?;
    if text.is_empty() {
        return Err(ucoh_core::Error::Invalid(format!("{} holds no pairs", args.pairs.display())).into());
    }
    let vocab = match sidecar_vocab(&args.pairs)? {
        Some(v) => v,
        None => Vocab::build(&positives(&text), cfg.min_freq),
    };
    let pairs = encode_pairs(&vocab, &text);
    let dev = match &args.dev {
        Some(p) => encode_pairs(&vocab, &read_pairs(p)?),
        None => Vec::new(),
    };
    Ok(Data { vocab, pairs, dev })
}

fn train_one(args: &TrainArgs, data: &Data, cfg: &TrainConfig, dir: &Path, out: &mut dyn Write) -> CliResult<(PathBuf, TrainReport)> {
    create_dir(dir)?;
    let embeddings = match &args.embeddings {
        Some(p) => Some(load_embeddings(p, &data.vocab, cfg.d_emb, &mut substream(cfg.seed, "init/embeddings"))?),
        None => None,
    };
    let mut model = CoherenceModel::new(cfg.model_config(), data.vocab.clone(), embeddings, cfg.seed)?;
    model.provenance = Some(data.pairs[0].task);
    model.metadata.insert("train.config".into(), cfg.to_kv());
    let mut log_epoch = |e: &ucoh_core::trainer::EpochRecord| {
        info!(
            "seed {} epoch {}: rank {:.4}, lm {:.4}, dev {}, {:.1}s",
            cfg.seed,
            e.epoch,
            e.rank_loss,
            e.lm_loss,
            e.dev_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            e.seconds
        );
    };
    let report = train(&mut model, &data.pairs, &data.dev, cfg, &mut log_epoch)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    write_file(&dir.join(REPORT_FILE), report.to_jsonl())?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_kv())?;
    say(
        out,
        format!(
            "seed {}: best epoch {} of {}, dev accuracy {} -> {}",
            cfg.seed,
            report.best_epoch,
            report.epochs.len(),
            report.best_dev_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
            ckpt.display()
        ),
    )?;
    Ok((ckpt, report))
}

fn metrics(report: &TrainReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    let last = report.epochs.last().expect("at least one epoch");
    m.insert("best_epoch".into(), report.best_epoch as f64);
    m.insert("final_rank_loss".into(), last.rank_loss);
    m.insert("final_lm_loss".into(), last.lm_loss);
    if let Some(a) = report.best_dev_accuracy {
        m.insert("best_dev_accuracy".into(), a);
    }
    m
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<TrainOutput> {
    let cfg = args.resolve_config()?;
    if args.seeds.as_ref().is_some_and(|s| s.len() < 2) {
        return Err(CliError::Usage("--seeds needs at least two seeds".into()));
    }
    let data = load_data(args, &cfg)?;
    info!("{} training pairs, {} dev pairs, vocabulary {}", data.pairs.len(), data.dev.len(), data.vocab.len());

    let mut manifest = ManifestBuilder::new("train", cfg.seed);
    for key in TrainConfig::KEYS {
        manifest.config(key, cfg.get(key).unwrap_or_default());
    }
    manifest.input("pairs", &args.pairs);
    if let Some(p) = &args.dev {
        manifest.input("dev", p);
    }
    if let Some(p) = &args.config {
        manifest.input("config", p);
    }
    if let Some(p) = &args.embeddings {
        manifest.input("embeddings", p);
    }

    let mut output = TrainOutput {
        checkpoints: Vec::new(),
        reports: Vec::new(),
        multi_seed: None,
    };
    match &args.seeds {
        None => {
            let (ckpt, report) = train_one(args, &data, &cfg, &args.out, out)?;
            manifest.output(&ckpt).output(&args.out.join(REPORT_FILE));
            output.checkpoints.push(ckpt);
            output.reports.push(report);
        }
        Some(seeds) => {
            manifest.config("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
            let summary = multi_seed(seeds, |seed| {
                let cfg = TrainConfig { seed, ..cfg.clone() };
                let dir = args.out.join(format!("seed-{seed}"));
                let (ckpt, report) = train_one(args, &data, &cfg, &dir, out).map_err(|e| match e {
                    CliError::Data(e) => e,
                    other => ucoh_core::Error::Invalid(other.to_string()),
                })?;
                let m = metrics(&report);
                output.checkpoints.push(ckpt);
                output.reports.push(report);
                Ok(m)
            })?;
            let path = args.out.join(MULTI_SEED_FILE);
            write_file(&path, to_json(&summary))?;
            for (key, s) in &summary.summary {
                say(out, format!("{key}: mean {:.4}, stddev {:.4}", s.mean, s.stddev))?;
            }
            for ckpt in &output.checkpoints {
                manifest.output(ckpt);
            }
            manifest.output(&path);
            output.multi_seed = Some(summary);
        }
    }
    manifest.write(&args.out)?;
    Ok(output)
}
