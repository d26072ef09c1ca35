//! Pairwise ranking objective and the Siamese training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use ucoh_tensor::{Adam, AdamConfig, Graph, Tensor, Var};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::model::{CoherenceModel, ModelConfig, Session};
use crate::permgen::PairSample;
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Invalid(format!("unknown reduction `{other}`"))),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

pub const BATCH_SIZES: [usize; 4] = [5, 10, 20, 25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lm_weight: f64,
    pub lm_reduction: Reduction,
    pub seed: u64,
    pub use_global: bool,
    pub use_lm: bool,
    pub d_emb: usize,
    pub hidden: usize,
    pub q: usize,
    pub k: usize,
    pub groups: usize,
    pub layers: usize,
    pub min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            tau: 1.0,
            lr: 1e-3,
            l2: 1e-5,
            epochs: 25,
            batch_size: 5,
            lm_weight: 1.0,
            lm_reduction: Reduction::Mean,
            seed: 0,
            use_global: true,
            use_lm: true,
            d_emb: m.d_emb,
            hidden: m.hidden,
            q: m.q,
            k: m.k,
            groups: m.groups,
            layers: m.layers,
            min_freq: 2,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 17] = [
        "tau",
        "lr",
        "l2",
        "epochs",
        "batch_size",
        "lm_weight",
        "lm_reduction",
        "seed",
        "use_global",
        "use_lm",
        "d_emb",
        "hidden",
        "q",
        "k",
        "groups",
        "layers",
        "min_freq",
    ];

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_emb: self.d_emb,
            hidden: self.hidden,
            q: self.q,
            k: self.k,
            groups: self.groups,
            layers: self.layers,
            use_global: self.use_global,
        }
    }

    /// Weight of the LM term in the total objective; 0 when it is disabled.
    pub fn effective_lm_weight(&self) -> f64 {
        if self.use_lm {
            self.lm_weight
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) || !(self.lm_weight.is_finite() && self.lm_weight >= 0.0) {
            return bad("l2 and lm_weight must be non-negative".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            return bad(format!("batch_size must be one of {BATCH_SIZES:?}, got {}", self.batch_size));
        }
        if self.min_freq == 0 {
            return bad("min_freq must be at least 1".into());
        }
        self.model_config().validate()
    }

    /// Sets one `key=value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "tau" => self.tau = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lm_weight" => self.lm_weight = parse(key, value)?,
            "lm_reduction" => self.lm_reduction = value.trim().parse()?,
            "seed" => self.seed = parse(key, value)?,
            "use_global" => self.use_global = parse(key, value)?,
            "use_lm" => self.use_lm = parse(key, value)?,
            "d_emb" => self.d_emb = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "q" => self.q = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "groups" => self.groups = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            other => return Err(Error::Invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "tau" => self.tau.to_string(),
            "lr" => self.lr.to_string(),
            "l2" => self.l2.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lm_weight" => self.lm_weight.to_string(),
            "lm_reduction" => self.lm_reduction.to_string(),
            "seed" => self.seed.to_string(),
            "use_global" => self.use_global.to_string(),
            "use_lm" => self.use_lm.to_string(),
            "d_emb" => self.d_emb.to_string(),
            "hidden" => self.hidden.to_string(),
            "q" => self.q.to_string(),
            "k" => self.k.to_string(),
            "groups" => self.groups.to_string(),
            "layers" => self.layers.to_string(),
            "min_freq" => self.min_freq.to_string(),
            _ => return None,
        })
    }

    /// Applies a `key=value` file. Blank lines and `#` comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Invalid(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).unwrap_or_default()))
            .collect()
    }
}

/// Margin for one window: 0 when both documents hold the same token
/// sequences in every slot, `tau` otherwise.
pub fn adaptive_margin(pos_window: &[Vec<u32>], neg_window: &[Vec<u32>], tau: f64) -> f64 {
    if pos_window == neg_window {
        0.0
    } else {
        tau
    }
}

/// Margins of all `n` windows. Window `l` covers sentences `l..l+3`; slots
/// past the end are padding and compare equal.
pub fn window_margins(pos: &Document, neg: &Document, tau: f64) -> Result<Vec<f64>> {
    let n = pos.len();
    if neg.len() != n {
        return Err(Error::LengthMismatch { pos: n, neg: neg.len() });
    }
    Ok((0..n)
        .map(|l| {
            let end = (l + 3).min(n);
            adaptive_margin(&pos.sentences[l..end], &neg.sentences[l..end], tau)
        })
        .collect())
}

/// Mean over windows of `max(0, phi_l - y_pos[l] + y_neg[l])`.
pub fn pair_loss(s: &mut Session, pos: &Document, neg: &Document, tau: f64) -> Result<Var> {
    let phi = window_margins(pos, neg, tau)?;
    let n = phi.len();
    let y_pos = s.window_scores(pos)?;
    let y_neg = s.window_scores(neg)?;
    let diff = s.g.sub(y_neg, y_pos)?;
    let phi = s.g.constant(Tensor::vector(phi)?);
    let x = s.g.add(phi, diff)?;
    let hinge = s.g.relu(x);
    let total = s.g.sum(hinge);
    Ok(s.g.scale(total, 1.0 / n as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub rank: Var,
    /// Reduced LM loss of the positive document, when it contributes.
    pub lm: Option<Var>,
}

/// Ranking loss plus the weighted LM loss of the positive document.
pub fn total_loss(s: &mut Session, pos: &Document, neg: &Document, cfg: &TrainConfig) -> Result<LossParts> {
    let rank = pair_loss(s, pos, neg, cfg.tau)?;
    let weight = cfg.effective_lm_weight();
    if weight == 0.0 {
        return Ok(LossParts { total: rank, rank, lm: None });
    }
    let (sum, count) = s.lm_loss(pos)?;
    let lm = match cfg.lm_reduction {
        Reduction::Sum => sum,
        Reduction::Mean => s.g.scale(sum, 1.0 / count as f64),
    };
    let weighted = s.g.scale(lm, weight);
    let total = s.g.add(rank, weighted)?;
    Ok(LossParts { total, rank, lm: Some(lm) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub rank_loss: f64,
    pub lm_loss: f64,
    pub dev_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev_accuracy: Option<f64>,
    pub steps: usize,
    pub seconds: f64,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub rank_loss: f64,
    pub lm_loss: f64,
}

/// Optimizer state plus the per-step update.
pub struct Trainer {
    pub config: TrainConfig,
    adam: Adam,
    pub steps: usize,
}

impl Trainer {
    pub fn new(model: &CoherenceModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            &model.store,
            AdamConfig {
                lr: config.lr,
                l2: config.l2,
                ..AdamConfig::default()
            },
        );
        Ok(Trainer { config, adam, steps: 0 })
    }

    /// One optimizer update on the batch-averaged gradient of `batch`.
    pub fn step(&mut self, model: &mut CoherenceModel, batch: &[&PairSample<u32>], epoch: usize) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        model.store.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut stats = StepStats::default();
        for pair in batch {
            let mut g = Graph::new();
            let mut s = Session::new(&model.arch, &model.store, &mut g);
            let parts = total_loss(&mut s, &pair.pos, &pair.neg, &self.config)?;
            let total = g.item(parts.total)?;
            let rank = g.item(parts.rank)?;
            let lm = parts.lm.map(|v| g.item(v)).transpose()?.unwrap_or(0.0);
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: self.steps,
                    detail: format!("pair from {}: rank {rank}, lm {lm}", pair.source_doc_id),
                });
            }
            let grads = g.backward(parts.total)?;
            g.accumulate_param_grads(&grads, &mut model.store, scale)?;
            stats.rank_loss += rank * scale;
            stats.lm_loss += lm * scale;
        }
        self.adam.step(&mut model.store)?;
        self.steps += 1;
        Ok(stats)
    }
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the best dev accuracy (the last epoch when `dev` is empty).
pub fn train(
    model: &mut CoherenceModel,
    pairs: &[PairSample<u32>],
    dev: &[PairSample<u32>],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no training pairs".into()));
    }
    let start = Instant::now();
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut rng = substream(config.seed, "shuffle");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut best: Option<(usize, Option<f64>, ucoh_tensor::ParamStore)> = None;
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let (mut rank, mut lm, mut steps) = (0.0, 0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PairSample<u32>> = chunk.iter().map(|&i| &pairs[i]).collect();
            let st = trainer.step(model, &batch, epoch)?;
            rank += st.rank_loss * batch.len() as f64;
            lm += st.lm_loss * batch.len() as f64;
            steps += 1;
        }
        let dev_accuracy = if dev.is_empty() {
            None
        } else {
            Some(evaluate(model, dev, "dev")?.accuracy)
        };
        let record = EpochRecord {
            epoch,
            steps,
            rank_loss: rank / pairs.len() as f64,
            lm_loss: lm / pairs.len() as f64,
            dev_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: rank {:.4} lm {:.4} dev {:?}",
            record.rank_loss,
            record.lm_loss,
            record.dev_accuracy
        );
        on_epoch(&record);
        records.push(record);

        let improved = match (&best, dev_accuracy) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some((_, Some(b), _)), Some(a)) => a > *b,
            (Some((_, None, _)), Some(_)) => true,
        };
        if improved {
            best = Some((epoch, dev_accuracy, model.store.clone()));
        }
    }

    let (best_epoch, best_dev_accuracy, store) = best.expect("at least one epoch ran");
    model.store = store;
    model.store.zero_grads();
    Ok(TrainReport {
        epochs: records,
        best_epoch,
        best_dev_accuracy,
        steps: trainer.steps,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub stddev: f64,
}

impl MetricSummary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MetricSummary { values, mean, stddev }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<BTreeMap<String, f64>>,
    pub summary: BTreeMap<String, MetricSummary>,
}

/// Runs `run` once per seed and summarizes every metric it reports.
pub fn multi_seed<F>(seeds: &[u64], mut run: F) -> Result<MultiSeedReport>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if seeds.len() < 2 {
        return Err(Error::Invalid("multi-seed runs need at least two seeds".into()));
    }
    let runs = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    let mut summary = BTreeMap::new();
    for key in runs[0].keys() {
        let values = runs
            .iter()
            .map(|r| {
                r.get(key)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("metric `{key}` missing from a run")))
            })
            .collect::<Result<Vec<_>>>()?;
        summary.insert(key.clone(), MetricSummary::new(values));
    }
    Ok(MultiSeedReport {
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Doc;

    #[test]
    fn margin_cases() {
        let a = vec![vec![1, 2], vec![3], vec![4]];
        let mut b = a.clone();
        assert_eq!(adaptive_margin(&a, &b, 1.5), 0.0);
        b[1] = vec![9];
        assert_eq!(adaptive_margin(&a, &b, 1.5), 1.5);
        let rotated = vec![a[1].clone(), a[2].clone(), a[0].clone()];
        assert_eq!(adaptive_margin(&a, &rotated, 1.5), 1.5);
    }

    #[test]
    fn margins_with_padding() {
        let pos = Doc::new("d", vec![vec![4], vec![5], vec![6], vec![7]]);
        let neg = Doc::new("d", vec![vec![4], vec![5], vec![7], vec![6]]);
        assert_eq!(window_margins(&pos, &neg, 1.0).unwrap(), [1.0, 1.0, 1.0, 1.0]);
        let neg = Doc::new("d", vec![vec![5], vec![4], vec![6], vec![7]]);
        assert_eq!(window_margins(&pos, &neg, 1.0).unwrap(), [1.0, 1.0, 0.0, 0.0]);
        let short = Doc::new("d", vec![vec![4]]);
        assert!(matches!(window_margins(&pos, &short, 1.0), Err(Error::LengthMismatch { pos: 4, neg: 1 })));
    }

    #[test]
    fn config_kv_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_kv("# comment\ntau = 0.5\nbatch_size=10\nuse_lm=false\nlm_reduction=sum\n").unwrap();
        assert_eq!((c.tau, c.batch_size, c.use_lm, c.lm_reduction), (0.5, 10, false, Reduction::Sum));
        let mut d = TrainConfig::default();
        d.apply_kv(&c.to_kv()).unwrap();
        assert_eq!(c, d);
        assert!(c.apply_kv("nope=1").is_err());
        assert!(c.apply_kv("tau").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig { batch_size: 7, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { tau: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { k: 4, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_summaries() {
        let s = MetricSummary::new(vec![0.8, 0.9]);
        assert!((s.mean - 0.85).abs() < 1e-12);
        assert_eq!(MetricSummary::new(vec![0.7; 5]).stddev, 0.0);
        let r = multi_seed(&[1, 2], |s| Ok(BTreeMap::from([("acc".to_string(), if s == 1 { 0.8 } else { 0.9 })]))).unwrap();
        assert!((r.summary["acc"].mean - 0.85).abs() < 1e-12);
        assert!(multi_seed(&[1], |_| Ok(BTreeMap::new())).is_err());
    }
}
