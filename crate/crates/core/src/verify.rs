//! Self-check suite: gradients, kernel normalization, parameter counts,
//! invariances, generator constraints and agreement with the nested-loop
//! reference.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use ucoh_tensor::{grad_check, GradCheckReport, Graph, Precision};

use crate::corpus::{Doc, Document, Vocab, SPECIALS};
use crate::error::{Error, Result};
use crate::model::{CoherenceModel, ModelConfig, Session};
use crate::net::{group_kernels, KernelNorm};
use crate::permgen::{check_pair, make_pairs, synthetic_corpus, DatasetSpec, Task};
use crate::reference;
use crate::rng::substream;
use crate::trainer::{pair_loss, total_loss, TrainConfig};

pub const GRAD_TOL: f64 = 1e-4;
pub const KERNEL_TOL: f64 = 1e-6;
pub const REFERENCE_TOL: f64 = 1e-12;
pub const LM_TOL: f64 = 1e-9;

/// Vocabulary of the specials plus `t0 .. t{n-5}`, `n` ids in total.
pub fn toy_vocab(size: usize) -> Vocab {
    let extra = size.saturating_sub(SPECIALS.len());
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain((0..extra).map(|i| format!("t{i}")))
        .collect();
    Vocab::from_tokens(tokens, 1)
}

/// Model with the sizes used by the gradient check: `p = 6`, `q = 4`,
/// `k = 3`, `G = 2`, `|V| = 20`, `d_emb = 8`.
pub fn check_model(seed: u64, use_global: bool) -> Result<CoherenceModel> {
    let config = ModelConfig {
        d_emb: 8,
        hidden: 6,
        q: 4,
        k: 3,
        groups: 2,
        layers: 6,
        use_global,
    };
    CoherenceModel::new(config, toy_vocab(20), None, seed)
}

/// Document of `n` sentences of 1 to `max_len` non-special tokens.
pub fn random_document<R: Rng + ?Sized>(rng: &mut R, n: usize, vocab_size: usize, max_len: usize) -> Document {
    let first = SPECIALS.len() as u32;
    let sentences = (0..n)
        .map(|_| {
            let m = rng.gen_range(1..=max_len);
            (0..m).map(|_| rng.gen_range(first..vocab_size as u32)).collect()
        })
        .collect();
    Doc::new("random", sentences)
}

/// A reordering of `doc` that differs from it (for `n >= 2` distinct sentences).
pub fn shuffled<R: Rng + ?Sized>(rng: &mut R, doc: &Document) -> Document {
    let mut out = doc.clone();
    if doc.len() < 2 {
        return out;
    }
    while out.sentences == doc.sentences {
        out.sentences.shuffle(rng);
        if doc.sentences.iter().all(|s| *s == doc.sentences[0]) {
            break;
        }
    }
    out
}

/// Finite-difference check of `total_loss` on `(pos, neg)` over every
/// parameter of `model`.
pub fn check_total_loss_gradient(
    model: &mut CoherenceModel,
    pos: &Document,
    neg: &Document,
    cfg: &TrainConfig,
    precision: Precision,
) -> Result<GradCheckReport> {
    let arch = model.arch.clone();
    let mut store = std::mem::take(&mut model.store);
    let report = grad_check(&mut store, 1e-5, precision, |g: &mut Graph, s| {
        let mut sess = Session::new(&arch, s, g);
        Ok::<_, Error>(total_loss(&mut sess, pos, neg, cfg)?.total)
    });
    model.store = store;
    report
}

/// Softmax-normalized kernels of every convolution layer, one `Vec` of
/// `G` rows per layer.
pub fn layer_kernels(model: &CoherenceModel, norm: KernelNorm) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = model.config().k;
    let mut g = Graph::new();
    model
        .arch
        .net
        .conv
        .iter()
        .map(|&id| {
            let w = g.param(&model.store, id);
            let kern = group_kernels(&mut g, w, norm)?;
            Ok(g.value(kern).data().chunks(k).map(<[f64]>::to_vec).collect())
        })
        .collect()
}

/// Largest deviation of a kernel row sum from 1; infinite when any tap is
/// not strictly positive.
pub fn kernel_sum_error(kernels: &[Vec<Vec<f64>>]) -> f64 {
    let mut worst: f64 = 0.0;
    for row in kernels.iter().flatten() {
        if row.iter().any(|&x| x <= 0.0) {
            return f64::INFINITY;
        }
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    worst
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub precision: Precision,
    /// Skip the kernel softmax, as a mutation that must be caught.
    pub corrupt_softmax: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

fn record(checks: &mut Vec<CheckResult>, name: &str, outcome: Result<(bool, String)>) {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    checks.push(CheckResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

pub fn run_suite(opts: &VerifyOptions) -> VerifyReport {
    let mut checks = Vec::new();
    let mut rng = substream(opts.seed, "verify");

    record(&mut checks, "gradient", (|| {
        let mut model = check_model(opts.seed, true)?;
        let pos = random_document(&mut rng, 3, 20, 4);
        let neg = shuffled(&mut rng, &pos);
        let cfg = TrainConfig::default();
        let report = check_total_loss_gradient(&mut model, &pos, &neg, &cfg, opts.precision)?;
        let err = report.max_rel_err();
        let worst = report.worst().map(|w| w.name.clone()).unwrap_or_default();
        Ok((err <= GRAD_TOL, format!("max rel-err {err:.3e} ({worst}), tolerance {GRAD_TOL:e}")))
    })());

    record(&mut checks, "kernel_normalization", (|| {
        let model = check_model(opts.seed, true)?;
        let norm = if opts.corrupt_softmax { KernelNorm::Unnormalized } else { KernelNorm::Softmax };
        let err = kernel_sum_error(&layer_kernels(&model, norm)?);
        Ok((err <= KERNEL_TOL, format!("max |sum - 1| = {err:.3e}")))
    })());

    record(&mut checks, "parameter_counts", (|| {
        let model = check_model(opts.seed, true)?;
        let dims = model.config().net_dims();
        let stored: usize = model.arch.net.conv.iter().map(|&id| model.store.get(id).numel()).sum();
        let (gk, dk, d2k) = (dims.groups * dims.k, dims.depthwise_param_count(), dims.full_conv_param_count());
        let ok = stored == 6 * gk && gk < dk && dk < d2k;
        Ok((ok, format!("conv weights {stored} = 6*{gk}; G*k {gk} < d*k {dk} < d^2*k {d2k}")))
    })());

    record(&mut checks, "lm_permutation_invariance", (|| {
        let model = check_model(opts.seed, true)?;
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let doc = random_document(&mut rng, 5, 20, 5);
            let perm = shuffled(&mut rng, &doc);
            let lm = |d: &Document| -> Result<f64> {
                let mut g = Graph::new();
                let mut s = Session::new(&model.arch, &model.store, &mut g);
                let (v, _) = s.lm_loss(d)?;
                Ok(g.item(v)?)
            };
            worst = worst.max((lm(&doc)? - lm(&perm)?).abs());
        }
        Ok((worst <= LM_TOL, format!("max |difference| {worst:.3e}")))
    })());

    record(&mut checks, "siamese_zero", (|| {
        let model = check_model(opts.seed, true)?;
        for _ in 0..10 {
            let n = rng.gen_range(1..6);
            let doc = random_document(&mut rng, n, 20, 5);
            let mut g = Graph::new();
            let mut s = Session::new(&model.arch, &model.store, &mut g);
            let l = pair_loss(&mut s, &doc, &doc, 1.0)?;
            let v = g.item(l)?;
            if v != 0.0 {
                return Ok((false, format!("pair_loss(D, D) = {v:e}")));
            }
        }
        Ok((true, "pair_loss(D, D) = 0 on 10 documents".into()))
    })());

    record(&mut checks, "generator_constraints", (|| {
        let docs = synthetic_corpus(12, 13, 60, opts.seed)?;
        let mut total = 0;
        for task in [Task::Global, Task::Inverse, Task::Local] {
            let spec = DatasetSpec::new(task, opts.seed).with_windows(&[1, 2, 3]);
            let set = make_pairs(&docs, &spec)?;
            for p in &set.pairs {
                check_pair(p, spec.window_size, Some(spec.min_sentences)).map_err(Error::Invalid)?;
            }
            total += set.pairs.len();
        }
        Ok((total > 0, format!("{total} pairs satisfy every constraint")))
    })());

    record(&mut checks, "reference_equivalence", (|| {
        let mut worst: f64 = 0.0;
        for (i, use_global) in [true, false].into_iter().enumerate() {
            let model = check_model(opts.seed + i as u64, use_global)?;
            let doc = random_document(&mut rng, 4, 20, 4);
            let fast = model.window_scores(&doc)?;
            let slow = reference::window_scores(&model, &doc)?;
            for (a, b) in fast.iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
            let mut g = Graph::new();
            let mut s = Session::new(&model.arch, &model.store, &mut g);
            let (lm, _) = s.lm_loss(&doc)?;
            let lm = g.item(lm)?;
            let lm_err = (lm - reference::lm_loss(&model, &doc)?).abs();
            if lm_err > LM_TOL {
                return Ok((false, format!("lm loss differs by {lm_err:.3e}")));
            }
        }
        Ok((worst <= REFERENCE_TOL, format!("max window-score difference {worst:.3e}")))
    })());

    VerifyReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let r = run_suite(&VerifyOptions::default());
        assert!(r.passed(), "{:#?}", r.checks);
    }

    #[test]
    fn corrupted_softmax_is_caught() {
        let r = run_suite(&VerifyOptions {
            corrupt_softmax: true,
            ..VerifyOptions::default()
        });
        assert_eq!(r.failed(), ["kernel_normalization"]);
    }

    #[test]
    fn reduced_precision_degrades_gradients() {
        let r = run_suite(&VerifyOptions {
            precision: Precision::F32,
            ..VerifyOptions::default()
        });
        assert_eq!(r.failed(), ["gradient"]);
    }
}
