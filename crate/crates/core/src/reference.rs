//! Direct nested-loop evaluation of the model, written index by index from
//! the defining formulas. Slow; used only to cross-check the graph code.

use crate::corpus::{Document, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::CoherenceModel;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Lstm<'a> {
    w_ih: &'a [f64],
    w_hh: &'a [f64],
    bias: &'a [f64],
    d: usize,
    p: usize,
}

impl Lstm<'_> {
    fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.p;
        let mut z = vec![0.0; 4 * p];
        for (col, zc) in z.iter_mut().enumerate() {
            let mut acc = self.bias[col];
            for a in 0..self.d {
                acc += x[a] * self.w_ih[a * 4 * p + col];
            }
            for a in 0..p {
                acc += h[a] * self.w_hh[a * 4 * p + col];
            }
            *zc = acc;
        }
        let mut h2 = vec![0.0; p];
        let mut c2 = vec![0.0; p];
        for j in 0..p {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[p + j]);
            let g = z[2 * p + j].tanh();
            let o = sigmoid(z[3 * p + j]);
            c2[j] = f * c[j] + i * g;
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }
}

struct Weights<'a> {
    m: &'a CoherenceModel,
}

impl<'a> Weights<'a> {
    fn get(&self, id: ucoh_tensor::ParamId) -> &'a [f64] {
        self.m.store.get(id).data()
    }

    fn lstm(&self, ids: crate::encoder::LstmIds) -> Lstm<'a> {
        let c = self.m.config();
        Lstm {
            w_ih: self.get(ids.w_ih),
            w_hh: self.get(ids.w_hh),
            bias: self.get(ids.bias),
            d: c.d_emb,
            p: c.hidden,
        }
    }

    fn embed(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let v = self.m.vocab.len();
        let d = self.m.config().d_emb;
        let table = self.get(self.m.arch.enc.embed);
        let mut seq = vec![BOS];
        seq.extend_from_slice(tokens);
        seq.push(EOS);
        seq.iter()
            .map(|&t| {
                if t as usize >= v {
                    return Err(Error::TokenOutOfRange { id: t, size: v });
                }
                Ok(table[t as usize * d..(t as usize + 1) * d].to_vec())
            })
            .collect()
    }

    /// Forward and backward hidden states for every input position.
    fn states(&self, tokens: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        let x = self.embed(tokens)?;
        let p = self.m.config().hidden;
        let t = x.len();
        let fwd_cell = self.lstm(self.m.arch.enc.fwd);
        let bwd_cell = self.lstm(self.m.arch.enc.bwd);
        let mut fwd = vec![vec![]; t];
        let (mut h, mut c) = (vec![0.0; p], vec![0.0; p]);
        for i in 0..t {
            (h, c) = fwd_cell.step(&x[i], &h, &c);
            fwd[i] = h.clone();
        }
        let mut bwd = vec![vec![]; t];
        let (mut h, mut c) = (vec![0.0; p], vec![0.0; p]);
        for i in (0..t).rev() {
            (h, c) = bwd_cell.step(&x[i], &h, &c);
            bwd[i] = h.clone();
        }
        Ok((fwd, bwd))
    }
}

/// `[last forward state; last backward state]`.
pub fn sentence_rep(model: &CoherenceModel, tokens: &[u32]) -> Result<Vec<f64>> {
    let (fwd, bwd) = Weights { m: model }.states(tokens)?;
    let mut h = fwd[fwd.len() - 1].clone();
    h.extend_from_slice(&bwd[0]);
    Ok(h)
}

/// Summed language-model negative log-likelihood of `doc`.
pub fn lm_loss(model: &CoherenceModel, doc: &Document) -> Result<f64> {
    let w = Weights { m: model };
    let v = model.vocab.len();
    let p = model.config().hidden;
    let nll = |state: &[f64], weight: &[f64], bias: &[f64], target: usize| -> f64 {
        let logits: Vec<f64> = (0..v)
            .map(|o| bias[o] + (0..p).map(|a| state[a] * weight[a * v + o]).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - logits[target]
    };
    let enc = &model.arch.enc;
    let (fw, fb) = (w.get(enc.lm_fwd.weight), w.get(enc.lm_fwd.bias));
    let (bw, bb) = (w.get(enc.lm_bwd.weight), w.get(enc.lm_bwd.bias));
    let mut total = 0.0;
    for s in &doc.sentences {
        let (fwd, bwd) = w.states(s)?;
        // Input position j + 1 holds token j (position 0 is <bos>).
        for (j, &tok) in s.iter().enumerate() {
            total += nll(&fwd[j], fw, fb, tok as usize);
            total += nll(&bwd[j + 2], bw, bb, tok as usize);
        }
    }
    Ok(total)
}

/// `O[i, c] = sum_{j=1..k} K[g(c), j] * H[i + j - ceil((k+1)/2), c]` with
/// 1-based `j`, `c` and `g(c) = ceil(c * G / d)`; `kernels` is `G x k`
/// already normalized.
pub fn lightweight_conv(h: &[Vec<f64>], kernels: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = h.len();
    let d = h[0].len();
    let groups = kernels.len();
    let k = kernels[0].len();
    let center = (k + 1).div_ceil(2) as isize;
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for c1 in 1..=d {
            let g1 = (c1 * groups).div_ceil(d);
            let mut acc = 0.0;
            for j1 in 1..=k {
                let src = i as isize + j1 as isize - center;
                if src >= 0 && (src as usize) < n {
                    acc += kernels[g1 - 1][j1 - 1] * h[src as usize][c1 - 1];
                }
            }
            out[i][c1 - 1] = acc;
        }
    }
    out
}

fn softmax_rows(raw: &[f64], groups: usize, k: usize) -> Vec<Vec<f64>> {
    (0..groups)
        .map(|g| {
            let row = &raw[g * k..(g + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Global document feature of sentence representations `h`.
pub fn global_features(model: &CoherenceModel, h: &[Vec<f64>]) -> Vec<f64> {
    let c = model.config();
    let mut x = h.to_vec();
    for &id in &model.arch.net.conv {
        let kernels = softmax_rows(model.store.get(id).data(), c.groups, c.k);
        let conv = lightweight_conv(&x, &kernels);
        for (row, crow) in x.iter_mut().zip(&conv) {
            for (v, cv) in row.iter_mut().zip(crow) {
                *v += cv.tanh();
            }
        }
    }
    let n = x.len() as f64;
    (0..x[0].len()).map(|col| x.iter().map(|r| r[col]).sum::<f64>() / n).collect()
}

/// Window scores computed from sentence representations.
pub fn window_scores_from_reps(model: &CoherenceModel, h: &[Vec<f64>]) -> Vec<f64> {
    let cfg = model.config();
    let (n, d, q) = (h.len(), 2 * cfg.hidden, cfg.q);
    let net = &model.arch.net;
    let wb = model.store.get(net.bilinear_weight).data();
    let bb = model.store.get(net.bilinear_bias).data();
    let wl = model.store.get(net.score_weight).data();
    let bl = model.store.get(net.score_bias).data()[0];

    let zero = vec![0.0; d];
    let rep = |i: usize| if i < n { &h[i] } else { &zero };
    let v: Vec<Vec<f64>> = (0..=n)
        .map(|i| {
            let (a, b) = (rep(i), rep(i + 1));
            (0..q)
                .map(|r| {
                    let mut acc = bb[r];
                    for x in 0..d {
                        for y in 0..d {
                            acc += a[x] * wb[(r * d + x) * d + y] * b[y];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let u = if cfg.use_global { global_features(model, h) } else { vec![0.0; d] };
    (0..n)
        .map(|i| {
            let z: Vec<f64> = v[i].iter().chain(&v[i + 1]).chain(&u).copied().collect();
            bl + z.iter().zip(wl).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

pub fn window_scores(model: &CoherenceModel, doc: &Document) -> Result<Vec<f64>> {
    let h = doc
        .sentences
        .iter()
        .map(|s| sentence_rep(model, s))
        .collect::<Result<Vec<_>>>()?;
    if h.is_empty() {
        return Err(Error::Invalid("empty document".into()));
    }
    Ok(window_scores_from_reps(model, &h))
}
