//! Bidirectional LSTM sentence encoder with per-direction language-model heads.

use rand::Rng;
use ucoh_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::corpus::{EmbeddingTable, BOS, EOS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub hidden: usize,
}

/// Parameter ids of one LSTM direction. Gate order is input, forget,
/// candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderIds {
    pub dims: EncoderDims,
    pub embed: ParamId,
    pub fwd: LstmIds,
    pub bwd: LstmIds,
    pub lm_fwd: HeadIds,
    pub lm_bwd: HeadIds,
}

impl EncoderIds {
    /// Registers freshly initialized encoder parameters under `encoder.`.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, dims: EncoderDims, embeddings: EmbeddingTable, rng: &mut R) -> Result<Self> {
        let EncoderDims { vocab_size, d_emb, hidden: p } = dims;
        if vocab_size == 0 || d_emb == 0 || p == 0 {
            return Err(Error::Invalid("encoder sizes must be positive".into()));
        }
        if embeddings.matrix.shape() != [vocab_size, d_emb] {
            return Err(Error::Invalid(format!(
                "embedding table is {:?}, expected [{vocab_size}, {d_emb}]",
                embeddings.matrix.shape()
            )));
        }
        let trainable = embeddings.trainable;
        let embed = store.add("encoder.embed", embeddings.matrix)?;
        store.get_mut(embed).set_requires_grad(trainable);

        let r = 1.0 / (p as f64).sqrt();
        let lstm = |store: &mut ParamStore, dir: &str, rng: &mut R| -> Result<LstmIds> {
            let w_ih = store.add(format!("encoder.{dir}.w_ih"), Tensor::uniform(&[d_emb, 4 * p], -r, r, rng)?)?;
            let w_hh = store.add(format!("encoder.{dir}.w_hh"), Tensor::uniform(&[p, 4 * p], -r, r, rng)?)?;
            let mut b = Tensor::uniform(&[4 * p], -r, r, rng)?;
            for v in &mut b.data_mut()[p..2 * p] {
                *v = 1.0;
            }
            let bias = store.add(format!("encoder.{dir}.bias"), b)?;
            Ok(LstmIds { w_ih, w_hh, bias })
        };
        let fwd = lstm(store, "fwd", rng)?;
        let bwd = lstm(store, "bwd", rng)?;

        let head = |store: &mut ParamStore, dir: &str, rng: &mut R| -> Result<HeadIds> {
            let weight = store.add(format!("encoder.lm_{dir}.weight"), Tensor::uniform(&[p, vocab_size], -r, r, rng)?)?;
            let bias = store.add(format!("encoder.lm_{dir}.bias"), Tensor::zeros(&[vocab_size])?)?;
            Ok(HeadIds { weight, bias })
        };
        let lm_fwd = head(store, "fwd", rng)?;
        let lm_bwd = head(store, "bwd", rng)?;
        Ok(EncoderIds { dims, embed, fwd, bwd, lm_fwd, lm_bwd })
    }

    /// Looks up existing `encoder.` parameters, e.g. after loading a checkpoint.
    pub fn bind(store: &ParamStore, dims: EncoderDims) -> Result<Self> {
        let lstm = |dir: &str| -> Result<LstmIds> {
            Ok(LstmIds {
                w_ih: store.id(&format!("encoder.{dir}.w_ih"))?,
                w_hh: store.id(&format!("encoder.{dir}.w_hh"))?,
                bias: store.id(&format!("encoder.{dir}.bias"))?,
            })
        };
        let head = |dir: &str| -> Result<HeadIds> {
            Ok(HeadIds {
                weight: store.id(&format!("encoder.lm_{dir}.weight"))?,
                bias: store.id(&format!("encoder.lm_{dir}.bias"))?,
            })
        };
        let ids = EncoderIds {
            dims,
            embed: store.id("encoder.embed")?,
            fwd: lstm("fwd")?,
            bwd: lstm("bwd")?,
            lm_fwd: head("fwd")?,
            lm_bwd: head("bwd")?,
        };
        let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
            if store.get(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, expected {shape:?}",
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            Ok(())
        };
        let EncoderDims { vocab_size: v, d_emb: d, hidden: p } = dims;
        expect(ids.embed, &[v, d])?;
        for l in [ids.fwd, ids.bwd] {
            expect(l.w_ih, &[d, 4 * p])?;
            expect(l.w_hh, &[p, 4 * p])?;
            expect(l.bias, &[4 * p])?;
        }
        for h in [ids.lm_fwd, ids.lm_bwd] {
            expect(h.weight, &[p, v])?;
            expect(h.bias, &[v])?;
        }
        Ok(ids)
    }

    /// Binds every encoder parameter into `g` once.
    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> EncoderVars {
        let mut lstm = |l: LstmIds| LstmVars {
            w_ih: g.param(store, l.w_ih),
            w_hh: g.param(store, l.w_hh),
            bias: g.param(store, l.bias),
        };
        let fwd = lstm(self.fwd);
        let bwd = lstm(self.bwd);
        let mut head = |h: HeadIds| HeadVars {
            weight: g.param(store, h.weight),
            bias: g.param(store, h.bias),
        };
        let lm_fwd = head(self.lm_fwd);
        let lm_bwd = head(self.lm_bwd);
        EncoderVars {
            dims: self.dims,
            embed: g.param(store, self.embed),
            fwd,
            bwd,
            lm_fwd,
            lm_bwd,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Encoder parameters bound into one graph.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub dims: EncoderDims,
    pub embed: Var,
    pub fwd: LstmVars,
    pub bwd: LstmVars,
    pub lm_fwd: HeadVars,
    pub lm_bwd: HeadVars,
}

/// Encoding of one sentence `<bos> w_1 .. w_m <eos>`.
#[derive(Clone, Debug)]
pub struct SentenceRep {
    /// `1 x 2p`: last forward state next to last backward state.
    pub h: Var,
    /// `fwd[t]` is the forward state after reading input position `t`.
    pub fwd: Vec<Var>,
    /// `bwd[t]` is the backward state after reading input position `t`.
    pub bwd: Vec<Var>,
    pub tokens: Vec<u32>,
}

fn lstm_run(g: &mut Graph, l: &LstmVars, x: Var, p: usize, reverse: bool) -> Result<Vec<Var>> {
    let steps = g.shape(x)[0];
    let xw = g.matmul(x, l.w_ih)?;
    let pre = g.add_row_bias(xw, l.bias)?;
    let zero = Tensor::zeros(&[1, p])?;
    let mut h = g.constant(zero.clone());
    let mut c = g.constant(zero);
    let mut states = vec![h; steps];
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let xt = g.slice(pre, 0, t, t + 1)?;
        let hw = g.matmul(h, l.w_hh)?;
        let z = g.add(xt, hw)?;
        let zi = g.slice(z, 1, 0, p)?;
        let zf = g.slice(z, 1, p, 2 * p)?;
        let zg = g.slice(z, 1, 2 * p, 3 * p)?;
        let zo = g.slice(z, 1, 3 * p, 4 * p)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        states[t] = h;
    }
    Ok(states)
}

/// Runs both LSTM directions over `<bos> tokens <eos>`.
pub fn encode_sentence(g: &mut Graph, enc: &EncoderVars, tokens: &[u32]) -> Result<SentenceRep> {
    if tokens.is_empty() {
        return Err(Error::EmptySentence);
    }
    let v = enc.dims.vocab_size;
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(BOS as usize);
    for &t in tokens {
        if t as usize >= v {
            return Err(Error::TokenOutOfRange { id: t, size: v });
        }
        ids.push(t as usize);
    }
    ids.push(EOS as usize);
    let x = g.gather_rows(enc.embed, &ids)?;
    let p = enc.dims.hidden;
    let fwd = lstm_run(g, &enc.fwd, x, p, false)?;
    let bwd = lstm_run(g, &enc.bwd, x, p, true)?;
    let h = g.concat(&[fwd[ids.len() - 1], bwd[0]], 1)?;
    Ok(SentenceRep {
        h,
        fwd,
        bwd,
        tokens: tokens.to_vec(),
    })
}

/// Summed negative log-likelihood of the sentence under both LM heads: the
/// forward head predicts `w_j` from the forward state at `j - 1`, the
/// backward head from the backward state at `j + 1`. Returns the loss and
/// the number of predictions (`2m`).
pub fn sentence_lm_loss(g: &mut Graph, enc: &EncoderVars, rep: &SentenceRep) -> Result<(Var, usize)> {
    let m = rep.tokens.len();
    let targets: Vec<usize> = rep.tokens.iter().map(|&t| t as usize).collect();
    let head = |g: &mut Graph, states: &[Var], h: &HeadVars| -> Result<Var> {
        let s = g.concat(states, 0)?;
        let logits = g.matmul(s, h.weight)?;
        let logits = g.add_row_bias(logits, h.bias)?;
        let logp = g.log_softmax(logits, 1)?;
        let picked = g.pick(logp, &targets)?;
        Ok(g.sum(picked))
    };
    let f = head(g, &rep.fwd[0..m], &enc.lm_fwd)?;
    let b = head(g, &rep.bwd[2..m + 2], &enc.lm_bwd)?;
    let ll = g.add(f, b)?;
    Ok((g.scale(ll, -1.0), 2 * m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(v: usize, d: usize, p: usize) -> (ParamStore, EncoderIds) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let dims = EncoderDims { vocab_size: v, d_emb: d, hidden: p };
        let table = EmbeddingTable::random(v, d, &mut rng).unwrap();
        let ids = EncoderIds::init(&mut store, dims, table, &mut rng).unwrap();
        (store, ids)
    }

    #[test]
    fn rep_has_length_2p() {
        let (store, ids) = setup(10, 3, 4);
        let mut g = Graph::new();
        let vars = ids.vars(&mut g, &store);
        let rep = encode_sentence(&mut g, &vars, &[5]).unwrap();
        assert_eq!(g.shape(rep.h), [1, 8]);
        let again = encode_sentence(&mut g, &vars, &[5]).unwrap();
        assert_eq!(g.value(rep.h).data(), g.value(again.h).data());
    }

    #[test]
    fn zero_parameters_give_zero_rep() {
        let (mut store, ids) = setup(10, 3, 4);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let vars = ids.vars(&mut g, &store);
        let rep = encode_sentence(&mut g, &vars, &[4, 7, 9]).unwrap();
        assert!(g.value(rep.h).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_heads_give_2m_log_v() {
        let (mut store, ids) = setup(10, 3, 4);
        for h in [ids.lm_fwd, ids.lm_bwd] {
            store.get_mut(h.weight).data_mut().fill(0.0);
            store.get_mut(h.bias).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let vars = ids.vars(&mut g, &store);
        let rep = encode_sentence(&mut g, &vars, &[4, 5, 6, 7]).unwrap();
        let (loss, count) = sentence_lm_loss(&mut g, &vars, &rep).unwrap();
        assert_eq!(count, 8);
        assert!((g.item(loss).unwrap() - 8.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_heads_give_zero_loss() {
        // A huge bias on the only real token makes both heads certain.
        let (mut store, ids) = setup(5, 3, 2);
        for h in [ids.lm_fwd, ids.lm_bwd] {
            store.get_mut(h.weight).data_mut().fill(0.0);
            store.get_mut(h.bias).data_mut()[4] = 1e3;
        }
        let mut g = Graph::new();
        let vars = ids.vars(&mut g, &store);
        let rep = encode_sentence(&mut g, &vars, &[4, 4]).unwrap();
        let (loss, _) = sentence_lm_loss(&mut g, &vars, &rep).unwrap();
        assert!(g.item(loss).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        let (store, ids) = setup(10, 3, 4);
        let mut g = Graph::new();
        let vars = ids.vars(&mut g, &store);
        assert!(matches!(encode_sentence(&mut g, &vars, &[]), Err(Error::EmptySentence)));
        assert!(matches!(
            encode_sentence(&mut g, &vars, &[10]),
            Err(Error::TokenOutOfRange { id: 10, size: 10 })
        ));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let (store, ids) = setup(10, 3, 4);
        assert!(store.get(ids.fwd.bias).data()[4..8].iter().all(|&b| b == 1.0));
    }
}
