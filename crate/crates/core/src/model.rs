//! The full coherence model: parameters, vocabulary, per-graph sessions and
//! checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use ucoh_tensor::{Checkpoint, Graph, ParamStore, Var};

use crate::corpus::{Document, EmbeddingTable, Vocab};
use crate::encoder::{encode_sentence, sentence_lm_loss, EncoderDims, EncoderIds, EncoderVars, SentenceRep};
use crate::error::{Error, Result};
use crate::net::{doc_score, window_scores, KernelNorm, NetDims, NetIds, NetVars};
use crate::permgen::Task;
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_emb: usize,
    /// LSTM hidden size `p`; sentence representations have width `2p`.
    pub hidden: usize,
    pub q: usize,
    pub k: usize,
    pub groups: usize,
    pub layers: usize,
    pub use_global: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 100,
            hidden: 128,
            q: 64,
            k: 5,
            groups: 16,
            layers: 6,
            use_global: true,
        }
    }
}

impl ModelConfig {
    pub fn net_dims(&self) -> NetDims {
        NetDims {
            d: 2 * self.hidden,
            q: self.q,
            k: self.k,
            groups: self.groups,
            layers: self.layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.hidden == 0 {
            return Err(Error::Invalid("d_emb and hidden must be positive".into()));
        }
        self.net_dims().validate()
    }
}

/// Parameter layout of a model, independent of the values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub enc: EncoderIds,
    pub net: NetIds,
}

#[derive(Clone, Debug)]
pub struct CoherenceModel {
    pub arch: Architecture,
    pub vocab: Vocab,
    pub store: ParamStore,
    /// Task the parameters were trained on, if any.
    pub provenance: Option<Task>,
    /// Free-form entries echoed into checkpoints, e.g. the training config.
    pub metadata: BTreeMap<String, String>,
}

const META_CONFIG: &str = "model.config";
const META_VOCAB: &str = "vocab";
const META_VOCAB_HASH: &str = "vocab.hash";
const META_VOCAB_MIN_FREQ: &str = "vocab.min_freq";
const META_PROVENANCE: &str = "provenance";

impl CoherenceModel {
    /// Fresh parameters drawn from the `init` substream of `seed`. Without
    /// `embeddings` the table is random.
    pub fn new(config: ModelConfig, vocab: Vocab, embeddings: Option<EmbeddingTable>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let embeddings = match embeddings {
            Some(e) => e,
            None => EmbeddingTable::random(vocab.len(), config.d_emb, &mut rng)?,
        };
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            vocab_size: vocab.len(),
            d_emb: config.d_emb,
            hidden: config.hidden,
        };
        let enc = EncoderIds::init(&mut store, dims, embeddings, &mut rng)?;
        let net = NetIds::init(&mut store, config.net_dims(), &mut rng)?;
        Ok(CoherenceModel {
            arch: Architecture { config, enc, net },
            vocab,
            store,
            provenance: None,
            metadata: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Window scores `y_1 .. y_n` of `doc`.
    pub fn window_scores(&self, doc: &Document) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut s = Session::new(&self.arch, &self.store, &mut g);
        let y = s.window_scores(doc)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn score(&self, doc: &Document) -> Result<f64> {
        Ok(doc_score(&self.window_scores(doc)?))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.store.clone());
        ckpt.metadata = self.metadata.clone();
        let config = serde_json::to_string(&self.arch.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.metadata.insert(META_CONFIG.into(), config);
        ckpt.metadata.insert(META_VOCAB.into(), self.vocab.to_text());
        ckpt.metadata.insert(META_VOCAB_HASH.into(), self.vocab.hash());
        ckpt.metadata.insert(META_VOCAB_MIN_FREQ.into(), self.vocab.min_freq().to_string());
        if let Some(task) = self.provenance {
            ckpt.metadata.insert(META_PROVENANCE.into(), task.to_string());
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut metadata = ckpt.metadata;
        let take = |m: &mut BTreeMap<String, String>, key: &str| {
            m.remove(key).ok_or_else(|| Error::Checkpoint(format!("missing `{key}` entry")))
        };
        let config: ModelConfig =
            serde_json::from_str(&take(&mut metadata, META_CONFIG)?).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        config.validate()?;
        let vocab = Vocab::from_text(&take(&mut metadata, META_VOCAB)?)?;
        let min_freq = match metadata.remove(META_VOCAB_MIN_FREQ) {
            Some(v) => v.parse().map_err(|_| Error::Checkpoint(format!("bad min_freq `{v}`")))?,
            None => vocab.min_freq(),
        };
        let vocab = Vocab::from_tokens(vocab.tokens().to_vec(), min_freq);
        let hash = take(&mut metadata, META_VOCAB_HASH)?;
        if hash != vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: hash,
                found: vocab.hash(),
            });
        }
        let provenance = metadata.remove(META_PROVENANCE).map(|t| t.parse()).transpose()?;
        let store = ckpt.params;
        let dims = EncoderDims {
            vocab_size: vocab.len(),
            d_emb: config.d_emb,
            hidden: config.hidden,
        };
        let enc = EncoderIds::bind(&store, dims)?;
        let net = NetIds::bind(&store, config.net_dims())?;
        Ok(CoherenceModel {
            arch: Architecture { config, enc, net },
            vocab,
            store,
            provenance,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// One graph's worth of model evaluation. Every distinct sentence is
/// encoded once per session, so a positive and a negative document built
/// from the same sentences share their encoder work.
pub struct Session<'a> {
    pub arch: &'a Architecture,
    pub g: &'a mut Graph,
    pub enc: EncoderVars,
    pub net: NetVars,
    pub norm: KernelNorm,
    reps: HashMap<Vec<u32>, SentenceRep>,
    lm: HashMap<Vec<u32>, (Var, usize)>,
}

impl<'a> Session<'a> {
    pub fn new(arch: &'a Architecture, store: &ParamStore, g: &'a mut Graph) -> Self {
        let enc = arch.enc.vars(g, store);
        let net = arch.net.vars(g, store);
        Session {
            arch,
            g,
            enc,
            net,
            norm: KernelNorm::Softmax,
            reps: HashMap::new(),
            lm: HashMap::new(),
        }
    }

    pub fn sentence(&mut self, tokens: &[u32]) -> Result<&SentenceRep> {
        if !self.reps.contains_key(tokens) {
            let rep = encode_sentence(self.g, &self.enc, tokens)?;
            self.reps.insert(tokens.to_vec(), rep);
        }
        Ok(&self.reps[tokens])
    }

    /// `n x 2p` matrix of sentence representations.
    pub fn sentence_matrix(&mut self, doc: &Document) -> Result<Var> {
        if doc.is_empty() {
            return Err(Error::Invalid(format!("document {} has no sentences", doc.doc_id)));
        }
        let mut rows = Vec::with_capacity(doc.len());
        for s in &doc.sentences {
            rows.push(self.sentence(s)?.h);
        }
        Ok(self.g.concat(&rows, 0)?)
    }

    /// Window scores as an `[n]` vector.
    pub fn window_scores(&mut self, doc: &Document) -> Result<Var> {
        let h = self.sentence_matrix(doc)?;
        window_scores(self.g, h, &self.net, self.arch.config.use_global, self.norm)
    }

    /// Summed language-model loss of `doc` and its number of predictions.
    pub fn lm_loss(&mut self, doc: &Document) -> Result<(Var, usize)> {
        let mut terms = Vec::with_capacity(doc.len());
        let mut count = 0;
        for s in &doc.sentences {
            let (v, c) = match self.lm.get(s.as_slice()) {
                Some(&hit) => hit,
                None => {
                    let rep = self.sentence(s)?.clone();
                    let out = sentence_lm_loss(self.g, &self.enc, &rep)?;
                    self.lm.insert(s.clone(), out);
                    out
                }
            };
            terms.push(v);
            count += c;
        }
        let first = *terms.first().ok_or_else(|| Error::Invalid("empty document".into()))?;
        let mut total = first;
        for &t in &terms[1..] {
            total = self.g.add(total, t)?;
        }
        Ok((total, count))
    }
}
