use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::nn::layers::{LayerNorm, Linear, Mlp};
use crate::nn::{decode_checkpoint, encode_checkpoint, Graph, ParamId, ParameterSet, Tensor, Var};
use crate::rng::stream;
use crate::{Error, Result};

use super::vocab::{ConstraintTrie, SidVocab};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub mlp_hidden: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { d_model: 64, layers: 2, heads: 4, context: 64, mlp_hidden: 256, init_std: 0.1, seed: 21 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.context < 4 || self.mlp_hidden == 0 {
            return Err(Error::Config("context must hold a prompt and a SID".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        alloc::vec![
            ("d_model", format!("{}", self.d_model)),
            ("layers", format!("{}", self.layers)),
            ("heads", format!("{}", self.heads)),
            ("context", format!("{}", self.context)),
            ("mlp_hidden", format!("{}", self.mlp_hidden)),
            ("init_std", format!("{}", self.init_std)),
            ("seed", format!("{}", self.seed)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        match key {
            "d_model" => self.d_model = p(key, value)?,
            "layers" => self.layers = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "context" => self.context = p(key, value)?,
            "mlp_hidden" => self.mlp_hidden = p(key, value)?,
            "init_std" => self.init_std = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Normalization used when turning logits into SID token log-probabilities.
#[derive(Debug, Clone, Copy)]
pub enum Norm<'a> {
    /// Softmax over the full vocabulary.
    Full,
    /// Softmax over the positional vocabulary of the level being predicted.
    Level,
    /// Softmax over the trie children of the current prefix.
    Trie(&'a ConstraintTrie),
}

/// Pre-LN causal decoder with learned positions and an untied output head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub vocab: SidVocab,
    pub params: ParameterSet,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl PolicyModel {
    pub fn new(config: &PolicyConfig, vocab: SidVocab) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, "policy.init");
        let mut params = ParameterSet::new();
        let d = config.d_model;
        params.add("tok_emb", Tensor::randn(vocab.size(), d, config.init_std, &mut rng))?;
        params.add("pos_emb", Tensor::randn(config.context, d, config.init_std, &mut rng))?;
        for l in 0..config.layers {
            LayerNorm::new(&mut params, &format!("block{l}.ln1"), d)?;
            Linear::new(&mut params, &format!("block{l}.qkv"), d, 3 * d, &mut rng)?;
            Linear::new(&mut params, &format!("block{l}.proj"), d, d, &mut rng)?;
            LayerNorm::new(&mut params, &format!("block{l}.ln2"), d)?;
            Mlp::new(&mut params, &format!("block{l}.mlp"), &[d, config.mlp_hidden, d], &mut rng)?;
        }
        LayerNorm::new(&mut params, "ln_f", d)?;
        Linear::new(&mut params, "head", d, vocab.size(), &mut rng)?;
        Self::bind(config.clone(), vocab, params)
    }

    fn bind(config: PolicyConfig, vocab: SidVocab, params: ParameterSet) -> Result<Self> {
        let blocks = (0..config.layers)
            .map(|l| {
                Ok(Block {
                    ln1: LayerNorm::bind(&params, &format!("block{l}.ln1"))?,
                    qkv: Linear::bind(&params, &format!("block{l}.qkv"))?,
                    proj: Linear::bind(&params, &format!("block{l}.proj"))?,
                    ln2: LayerNorm::bind(&params, &format!("block{l}.ln2"))?,
                    mlp: Mlp::bind(&params, &format!("block{l}.mlp"), 2)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok: params.id("tok_emb")?,
            pos: params.id("pos_emb")?,
            ln_f: LayerNorm::bind(&params, "ln_f")?,
            head: Linear::bind(&params, "head")?,
            blocks,
            config,
            vocab,
            params,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// Final hidden states of packed sequences, `sum(len) x d_model`.
    pub fn hidden(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        let v = self.vocab.size();
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() || s.len() > self.config.context {
                return Err(Error::shape("policy", format!("sequence length {} for context {}", s.len(), self.config.context)));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= v) {
                return Err(Error::UnknownToken(format!("token id {bad} of {v}")));
            }
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            lens.push(s.len());
        }
        let tok = g.param(self.tok);
        let pos = g.param(self.pos);
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(pos, &positions)?;
        let mut h = g.add(te, pe)?;
        for b in &self.blocks {
            let a = b.ln1.forward(g, h)?;
            let qkv = b.qkv.forward(g, a)?;
            let att = g.causal_attention(qkv, self.config.heads, &lens)?;
            let o = b.proj.forward(g, att)?;
            h = g.add(h, o)?;
            let m = b.ln2.forward(g, h)?;
            let m = b.mlp.forward(g, m)?;
            h = g.add(h, m)?;
        }
        self.ln_f.forward(g, h)
    }

    /// Logits at the given packed rows.
    pub fn logits_at(&self, g: &mut Graph, seqs: &[&[usize]], rows: &[usize]) -> Result<Var> {
        let h = self.hidden(g, seqs)?;
        let sel = g.gather_rows(h, rows)?;
        self.head.forward(g, sel)
    }

    /// Logits at every packed row.
    pub fn logits_all(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        let h = self.hidden(g, seqs)?;
        self.head.forward(g, h)
    }

    /// Next-token logits after each sequence.
    pub fn next_logits(&self, seqs: &[&[usize]]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(seqs.len());
        let mut end = 0;
        for s in seqs {
            end += s.len();
            rows.push(end - 1);
        }
        let mut g = Graph::with_params(&self.params);
        let l = self.logits_at(&mut g, seqs, &rows)?;
        Ok(g.value(l).clone())
    }

    /// Allowed classes for predicting level `l` after `prefix`.
    pub(crate) fn allowed(&self, norm: Norm, l: usize, prefix: &[usize]) -> Result<Option<Vec<usize>>> {
        Ok(match norm {
            Norm::Full => None,
            Norm::Level => Some(self.vocab.level_range(l).collect()),
            Norm::Trie(t) => {
                let c = t.children(&prefix[..l]);
                if c.is_empty() {
                    return Err(Error::Invalid("SID prefix is not in the trie".into()));
                }
                Some(c.to_vec())
            }
        })
    }

    /// Teacher-forced log-probabilities of `sid` after `prompt` for each pair,
    /// as an `n x 1` column on `g`.
    pub fn logprob_graph(&self, g: &mut Graph, batch: &[(&[usize], [usize; 3])], norm: Norm) -> Result<Var> {
        let seqs: Vec<Vec<usize>> = batch
            .iter()
            .map(|(p, s)| {
                let mut v = p.to_vec();
                v.extend_from_slice(&s[..2]);
                v
            })
            .collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let mut rows = Vec::with_capacity(3 * batch.len());
        let mut targets = Vec::with_capacity(3 * batch.len());
        let mut allowed = Vec::with_capacity(3 * batch.len());
        let mut offset = 0;
        for ((p, sid), seq) in batch.iter().zip(&seqs) {
            if p.is_empty() {
                return Err(Error::Empty("prompt".into()));
            }
            for l in 0..3 {
                if sid[l] >= self.vocab.size() {
                    return Err(Error::UnknownToken(format!("token id {}", sid[l])));
                }
                rows.push(offset + p.len() - 1 + l);
                targets.push(sid[l]);
                if let Some(a) = self.allowed(norm, l, sid)? {
                    allowed.push(a);
                }
            }
            offset += seq.len();
        }
        let logits = self.logits_at(g, &refs, &rows)?;
        let allowed = (!matches!(norm, Norm::Full)).then_some(allowed);
        let picked = g.log_softmax_pick(logits, &targets, allowed)?;
        g.segment_sum(picked, &alloc::vec![3; batch.len()])
    }

    /// Numeric values of [`logprob_graph`](Self::logprob_graph).
    pub fn batch_logprobs(&self, batch: &[(&[usize], [usize; 3])], norm: Norm) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::with_params(&self.params);
        let v = self.logprob_graph(&mut g, batch, norm)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in self.config.to_pairs() {
            meta.push_str(&format!("policy.{k} = {v}\n"));
        }
        meta.push_str(&self.vocab.to_metadata());
        encode_checkpoint(&self.params, &meta)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = decode_checkpoint(bytes)?;
        let mut kv = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{line}`")))?;
            kv.insert(String::from(k.trim()), String::from(v.trim()));
        }
        let mut config = PolicyConfig::default();
        for (k, v) in &kv {
            if let Some(key) = k.strip_prefix("policy.") {
                config.set(key, v)?;
            }
        }
        let vocab = SidVocab::from_metadata(&kv)?;
        let fresh = Self::new(&config, vocab.clone())?;
        let mut p = fresh.params.clone();
        p.copy_values_from(&params)
            .map_err(|e| Error::Checkpoint(format!("policy parameters do not match: {e}")))?;
        Self::bind(config, vocab, p)
    }
}
