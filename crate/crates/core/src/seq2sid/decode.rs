use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::nn::log_sum_exp;
use crate::sid_index::{SidKey, SidTrie};
use crate::{Error, Result};

use super::model::{Norm, PolicyModel};
use super::vocab::ConstraintTrie;

/// One decoded identifier with its total log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub sid: SidKey,
    pub tokens: [usize; 3],
    pub logprob: f64,
}

fn with_prefix(prompt: &[usize], prefix: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(prompt.len() + prefix.len());
    s.extend_from_slice(prompt);
    s.extend_from_slice(prefix);
    s
}

/// Log-probability of `token` among `allowed` (or the whole row) given logits.
fn token_logprob(logits: &[f64], allowed: Option<&[usize]>, token: usize) -> Result<f64> {
    let lse = match allowed {
        None => log_sum_exp(logits.iter().copied()),
        Some(a) => {
            if !a.contains(&token) {
                return Err(Error::Invalid(format!("token {token} is not an allowed continuation")));
            }
            log_sum_exp(a.iter().map(|&c| logits[c]))
        }
    };
    Ok(logits[token] - lse)
}

/// Sum of per-level token log-probabilities of `sid` after `prompt`, each
/// level scored from its own prefix forward pass.
pub fn sequence_logprob(model: &PolicyModel, prompt: &[usize], sid: [usize; 3], norm: Norm) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    let v = model.vocab_size();
    if let Some(&bad) = sid.iter().find(|&&t| t >= v) {
        return Err(Error::UnknownToken(format!("token id {bad} of {v}")));
    }
    let mut total = 0.0;
    for l in 0..3 {
        let seq = with_prefix(prompt, &sid[..l]);
        let logits = model.next_logits(&[&seq])?;
        let allowed = model.allowed(norm, l, &sid)?;
        total += token_logprob(logits.row_slice(0), allowed.as_deref(), sid[l])?;
    }
    Ok(total)
}

struct Node {
    score: f64,
    tokens: Vec<usize>,
}

impl Node {
    fn leaf(&self) -> bool {
        self.tokens.len() == 3
    }
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // max-heap: higher score first, then unfinished prefixes before leaves,
    // then the lexicographically smaller token sequence
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.leaf().cmp(&self.leaf()))
            .then_with(|| other.tokens.cmp(&self.tokens))
    }
}

/// Exact top-`beam` identifiers under trie-constrained decoding.
///
/// Step log-probabilities are non-positive, so a prefix's score bounds every
/// completion below it; expanding prefixes best-first and stopping after
/// `beam` leaves yields exactly the highest-scoring leaves, ordered by score
/// and then by identifier.
pub fn beam_search_with(model: &PolicyModel, prompt: &[usize], beam: usize, trie: &ConstraintTrie) -> Result<Vec<Beam>> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    let mut heap = BinaryHeap::new();
    heap.push(Node { score: 0.0, tokens: Vec::new() });
    let mut out = Vec::with_capacity(beam.min(trie.num_leaves()));
    while let Some(node) = heap.pop() {
        if node.leaf() {
            let tokens = [node.tokens[0], node.tokens[1], node.tokens[2]];
            out.push(Beam { sid: model.vocab.sid_from_tokens(tokens)?, tokens, logprob: node.score });
            if out.len() == beam {
                break;
            }
            continue;
        }
        let children = trie.children(&node.tokens);
        if children.is_empty() {
            continue;
        }
        let seq = with_prefix(prompt, &node.tokens);
        let logits = model.next_logits(&[&seq])?;
        let row = logits.row_slice(0);
        let lse = log_sum_exp(children.iter().map(|&c| row[c]));
        if !lse.is_finite() {
            return Err(Error::Divergence("non-finite logits during beam search".into()));
        }
        for &c in children {
            let mut tokens = node.tokens.clone();
            tokens.push(c);
            heap.push(Node { score: node.score + (row[c] - lse), tokens });
        }
    }
    Ok(out)
}

pub fn beam_search(model: &PolicyModel, prompt: &[usize], beam: usize, trie: &SidTrie) -> Result<Vec<Beam>> {
    let ct = ConstraintTrie::new(trie, &model.vocab)?;
    beam_search_with(model, prompt, beam, &ct)
}

/// Scores every trie leaf and sorts by log-probability, then identifier.
pub fn exhaustive_ranking(model: &PolicyModel, prompt: &[usize], trie: &SidTrie) -> Result<Vec<Beam>> {
    let ct = ConstraintTrie::new(trie, &model.vocab)?;
    let mut all = Vec::with_capacity(trie.len());
    for sid in trie.leaves() {
        let tokens = model.vocab.sid_tokens(&sid)?;
        let logprob = sequence_logprob(model, prompt, tokens, Norm::Trie(&ct))?;
        all.push(Beam { sid, tokens, logprob });
    }
    all.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then(a.tokens.cmp(&b.tokens)));
    Ok(all)
}

fn draw<R: Rng + ?Sized>(row: &[f64], allowed: &[usize], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = allowed.iter().map(|&c| row[c] / temperature).collect();
    let lse = log_sum_exp(scaled.iter().copied());
    let mut u: f64 = rng.random();
    for (k, &s) in scaled.iter().enumerate() {
        let p = libm::exp(s - lse);
        if u < p {
            return allowed[k];
        }
        u -= p;
    }
    *allowed.last().expect("non-empty allowed set")
}

/// Draws `n` SID token triples per prompt, one level at a time. With a trie,
/// each step samples among the prefix's children; without one, among the
/// positional vocabulary of the level (invalid identifiers may result).
pub fn sample_sids<R: Rng + ?Sized>(
    model: &PolicyModel,
    prompts: &[&[usize]],
    n: usize,
    temperature: f64,
    trie: Option<&ConstraintTrie>,
    rng: &mut R,
) -> Result<Vec<Vec<[usize; 3]>>> {
    if !(temperature > 0.0) {
        return Err(Error::Config("sampling temperature must be positive".into()));
    }
    let mut partial: Vec<Vec<Vec<usize>>> = prompts.iter().map(|_| alloc::vec![Vec::new(); n]).collect();
    for l in 0..3 {
        let mut index: BTreeMap<(usize, Vec<usize>), usize> = BTreeMap::new();
        let mut seqs = Vec::new();
        for (p, samples) in partial.iter().enumerate() {
            for s in samples {
                index.entry((p, s.clone())).or_insert_with(|| {
                    seqs.push(with_prefix(prompts[p], s));
                    seqs.len() - 1
                });
            }
        }
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let logits = model.next_logits(&refs)?;
        let level: Vec<usize> = model.vocab.level_range(l).collect();
        for (p, samples) in partial.iter_mut().enumerate() {
            for s in samples.iter_mut() {
                let row = logits.row_slice(index[&(p, s.clone())]);
                let allowed = match trie {
                    Some(t) => t.children(s),
                    None => level.as_slice(),
                };
                if allowed.is_empty() {
                    return Err(Error::Invalid("SID prefix has no continuation".into()));
                }
                let t = draw(row, allowed, temperature, rng);
                s.push(t);
            }
        }
    }
    Ok(partial.into_iter().map(|ss| ss.into_iter().map(|s| [s[0], s[1], s[2]]).collect()).collect())
}
