use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::nn::{cosine_lr, AdamConfig, AdamState, Graph, Var};
use crate::rng::indexed_stream;
use crate::{Error, Result};

use super::data::Example;
use super::model::{Norm, PolicyModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 3e-3, seed: 41 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SftLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mean cross-entropy of the three target tokens over the full vocabulary;
/// logits are only formed at target positions.
pub fn sft_loss(model: &PolicyModel, g: &mut Graph, batch: &[&Example]) -> Result<Var> {
    let pairs: Vec<(&[usize], [usize; 3])> = batch.iter().map(|e| (e.prompt.tokens.as_slice(), e.target_tokens)).collect();
    let lp = model.logprob_graph(g, &pairs, Norm::Full)?;
    let m = g.mean_all(lp);
    Ok(g.scale(m, -1.0 / 3.0))
}

/// The same loss computed from logits at every position, selecting the
/// target rows; prompt rows receive no gradient.
pub fn masked_token_loss(
    g: &mut Graph,
    logits_all: Var,
    seq_lens: &[usize],
    prompt_lens: &[usize],
    targets: &[[usize; 3]],
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut flat = Vec::new();
    let mut offset = 0;
    for ((&len, &p), t) in seq_lens.iter().zip(prompt_lens).zip(targets) {
        if p + 2 != len {
            return Err(Error::shape("masked_token_loss", alloc::format!("prompt {p} in sequence {len}")));
        }
        for l in 0..3 {
            rows.push(offset + p - 1 + l);
            flat.push(t[l]);
        }
        offset += len;
    }
    let sel = g.gather_rows(logits_all, &rows)?;
    let lp = g.log_softmax_pick(sel, &flat, None)?;
    let m = g.mean_all(lp);
    Ok(g.scale(m, -1.0))
}

pub fn sft_train(model: &mut PolicyModel, data: &[Example], config: &SftConfig) -> Result<SftLog> {
    if data.is_empty() {
        return Err(Error::Empty("SFT dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut adam = AdamState::new(&model.params, AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let per_epoch = data.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut log = SftLog::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut indexed_stream(config.seed, "sft.epoch", epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let grads = {
                let mut g = Graph::with_params(&model.params);
                let loss = sft_loss(model, &mut g, &batch)?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::Divergence(alloc::format!("SFT loss {v} at epoch {epoch}")));
                }
                sum += v;
                g.backward(loss)?
            };
            model.params.zero_grads();
            model.params.accumulate(&grads);
            let lr = cosine_lr(config.lr, log.steps, total);
            adam.step_with_lr(&mut model.params, lr)
                .map_err(|e| Error::Divergence(alloc::format!("SFT step {}: {e}", log.steps)))?;
            log.steps += 1;
        }
        let mean = sum / per_epoch as f64;
        log::debug!("sft epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

/// Teacher-forced argmax accuracy over the full vocabulary at SID level `level`.
pub fn level_accuracy(model: &PolicyModel, data: &[Example], level: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut hits = 0usize;
    for chunk in data.chunks(64) {
        let seqs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|e| {
                let mut s = e.prompt.tokens.clone();
                s.extend_from_slice(&e.target_tokens[..level]);
                s
            })
            .collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let logits = model.next_logits(&refs)?;
        for (r, e) in chunk.iter().enumerate() {
            let row = logits.row_slice(r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            hits += usize::from(best == e.target_tokens[level]);
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
