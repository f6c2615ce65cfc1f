//! Category- and query-constrained semantic IDs.
//!
//! An MLP encoder maps item embeddings to a latent, a three-level residual
//! quantizer turns the latent into codes (level 1 pinned to the category when
//! known), and an MLP decoder reconstructs the embedding from the quantized
//! latent. Encoder and decoder train on reconstruction, commitment and a
//! bidirectional InfoNCE term between item and query latents; codebooks move
//! by EMA and dead codes are restarted from recent residuals.

mod codebook;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{CorpusBundle, InteractionKind, ItemId, QueryId};
use crate::nn::layers::Mlp;
use crate::nn::{cosine_lr, decode_checkpoint, encode_checkpoint, AdamConfig, AdamState, Graph, ParameterSet, Tensor, Var};
use crate::rng::{indexed_stream, stream};
use crate::{Error, Result};

pub use codebook::{ema_update, quantize_level, quantize_level1, restart_dead_codes, Codebook};

#[derive(Debug, Clone, PartialEq)]
pub struct CqSidConfig {
    pub codebook_sizes: [usize; 3],
    pub d_in: usize,
    pub d_latent: usize,
    pub hidden: usize,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub ema_decay: f64,
    pub contrastive_batch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub codebook_init_std: f64,
    pub restarts: bool,
    pub restart_threshold: u64,
    pub restart_window: usize,
    pub use_category: bool,
    pub use_contrastive: bool,
    pub label_drop_fraction: f64,
    pub seed: u64,
}

impl Default for CqSidConfig {
    fn default() -> Self {
        Self {
            codebook_sizes: [12, 16, 16],
            d_in: 32,
            d_latent: 16,
            hidden: 64,
            beta: 1.0,
            gamma: 0.001,
            tau: 0.1,
            ema_decay: 0.99,
            contrastive_batch: 128,
            epochs: 10,
            batch_size: 256,
            lr: 5e-3,
            codebook_init_std: 1.0,
            restarts: true,
            restart_threshold: 1,
            restart_window: 50,
            use_category: true,
            use_contrastive: true,
            label_drop_fraction: 0.0,
            seed: 11,
        }
    }
}

impl CqSidConfig {
    pub fn validate(&self, categories: Option<usize>) -> Result<()> {
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("beta and gamma must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if self.codebook_sizes.contains(&0) || self.d_in == 0 || self.d_latent == 0 || self.hidden == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if self.batch_size == 0 || self.restart_window == 0 {
            return Err(Error::Config("batch_size and restart_window must be positive".into()));
        }
        if let Some(c) = categories {
            if self.codebook_sizes[0] < c {
                return Err(Error::Config(format!(
                    "level-1 codebook has {} codes for {c} categories",
                    self.codebook_sizes[0]
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.label_drop_fraction) {
            return Err(Error::Config("label_drop_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let [k1, k2, k3] = self.codebook_sizes;
        vec![
            ("k1", format!("{k1}")),
            ("k2", format!("{k2}")),
            ("k3", format!("{k3}")),
            ("d_in", format!("{}", self.d_in)),
            ("d_latent", format!("{}", self.d_latent)),
            ("hidden", format!("{}", self.hidden)),
            ("beta", format!("{}", self.beta)),
            ("gamma", format!("{}", self.gamma)),
            ("tau", format!("{}", self.tau)),
            ("ema_decay", format!("{}", self.ema_decay)),
            ("contrastive_batch", format!("{}", self.contrastive_batch)),
            ("epochs", format!("{}", self.epochs)),
            ("batch_size", format!("{}", self.batch_size)),
            ("lr", format!("{}", self.lr)),
            ("codebook_init_std", format!("{}", self.codebook_init_std)),
            ("restarts", format!("{}", self.restarts)),
            ("restart_threshold", format!("{}", self.restart_threshold)),
            ("restart_window", format!("{}", self.restart_window)),
            ("use_category", format!("{}", self.use_category)),
            ("use_contrastive", format!("{}", self.use_contrastive)),
            ("label_drop_fraction", format!("{}", self.label_drop_fraction)),
            ("seed", format!("{}", self.seed)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        match key {
            "k1" => self.codebook_sizes[0] = p(key, value)?,
            "k2" => self.codebook_sizes[1] = p(key, value)?,
            "k3" => self.codebook_sizes[2] = p(key, value)?,
            "d_in" => self.d_in = p(key, value)?,
            "d_latent" => self.d_latent = p(key, value)?,
            "hidden" => self.hidden = p(key, value)?,
            "beta" => self.beta = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "tau" => self.tau = p(key, value)?,
            "ema_decay" => self.ema_decay = p(key, value)?,
            "contrastive_batch" => self.contrastive_batch = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "codebook_init_std" => self.codebook_init_std = p(key, value)?,
            "restarts" => self.restarts = p(key, value)?,
            "restart_threshold" => self.restart_threshold = p(key, value)?,
            "restart_window" => self.restart_window = p(key, value)?,
            "use_category" => self.use_category = p(key, value)?,
            "use_contrastive" => self.use_contrastive = p(key, value)?,
            "label_drop_fraction" => self.label_drop_fraction = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }
}

/// Pre-grouping level indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RawSid {
    pub k1: u32,
    pub k2: u32,
    pub k3: u32,
}

impl fmt::Display for RawSid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.k1, self.k2, self.k3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub reconstruction: f64,
    pub commitment: f64,
    pub infonce: f64,
    pub total: f64,
}

/// Quantization decisions for one batch, frozen so the differentiable part of
/// the loss is a fixed function of the encoder and decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    pub indices: Vec<[usize; 3]>,
    /// Residual entering each level: `r0 = z`, `r1`, `r2`.
    pub residuals: [Tensor; 3],
    /// Cumulative quantized latent after each level.
    pub cumulative: [Tensor; 3],
    /// `quantized - z`, added to `z` as a constant (straight-through).
    pub st_delta: Tensor,
}

/// One training batch: item rows plus the contrastive pairs drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct CqBatch {
    pub x: Tensor,
    pub categories: Vec<Option<u32>>,
    /// Rows of `x` taking part in the contrastive term.
    pub pair_rows: Vec<usize>,
    /// Query embeddings paired with `pair_rows`.
    pub queries: Tensor,
    /// `false` for items lacking a query.
    pub pair_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqSidModel {
    pub config: CqSidConfig,
    pub params: ParameterSet,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: [Codebook; 3],
    /// Number of category codes reserved at level 1.
    pub categories: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossComponents,
    pub utilization: [f64; 3],
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Known-category level-1 assignments checked during training.
    pub pinning_checked: u64,
    pub pinning_violations: u64,
    pub steps: usize,
}

impl CqSidModel {
    pub fn new(config: &CqSidConfig, categories: usize) -> Result<Self> {
        config.validate(Some(categories))?;
        let mut rng = stream(config.seed, "cqsid.init");
        let mut params = ParameterSet::new();
        let encoder = Mlp::new(&mut params, "encoder", &[config.d_in, config.hidden, config.d_latent], &mut rng)?;
        let decoder = Mlp::new(&mut params, "decoder", &[config.d_latent, config.hidden, config.d_in], &mut rng)?;
        let mut books = Vec::with_capacity(3);
        for (l, &k) in config.codebook_sizes.iter().enumerate() {
            let std = config.codebook_init_std / libm::sqrt(config.d_latent as f64);
            let v = Tensor::randn(k, config.d_latent, std, &mut rng);
            books.push(Codebook::new(l + 1, v, config.ema_decay)?.with_window(config.restart_window));
        }
        let codebooks: [Codebook; 3] = books.try_into().map_err(|_| Error::Invalid("codebooks".into()))?;
        Ok(Self { config: config.clone(), params, encoder, decoder, codebooks, categories })
    }

    fn reserved(&self) -> usize {
        if self.config.use_category {
            self.categories
        } else {
            0
        }
    }

    /// Encoder outputs for the rows of `x`.
    pub fn latents(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params);
        let xv = g.input(x.clone());
        let z = self.encoder.forward(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    /// Reconstruction of `x` through the quantized latent.
    pub fn reconstruct(&self, x: &Tensor, categories: &[Option<u32>]) -> Result<Tensor> {
        let z = self.latents(x)?;
        let plan = self.plan(&z, categories)?;
        let mut g = Graph::with_params(&self.params);
        let q = g.input(plan.cumulative[2].clone());
        let xh = self.decoder.forward(&mut g, q)?;
        Ok(g.value(xh).clone())
    }

    /// Runs the three-level quantizer over the rows of `z`.
    pub fn plan(&self, z: &Tensor, categories: &[Option<u32>]) -> Result<QuantPlan> {
        let n = z.rows();
        if categories.len() != n {
            return Err(Error::shape("plan", format!("{n} latents, {} categories", categories.len())));
        }
        let d = z.cols();
        let mut residuals = [Tensor::zeros(n, d), Tensor::zeros(n, d), Tensor::zeros(n, d)];
        let mut cumulative = [Tensor::zeros(n, d), Tensor::zeros(n, d), Tensor::zeros(n, d)];
        let mut indices = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = z.row_slice(i).to_vec();
            let mut acc = vec![0.0; d];
            let mut idx = [0usize; 3];
            for l in 0..3 {
                residuals[l].row_slice_mut(i).copy_from_slice(&r);
                let cat = if self.config.use_category { categories[i] } else { None };
                let k = if l == 0 {
                    quantize_level1(&self.codebooks[0], &r, cat)?
                } else {
                    self.codebooks[l].nearest(&r)?
                };
                let e = self.codebooks[l].code(k);
                for j in 0..d {
                    r[j] -= e[j];
                    acc[j] += e[j];
                }
                cumulative[l].row_slice_mut(i).copy_from_slice(&acc);
                idx[l] = k;
            }
            indices.push(idx);
        }
        let mut st_delta = cumulative[2].clone();
        for (s, zv) in st_delta.data_mut().iter_mut().zip(z.data()) {
            *s -= zv;
        }
        Ok(QuantPlan { indices, residuals, cumulative, st_delta })
    }

    /// Records the full loss for `batch` with the given frozen plan.
    pub fn loss_with_plan(&self, g: &mut Graph, batch: &CqBatch, plan: &QuantPlan) -> Result<(Var, LossComponents)> {
        let n = batch.x.rows().max(1) as f64;
        let x = g.input(batch.x.clone());
        let z = self.encoder.forward(g, x)?;
        let delta = g.input(plan.st_delta.clone());
        let zq = g.add(z, delta)?;
        let xh = self.decoder.forward(g, zq)?;
        let diff = g.sub(x, xh)?;
        let rec_sum = g.sum_squares(diff)?;
        let recon = g.scale(rec_sum, 1.0 / n);

        let mut commit = None;
        for cum in &plan.cumulative {
            let c = g.input(cum.clone());
            let d = g.sub(z, c)?;
            let s = g.sum_squares(d)?;
            commit = Some(match commit {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let commit_sum = commit.expect("three levels");
        let commit = g.scale(commit_sum, 1.0 / n);

        let weighted = g.scale(commit, self.config.beta);
        let mut total = g.add(recon, weighted)?;
        let mut infonce_value = 0.0;
        if self.config.use_contrastive && self.config.gamma > 0.0 {
            let valid: Vec<usize> = (0..batch.pair_rows.len()).filter(|&i| batch.pair_mask[i]).collect();
            if !valid.is_empty() {
                let rows: Vec<usize> = valid.iter().map(|&i| batch.pair_rows[i]).collect();
                let zi = g.gather_rows(z, &rows)?;
                let qx = g.input(batch.queries.clone());
                let qsel = g.gather_rows(qx, &valid)?;
                let zq = self.encoder.forward(g, qsel)?;
                let loss = bi_infonce_graph(g, zi, zq, self.config.tau)?;
                infonce_value = g.value(loss).item();
                let w = g.scale(loss, self.config.gamma);
                total = g.add(total, w)?;
            }
        }
        let comps = LossComponents {
            reconstruction: g.value(recon).item(),
            commitment: g.value(commit).item(),
            infonce: infonce_value,
            total: g.value(total).item(),
        };
        Ok((total, comps))
    }

    /// Loss components for a batch at the current parameters.
    pub fn total_loss(&self, batch: &CqBatch) -> Result<LossComponents> {
        let z = self.latents(&batch.x)?;
        let plan = self.plan(&z, &batch.categories)?;
        let mut g = Graph::with_params(&self.params);
        Ok(self.loss_with_plan(&mut g, batch, &plan)?.1)
    }

    pub fn assign_sid(&self, embedding: &[f64], category: Option<u32>) -> Result<RawSid> {
        if embedding.len() != self.config.d_in {
            return Err(Error::shape("assign_sid", format!("embedding of dim {} for d_in {}", embedding.len(), self.config.d_in)));
        }
        Ok(self.assign_batch(&Tensor::row(embedding), &[category])?[0])
    }

    pub fn assign_batch(&self, x: &Tensor, categories: &[Option<u32>]) -> Result<Vec<RawSid>> {
        if x.cols() != self.config.d_in {
            return Err(Error::shape("assign_sid", format!("embeddings of dim {} for d_in {}", x.cols(), self.config.d_in)));
        }
        let z = self.latents(x)?;
        let plan = self.plan(&z, categories)?;
        Ok(plan
            .indices
            .iter()
            .map(|k| RawSid { k1: k[0] as u32, k2: k[1] as u32, k3: k[2] as u32 })
            .collect())
    }

    /// Serializes weights and codebooks; the config goes into the metadata.
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let mut all = self.params.clone();
        for cb in &self.codebooks {
            all.add(&format!("codebook.{}", cb.level), cb.vectors.clone())?;
        }
        let mut meta = format!("categories = {}\n", self.categories);
        for (k, v) in self.config.to_pairs() {
            meta.push_str(&format!("{k} = {v}\n"));
        }
        Ok(encode_checkpoint(&all, &meta))
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (all, meta) = decode_checkpoint(bytes)?;
        let mut config = CqSidConfig::default();
        let mut categories = None;
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{line}`")))?;
            match k.trim() {
                "categories" => {
                    categories = Some(v.trim().parse().map_err(|_| Error::Checkpoint("bad category count".into()))?)
                }
                key => config.set(key, v)?,
            }
        }
        let categories = categories.ok_or_else(|| Error::Checkpoint("missing category count".into()))?;
        let mut model = CqSidModel::new(&config, categories)?;
        model.params.copy_values_from(&subset(&all, &model.params)?)?;
        for cb in model.codebooks.iter_mut() {
            let v = all.value(all.id(&format!("codebook.{}", cb.level))?).clone();
            if v.shape() != cb.vectors.shape() {
                return Err(Error::Checkpoint(format!("codebook {} has shape {:?}", cb.level, v.shape())));
            }
            cb.ema_sums = v.clone();
            cb.vectors = v;
        }
        Ok(model)
    }
}

fn subset(all: &ParameterSet, like: &ParameterSet) -> Result<ParameterSet> {
    let mut out = ParameterSet::new();
    for id in like.ids() {
        let name = like.name(id);
        out.add(name, all.value(all.id(name)?).clone())?;
    }
    Ok(out)
}

/// Symmetric InfoNCE over cosine similarities of paired rows, recorded on `g`.
pub fn bi_infonce_graph(g: &mut Graph, items: Var, queries: Var, tau: f64) -> Result<Var> {
    let n = g.value(items).rows();
    let a = g.l2_normalize_rows(items);
    let b = g.l2_normalize_rows(queries);
    let s = g.matmul_nt(a, b)?;
    let s = g.scale(s, 1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    let fwd = g.log_softmax_pick(s, &targets, None)?;
    let st = g.transpose(s);
    let bwd = g.log_softmax_pick(st, &targets, None)?;
    let f = g.mean_all(fwd);
    let b = g.mean_all(bwd);
    let both = g.add(f, b)?;
    Ok(g.scale(both, -0.5))
}

/// Bidirectional InfoNCE between item and query latents; masked pairs are
/// dropped entirely. Returns 0 when no pair survives the mask.
pub fn bi_infonce(items: &Tensor, queries: &Tensor, mask: &[bool], tau: f64) -> Result<f64> {
    if items.shape() != queries.shape() || mask.len() != items.rows() {
        return Err(Error::shape(
            "bi_infonce",
            format!("items {:?}, queries {:?}, mask {}", items.shape(), queries.shape(), mask.len()),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let a = g.input(items.clone());
    let b = g.input(queries.clone());
    let a = g.gather_rows(a, &keep)?;
    let b = g.gather_rows(b, &keep)?;
    let l = bi_infonce_graph(&mut g, a, b, tau)?;
    Ok(g.value(l).item())
}

/// Items whose category label is hidden from the quantizer.
pub fn dropped_labels(bundle: &CorpusBundle, config: &CqSidConfig) -> BTreeSet<ItemId> {
    if config.label_drop_fraction <= 0.0 {
        return BTreeSet::new();
    }
    let mut rng = stream(config.seed, "cqsid.label_drop");
    bundle
        .items
        .iter()
        .filter(|_| rng.random::<f64>() < config.label_drop_fraction)
        .map(|i| i.item_id)
        .collect()
}

/// Category labels visible to the quantizer, indexed by item id.
pub fn visible_categories(bundle: &CorpusBundle, config: &CqSidConfig) -> Vec<Option<u32>> {
    let dropped = dropped_labels(bundle, config);
    bundle
        .items
        .iter()
        .map(|i| if dropped.contains(&i.item_id) { None } else { Some(i.category_id) })
        .collect()
}

/// Clicked or purchased queries per item, skipping `exclude`.
pub fn click_pairs(bundle: &CorpusBundle, exclude: &BTreeSet<QueryId>) -> BTreeMap<ItemId, Vec<QueryId>> {
    let mut out: BTreeMap<ItemId, BTreeSet<QueryId>> = BTreeMap::new();
    for x in &bundle.interactions {
        if x.kind != InteractionKind::Exposure && !exclude.contains(&x.query_id) {
            out.entry(x.item_id).or_default().insert(x.query_id);
        }
    }
    out.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect()
}

/// Mean cosine between the latents of paired items and queries.
pub fn pair_alignment(model: &CqSidModel, bundle: &CorpusBundle, pairs: &BTreeMap<ItemId, Vec<QueryId>>) -> Result<f64> {
    let mut item_rows = Vec::new();
    let mut query_rows = Vec::new();
    for (&item, qs) in pairs {
        for &q in qs {
            item_rows.push(bundle.items[item as usize].embedding.clone());
            query_rows.push(bundle.queries[q as usize].embedding.clone());
        }
    }
    if item_rows.is_empty() {
        return Ok(0.0);
    }
    let zi = model.latents(&Tensor::from_rows(&item_rows)?)?;
    let zq = model.latents(&Tensor::from_rows(&query_rows)?)?;
    let total: f64 = (0..zi.rows()).map(|r| crate::corpus::cosine(zi.row_slice(r), zq.row_slice(r))).sum();
    Ok(total / zi.rows() as f64)
}

/// Fraction of codes used per level when assigning `x`.
pub fn utilization(sids: &[RawSid], sizes: [usize; 3]) -> [f64; 3] {
    let mut used = [BTreeSet::new(), BTreeSet::new(), BTreeSet::new()];
    for s in sids {
        used[0].insert(s.k1);
        used[1].insert(s.k2);
        used[2].insert(s.k3);
    }
    [0, 1, 2].map(|l| used[l].len() as f64 / sizes[l] as f64)
}

pub fn train_cqsid(bundle: &CorpusBundle, config: &CqSidConfig) -> Result<(CqSidModel, TrainLog)> {
    train_cqsid_with_pairs(bundle, config, &click_pairs(bundle, &BTreeSet::new()))
}

/// Trains with an explicit item-to-query pairing for the contrastive term.
pub fn train_cqsid_with_pairs(
    bundle: &CorpusBundle,
    config: &CqSidConfig,
    pairs: &BTreeMap<ItemId, Vec<QueryId>>,
) -> Result<(CqSidModel, TrainLog)> {
    let categories = bundle.config.categories;
    config.validate(Some(categories))?;
    if bundle.items.is_empty() {
        return Err(Error::Empty("item corpus".into()));
    }
    if let Some(it) = bundle.items.iter().find(|it| it.embedding.len() != config.d_in) {
        return Err(Error::shape(
            "train_cqsid",
            format!("item {} embedding dim {} for d_in {}", it.item_id, it.embedding.len(), config.d_in),
        ));
    }
    let mut model = CqSidModel::new(config, categories)?;
    let visible = visible_categories(bundle, config);
    let embeddings = Tensor::from_rows(&bundle.items.iter().map(|i| i.embedding.clone()).collect::<Vec<_>>())?;
    let mut adam = AdamState::new(&model.params, AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let n = bundle.items.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut log = TrainLog::default();
    let reserved = model.reserved();
    let mut restart_rng = stream(config.seed, "cqsid.restart");

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut indexed_stream(config.seed, "cqsid.epoch", epoch as u64));
        let mut sum = LossComponents::default();
        let mut restarts = 0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut pair_rng = indexed_stream(config.seed, "cqsid.pairs", (epoch * batches_per_epoch + bi) as u64);
            let batch = make_batch(bundle, &embeddings, &visible, chunk, pairs, config.contrastive_batch, &mut pair_rng)?;
            let z = model.latents(&batch.x)?;
            let plan = model.plan(&z, &batch.categories)?;
            if config.use_category {
                for (i, cat) in batch.categories.iter().enumerate() {
                    if let Some(c) = cat {
                        log.pinning_checked += 1;
                        if plan.indices[i][0] != *c as usize {
                            log.pinning_violations += 1;
                        }
                    }
                }
            }
            let grads = {
                let mut g = Graph::with_params(&model.params);
                let (loss, comps) = model.loss_with_plan(&mut g, &batch, &plan)?;
                if !comps.total.is_finite() {
                    return Err(Error::Divergence(format!("CQ-SID loss {} at epoch {epoch}", comps.total)));
                }
                sum.reconstruction += comps.reconstruction;
                sum.commitment += comps.commitment;
                sum.infonce += comps.infonce;
                sum.total += comps.total;
                g.backward(loss)?
            };
            model.params.zero_grads();
            model.params.accumulate(&grads);
            let lr = cosine_lr(config.lr, log.steps, total_steps);
            adam.step_with_lr(&mut model.params, lr)
                .map_err(|e| Error::Divergence(format!("CQ-SID step {}: {e}", log.steps)))?;
            for l in 0..3 {
                let idx: Vec<usize> = plan.indices.iter().map(|k| k[l]).collect();
                ema_update(&mut model.codebooks[l], &plan.residuals[l], &idx)?;
            }
            log.steps += 1;
            if config.restarts {
                for l in 0..3 {
                    let res = if l == 0 { reserved } else { 0 };
                    restarts += restart_dead_codes(
                        &mut model.codebooks[l],
                        &plan.residuals[l],
                        config.restart_threshold,
                        res,
                        &mut restart_rng,
                    )?;
                }
            }
        }
        let nb = batches_per_epoch as f64;
        let losses = LossComponents {
            reconstruction: sum.reconstruction / nb,
            commitment: sum.commitment / nb,
            infonce: sum.infonce / nb,
            total: sum.total / nb,
        };
        let sids = model.assign_batch(&embeddings, &visible)?;
        if config.use_category {
            for (s, cat) in sids.iter().zip(&visible) {
                if let Some(c) = cat {
                    log.pinning_checked += 1;
                    if s.k1 != *c {
                        log.pinning_violations += 1;
                    }
                }
            }
        }
        let utilization = utilization(&sids, config.codebook_sizes);
        log::debug!("cqsid epoch {epoch}: {losses:?} utilization {utilization:?} restarts {restarts}");
        log.epochs.push(EpochLog { epoch, losses, utilization, restarts });
    }
    Ok((model, log))
}

fn make_batch<R: Rng>(
    bundle: &CorpusBundle,
    embeddings: &Tensor,
    visible: &[Option<u32>],
    chunk: &[usize],
    pairs: &BTreeMap<ItemId, Vec<QueryId>>,
    contrastive: usize,
    rng: &mut R,
) -> Result<CqBatch> {
    let d = embeddings.cols();
    let mut x = Tensor::zeros(chunk.len(), d);
    for (r, &i) in chunk.iter().enumerate() {
        x.row_slice_mut(r).copy_from_slice(embeddings.row_slice(i));
    }
    let categories = chunk.iter().map(|&i| visible[i]).collect();
    let take = contrastive.min(chunk.len());
    let mut pair_rows = Vec::with_capacity(take);
    let mut pair_mask = Vec::with_capacity(take);
    let mut queries = Tensor::zeros(take, d);
    for r in 0..take {
        pair_rows.push(r);
        let item = bundle.items[chunk[r]].item_id;
        match pairs.get(&item).filter(|qs| !qs.is_empty()) {
            Some(qs) => {
                let q = qs[rng.random_range(0..qs.len())];
                queries.row_slice_mut(r).copy_from_slice(&bundle.queries[q as usize].embedding);
                pair_mask.push(true);
            }
            None => pair_mask.push(false),
        }
    }
    Ok(CqBatch { x, categories, pair_rows, queries, pair_mask })
}
