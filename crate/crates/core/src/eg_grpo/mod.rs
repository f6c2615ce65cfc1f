//! Reward shaping from behavior funnels, group-normalized advantages, the
//! clipped objective with a KL penalty, and expert-injected rollout groups.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::{CorpusBundle, QueryId, Session};
use crate::nn::{AdamConfig, AdamState, Graph, Tensor, Var};
use crate::rng::indexed_stream;
use crate::seq2sid::{sample_sids, session_prompt, ConstraintTrie, Norm, PolicyModel, SidVocab, Stage};
use crate::sid_index::{LookupTable, SidKey, SidTrie};
use crate::{Error, Result};

#[cfg(test)]
mod tests;

/// Group-normalization epsilon.
pub const ADVANTAGE_EPS: f64 = 1e-8;

/// Purchased, clicked and exposed SIDs of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BehaviorSets {
    pub pay: BTreeSet<SidKey>,
    pub clk: BTreeSet<SidKey>,
    pub exp: BTreeSet<SidKey>,
}

impl BehaviorSets {
    /// Maps a session's items to SIDs. Purchases count as clicks and clicks
    /// as exposures, so the sets nest.
    pub fn from_session(session: &Session, table: &LookupTable) -> Self {
        let sids = |items: &[u64]| -> BTreeSet<SidKey> { items.iter().filter_map(|&i| table.sid_of(i)).collect() };
        let pay = sids(&session.purchased);
        let mut clk = sids(&session.clicked);
        clk.extend(pay.iter().copied());
        let mut exp = sids(&session.exposed);
        exp.extend(clk.iter().copied());
        Self { pay, clk, exp }
    }

    pub fn is_funnel(&self, valid: &SidTrie) -> bool {
        self.pay.is_subset(&self.clk) && self.clk.is_subset(&self.exp) && self.exp.iter().all(|s| valid.contains(s))
    }
}

/// Which reward case an output falls under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RewardCase {
    Purchase,
    Click,
    Exposure,
    Valid,
    Invalid,
}

impl RewardCase {
    pub fn value(self) -> f64 {
        match self {
            RewardCase::Purchase | RewardCase::Click => 1.0,
            RewardCase::Exposure => 0.5,
            RewardCase::Valid => 0.1,
            RewardCase::Invalid => 0.0,
        }
    }
}

pub fn reward_case(o: &SidKey, sets: &BehaviorSets, valid: &SidTrie) -> RewardCase {
    if sets.pay.contains(o) {
        RewardCase::Purchase
    } else if sets.clk.contains(o) {
        RewardCase::Click
    } else if sets.exp.contains(o) {
        RewardCase::Exposure
    } else if valid.contains(o) {
        RewardCase::Valid
    } else {
        RewardCase::Invalid
    }
}

pub fn reward(o: &SidKey, sets: &BehaviorSets, valid: &SidTrie) -> f64 {
    reward_case(o, sets, valid).value()
}

/// `(R_i - mean) / (std + eps)` with the population standard deviation.
/// Constant groups map to exact zeros.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Invalid(format!("group of {} rewards; need at least 2", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Divergence("non-finite reward".into()));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(alloc::vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps)).collect())
}

/// Per-output KL estimate `exp(ref - new) - (ref - new) - 1`.
pub fn kl_estimate(new: f64, reference: f64) -> f64 {
    let d = reference - new;
    libm::exp(d) - d - 1.0
}

/// Clipped objective of one group, as a loss:
/// `-(1/n) sum min(rho A, clip(rho) A) + kl_weight * mean KL`.
pub fn grpo_objective(new: &[f64], old: &[f64], reference: &[f64], adv: &[f64], clip: f64, kl_weight: f64) -> Result<f64> {
    let n = new.len();
    if n == 0 || old.len() != n || reference.len() != n || adv.len() != n {
        return Err(Error::shape("grpo_objective", format!("{n} new, {} old, {} ref, {} adv", old.len(), reference.len(), adv.len())));
    }
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for i in 0..n {
        let rho = libm::exp(new[i] - old[i]);
        if rho.is_nan() {
            return Err(Error::Divergence(format!("NaN ratio at output {i}")));
        }
        let clipped = rho.clamp(1.0 - clip, 1.0 + clip);
        surrogate += (rho * adv[i]).min(clipped * adv[i]);
        kl += kl_estimate(new[i], reference[i]);
    }
    Ok(-surrogate / n as f64 + kl_weight * kl / n as f64)
}

/// Summary of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveStats {
    pub loss: f64,
    pub mean_kl: f64,
    /// Fraction of outputs whose ratio left `[1 - clip, 1 + clip]`.
    pub clip_fraction: f64,
}

/// Graph form of the objective over consecutive groups of `new` (an `n x 1`
/// column). Each group is averaged, then groups are averaged. `old` and
/// `reference` are constants.
pub fn grpo_objective_graph(
    g: &mut Graph,
    new: Var,
    old: &[f64],
    reference: &[f64],
    adv: &[f64],
    group_sizes: &[usize],
    clip: f64,
    kl_weight: f64,
) -> Result<(Var, ObjectiveStats)> {
    let n = g.value(new).rows();
    if g.value(new).cols() != 1 || old.len() != n || reference.len() != n || adv.len() != n || group_sizes.iter().sum::<usize>() != n {
        return Err(Error::shape("grpo_objective_graph", format!("{n} outputs in groups {group_sizes:?}")));
    }
    if group_sizes.contains(&0) {
        return Err(Error::Empty("rollout group".into()));
    }
    let mut weights = Vec::with_capacity(n);
    for &s in group_sizes {
        weights.extend(core::iter::repeat_n(1.0 / (s as f64 * group_sizes.len() as f64), s));
    }
    let old_v = g.input(Tensor::column(old));
    let ref_v = g.input(Tensor::column(reference));
    let adv_v = g.input(Tensor::column(adv));
    let w_v = g.input(Tensor::column(&weights));

    let log_ratio = g.sub(new, old_v)?;
    let rho = g.exp(log_ratio);
    if g.value(rho).data().iter().any(|v| v.is_nan()) {
        return Err(Error::Divergence("NaN importance ratio".into()));
    }
    let clipped = g.clamp(rho, 1.0 - clip, 1.0 + clip);
    let a = g.mul(rho, adv_v)?;
    let b = g.mul(clipped, adv_v)?;
    let surr = g.minimum(a, b)?;
    let ws = g.mul(surr, w_v)?;
    let surr_total = g.sum_all(ws);

    let d = g.sub(ref_v, new)?;
    let ed = g.exp(d);
    let minus_one = g.input(Tensor::filled(n, 1, -1.0));
    let kl_each = g.sub(ed, d)?;
    let kl_each = g.add(kl_each, minus_one)?;
    let kl_w = g.mul(kl_each, w_v)?;
    let kl_mean = g.sum_all(kl_w);

    let neg = g.scale(surr_total, -1.0);
    let loss = if kl_weight != 0.0 {
        let kl_scaled = g.scale(kl_mean, kl_weight);
        g.add(neg, kl_scaled)?
    } else {
        neg
    };
    let rho_vals = g.value(rho).data();
    let clipped_n = rho_vals.iter().filter(|&&r| r < 1.0 - clip || r > 1.0 + clip).count();
    let stats = ObjectiveStats {
        loss: g.value(loss).item(),
        mean_kl: g.value(kl_mean).item(),
        clip_fraction: clipped_n as f64 / n as f64,
    };
    if !stats.loss.is_finite() {
        return Err(Error::Divergence(format!("objective {}", stats.loss)));
    }
    Ok((loss, stats))
}

/// Plain policy-gradient loss `-(sum_i w_i A_i log p_i)` with the same group
/// weighting as [`grpo_objective_graph`].
pub fn policy_gradient_graph(g: &mut Graph, new: Var, adv: &[f64], group_sizes: &[usize]) -> Result<Var> {
    let n = adv.len();
    if group_sizes.iter().sum::<usize>() != n {
        return Err(Error::shape("policy_gradient_graph", format!("{n} outputs in groups {group_sizes:?}")));
    }
    let mut w = Vec::with_capacity(n);
    let mut k = 0;
    for &s in group_sizes {
        for _ in 0..s {
            w.push(adv[k] / (s as f64 * group_sizes.len() as f64));
            k += 1;
        }
    }
    let wv = g.input(Tensor::column(&w));
    let prod = g.mul(new, wv)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, -1.0))
}

/// Up to `k` distinct SIDs drawn uniformly from `clk ∪ exp`.
pub fn sample_experts<R: Rng + ?Sized>(sets: &BehaviorSets, k: usize, rng: &mut R) -> Vec<SidKey> {
    let pool: Vec<SidKey> = sets.clk.union(&sets.exp).copied().collect();
    let mut picked: Vec<SidKey> = pool.choose_multiple(rng, k.min(pool.len())).copied().collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    pub group_size: usize,
    pub experts: usize,
    pub clip: f64,
    pub kl_weight: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Sample among trie children (otherwise among each level's tokens).
    pub constrained: bool,
    /// Steps between refreshes of the rollout snapshot.
    pub refresh_every: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            experts: 2,
            clip: 0.2,
            kl_weight: 1.0,
            lr: 1e-5,
            steps: 200,
            batch_size: 32,
            temperature: 1.0,
            constrained: true,
            refresh_every: 1,
            seed: 51,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size {} < 2", self.group_size)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!("clip {} outside (0, 1)", self.clip)));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config(format!("kl_weight {} < 0", self.kl_weight)));
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("lr and temperature must be positive".into()));
        }
        if self.batch_size == 0 || self.refresh_every == 0 {
            return Err(Error::Config("batch_size and refresh_every must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        alloc::vec![
            ("group_size", format!("{}", self.group_size)),
            ("experts", format!("{}", self.experts)),
            ("clip", format!("{}", self.clip)),
            ("kl_weight", format!("{}", self.kl_weight)),
            ("lr", format!("{}", self.lr)),
            ("steps", format!("{}", self.steps)),
            ("batch_size", format!("{}", self.batch_size)),
            ("temperature", format!("{}", self.temperature)),
            ("constrained", format!("{}", self.constrained)),
            ("refresh_every", format!("{}", self.refresh_every)),
            ("seed", format!("{}", self.seed)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        match key {
            "group_size" => self.group_size = p(key, value)?,
            "experts" => self.experts = p(key, value)?,
            "clip" => self.clip = p(key, value)?,
            "kl_weight" => self.kl_weight = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "temperature" => self.temperature = p(key, value)?,
            "constrained" => self.constrained = p(key, value)?,
            "refresh_every" => self.refresh_every = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }
}

/// One prompt with its behavior sets.
#[derive(Debug, Clone, PartialEq)]
pub struct RlExample {
    pub query_id: QueryId,
    pub prompt: Vec<usize>,
    pub sets: BehaviorSets,
}

/// Stage-3 prompts of every session whose query is in `queries` and that
/// exposed at least one pooled item.
pub fn build_rl_dataset(
    bundle: &CorpusBundle,
    table: &LookupTable,
    vocab: &SidVocab,
    queries: &BTreeSet<QueryId>,
    history: usize,
) -> Result<Vec<RlExample>> {
    let mut out = Vec::new();
    for s in bundle.sessions() {
        if !queries.contains(&s.query_id) {
            continue;
        }
        let sets = BehaviorSets::from_session(&s, table);
        if sets.exp.is_empty() {
            continue;
        }
        let prompt = session_prompt(Stage::UserQueryToSid, bundle, table, vocab, s.user_id, s.query_id, s.timestamp, history)?.tokens;
        out.push(RlExample { query_id: s.query_id, prompt, sets });
    }
    Ok(out)
}

/// One prompt's outputs after a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub outputs: Vec<SidKey>,
    pub tokens: Vec<[usize; 3]>,
    pub expert: Vec<bool>,
    pub cases: Vec<RewardCase>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RlStep {
    pub step: usize,
    /// Mean reward of sampled (non-expert) outputs.
    pub mean_reward: f64,
    /// Population variance of sampled-output rewards.
    pub reward_variance: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub n_expert: usize,
    /// Smallest expert reward this step (`None` without experts).
    pub min_expert_reward: Option<f64>,
    /// Fraction of groups whose rewards were all equal.
    pub constant_groups: f64,
    pub loss: f64,
}

impl RlStep {
    pub fn line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:.6}\t{}", self.step, self.mean_reward, self.mean_kl, self.clip_fraction, self.n_expert)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RlLog {
    pub steps: Vec<RlStep>,
}

impl RlLog {
    pub fn render(&self) -> String {
        let mut s = String::from("step\tmean_reward\tmean_kl\tclip_frac\tn_expert\n");
        for st in &self.steps {
            s.push_str(&st.line());
            s.push('\n');
        }
        s
    }

    /// Trailing moving average of sampled-output reward.
    pub fn reward_moving_average(&self, window: usize) -> Vec<f64> {
        let r: Vec<f64> = self.steps.iter().map(|s| s.mean_reward).collect();
        if window == 0 || r.len() < window {
            return Vec::new();
        }
        r.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }
}

/// Rollout groups for a batch: `group_size` samples from `snapshot`, then
/// experts, rewards and advantages over the union.
pub fn rollout<R: Rng + ?Sized>(
    snapshot: &PolicyModel,
    batch: &[&RlExample],
    trie: &ConstraintTrie,
    valid: &SidTrie,
    config: &RlConfig,
    rng: &mut R,
    expert_rng: &mut R,
) -> Result<Vec<RolloutGroup>> {
    let prompts: Vec<&[usize]> = batch.iter().map(|e| e.prompt.as_slice()).collect();
    let samples = sample_sids(snapshot, &prompts, config.group_size, config.temperature, config.constrained.then_some(trie), rng)?;
    let vocab = &snapshot.vocab;
    let mut groups = Vec::with_capacity(batch.len());
    for (ex, drawn) in batch.iter().zip(samples) {
        let mut outputs = Vec::new();
        let mut tokens = Vec::new();
        let mut expert = Vec::new();
        for t in drawn {
            outputs.push(vocab.sid_from_tokens(t)?);
            tokens.push(t);
            expert.push(false);
        }
        for sid in sample_experts(&ex.sets, config.experts, expert_rng) {
            tokens.push(vocab.sid_tokens(&sid)?);
            outputs.push(sid);
            expert.push(true);
        }
        let cases: Vec<RewardCase> = outputs.iter().map(|o| reward_case(o, &ex.sets, valid)).collect();
        let rewards: Vec<f64> = cases.iter().map(|c| c.value()).collect();
        let advantages = group_advantages(&rewards, ADVANTAGE_EPS)?;
        groups.push(RolloutGroup { outputs, tokens, expert, cases, rewards, advantages });
    }
    Ok(groups)
}

/// Distinct (prompt, tokens) pairs of the groups, and for every output the
/// index of its pair.
fn unique_pairs<'a>(batch: &[&'a RlExample], groups: &[RolloutGroup]) -> (Vec<(&'a [usize], [usize; 3])>, Vec<usize>) {
    let mut index: BTreeMap<(usize, [usize; 3]), usize> = BTreeMap::new();
    let mut pairs = Vec::new();
    let mut map = Vec::new();
    for (p, (ex, grp)) in batch.iter().zip(groups).enumerate() {
        for &t in &grp.tokens {
            let k = *index.entry((p, t)).or_insert_with(|| {
                pairs.push((ex.prompt.as_slice(), t));
                pairs.len() - 1
            });
            map.push(k);
        }
    }
    (pairs, map)
}

/// Aligns `policy` with group-relative updates, regularized toward
/// `reference`. Outputs are scored under trie normalization when sampling is
/// constrained and per-level normalization otherwise.
pub fn train_eg_grpo(
    policy: &mut PolicyModel,
    reference: &PolicyModel,
    data: &[RlExample],
    trie: &SidTrie,
    config: &RlConfig,
) -> Result<RlLog> {
    config.validate()?;
    let mut log = RlLog::default();
    if config.steps == 0 {
        return Ok(log);
    }
    if data.is_empty() {
        return Err(Error::Empty("RL dataset".into()));
    }
    let ct = ConstraintTrie::new(trie, &policy.vocab)?;
    let norm = if config.constrained { Norm::Trie(&ct) } else { Norm::Level };
    let mut adam = AdamState::new(&policy.params, AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut snapshot: Option<PolicyModel> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..config.steps {
        if step % config.refresh_every == 0 {
            snapshot = (config.refresh_every > 1).then(|| policy.clone());
        }
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut indexed_stream(config.seed, "rl.order", epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let old_model = snapshot.as_ref().unwrap_or(policy);
        let mut rng = indexed_stream(config.seed, "rl.rollout", step as u64);
        let mut erng = indexed_stream(config.seed, "rl.experts", step as u64);
        let groups = rollout(old_model, &batch, &ct, trie, config, &mut rng, &mut erng)?;
        let (pairs, map) = unique_pairs(&batch, &groups);
        let old_unique = match &snapshot {
            Some(s) => Some(s.batch_logprobs(&pairs, norm)?),
            None => None,
        };
        let ref_unique = reference.batch_logprobs(&pairs, norm)?;

        let sizes: Vec<usize> = groups.iter().map(RolloutGroup::len).collect();
        let adv: Vec<f64> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
        let reference_lp: Vec<f64> = map.iter().map(|&k| ref_unique[k]).collect();
        let (stats, grads) = {
            let mut g = Graph::with_params(&policy.params);
            let uniq = policy.logprob_graph(&mut g, &pairs, norm)?;
            let new = g.gather_rows(uniq, &map)?;
            let old: Vec<f64> = match &old_unique {
                Some(o) => map.iter().map(|&k| o[k]).collect(),
                None => g.value(new).data().to_vec(),
            };
            let (loss, stats) = grpo_objective_graph(&mut g, new, &old, &reference_lp, &adv, &sizes, config.clip, config.kl_weight)?;
            (stats, g.backward(loss)?)
        };
        policy.params.zero_grads();
        policy.params.accumulate(&grads);
        adam.step_with_lr(&mut policy.params, config.lr)
            .map_err(|e| Error::Divergence(format!("RL step {step}: {e}")))?;

        let sampled: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.rewards.iter().zip(&g.expert).filter(|(_, &e)| !e).map(|(&r, _)| r))
            .collect();
        let mean = sampled.iter().sum::<f64>() / sampled.len().max(1) as f64;
        let var = sampled.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / sampled.len().max(1) as f64;
        let experts: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.rewards.iter().zip(&g.expert).filter(|(_, &e)| e).map(|(&r, _)| r))
            .collect();
        let constant = groups.iter().filter(|g| g.rewards.iter().all(|&r| r == g.rewards[0])).count();
        let entry = RlStep {
            step,
            mean_reward: mean,
            reward_variance: var,
            mean_kl: stats.mean_kl,
            clip_fraction: stats.clip_fraction,
            n_expert: experts.len(),
            min_expert_reward: experts.iter().copied().reduce(f64::min),
            constant_groups: constant as f64 / groups.len() as f64,
            loss: stats.loss,
        };
        log::debug!("rl {}", entry.line());
        log.steps.push(entry);
    }
    Ok(log)
}
