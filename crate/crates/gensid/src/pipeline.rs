//! In-memory pipeline stages shared by the subcommands and the table
//! reproductions.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use anyhow::{Context, Result};
use gensid_core::corpus::{generate_corpus, CorpusBundle, ItemId, QueryId};
use gensid_core::cqsid::{click_pairs, train_cqsid_with_pairs, visible_categories, CqSidModel, RawSid, TrainLog};
use gensid_core::eg_grpo::{build_rl_dataset, train_eg_grpo, RlConfig, RlLog};
use gensid_core::eval::{decode_cases, evaluate, EvalCase, EvalReport};
use gensid_core::nn::Tensor;
use gensid_core::seq2sid::{
    build_stage_dataset, query_prompt, session_prompt, sft_train, ConstraintTrie, PolicyModel, SftConfig, SftLog,
    SidVocab, Stage,
};
use gensid_core::sid_index::{build_index, filter_pool, group_raw, postprocess, LookupTable, PoolRule, SidKey, SidTrie};

use crate::config::PipelineConfig;

#[derive(Debug, Clone)]
pub struct Split {
    pub train: BTreeSet<QueryId>,
    pub test: BTreeSet<QueryId>,
}

pub fn split(bundle: &CorpusBundle, cfg: &PipelineConfig) -> Split {
    let (train, test) = bundle.split_queries(cfg.data.holdout, cfg.split_seed());
    Split { train, test }
}

pub fn corpus(cfg: &PipelineConfig) -> Result<CorpusBundle> {
    Ok(generate_corpus(&cfg.corpus)?)
}

/// Quantizer, raw and grouped assignments, lookup table and trie.
#[derive(Debug, Clone)]
pub struct SidBuild {
    pub model: CqSidModel,
    pub log: TrainLog,
    pub raw: BTreeMap<ItemId, RawSid>,
    pub grouped: BTreeMap<SidKey, Vec<ItemId>>,
    pub table: LookupTable,
    pub trie: SidTrie,
}

/// Trains the quantizer with clicks of training queries only.
pub fn train_quantizer(bundle: &CorpusBundle, split: &Split, cfg: &PipelineConfig) -> Result<(CqSidModel, TrainLog)> {
    let pairs = click_pairs(bundle, &split.test);
    Ok(train_cqsid_with_pairs(bundle, &cfg.cqsid, &pairs)?)
}

/// Raw SIDs of the pooled items.
pub fn assign(bundle: &CorpusBundle, model: &CqSidModel, cfg: &PipelineConfig) -> Result<BTreeMap<ItemId, RawSid>> {
    let pool = filter_pool(&bundle.items, PoolRule::TopFraction(cfg.index.pool_fraction))?;
    if let Some(w) = &pool.warning {
        log::warn!("{w}");
    }
    let keep: BTreeSet<ItemId> = pool.items.iter().copied().collect();
    let visible = visible_categories(bundle, &model.config);
    let mut rows = Vec::new();
    let mut cats = Vec::new();
    let mut ids = Vec::new();
    for (it, cat) in bundle.items.iter().zip(visible) {
        if keep.contains(&it.item_id) {
            rows.push(it.embedding.clone());
            cats.push(cat);
            ids.push(it.item_id);
        }
    }
    let sids = model.assign_batch(&Tensor::from_rows(&rows)?, &cats)?;
    Ok(ids.into_iter().zip(sids).collect())
}

pub fn index(
    bundle: &CorpusBundle,
    raw: &BTreeMap<ItemId, RawSid>,
    cfg: &PipelineConfig,
) -> Result<(BTreeMap<SidKey, Vec<ItemId>>, LookupTable, SidTrie)> {
    let grouped = postprocess(&group_raw(raw.iter().map(|(&i, &s)| (i, s))), cfg.index.t_max, cfg.index.g_max, cfg.postprocess_seed())?;
    let scores: BTreeMap<ItemId, f64> = bundle.items.iter().map(|i| (i.item_id, i.efficiency_score)).collect();
    let (table, trie) = build_index(&grouped, &scores)?;
    Ok((grouped, table, trie))
}

pub fn build_sids(bundle: &CorpusBundle, split: &Split, cfg: &PipelineConfig) -> Result<SidBuild> {
    let (model, log) = train_quantizer(bundle, split, cfg)?;
    let raw = assign(bundle, &model, cfg)?;
    let (grouped, table, trie) = index(bundle, &raw, cfg)?;
    Ok(SidBuild { model, log, raw, grouped, table, trie })
}

pub fn vocab(bundle: &CorpusBundle, table: &LookupTable, cfg: &PipelineConfig) -> Result<SidVocab> {
    let c = &bundle.config;
    Ok(SidVocab::new(c.genders as usize, c.age_groups as usize, c.text_vocab_size(), cfg.cqsid.codebook_sizes, table)?)
}

pub fn sft_config(cfg: &PipelineConfig, stage: Stage) -> &SftConfig {
    match stage {
        Stage::ItemToSid => &cfg.sft1,
        Stage::QueryToSid => &cfg.sft2,
        Stage::UserQueryToSid => &cfg.sft3,
    }
}

/// One supervised stage on training queries (stage 1 uses every pooled item).
pub fn sft_stage(
    model: &mut PolicyModel,
    stage: Stage,
    bundle: &CorpusBundle,
    table: &LookupTable,
    split: &Split,
    cfg: &PipelineConfig,
) -> Result<SftLog> {
    let (data, report) = build_stage_dataset(stage, bundle, table, &model.vocab, &split.train, &cfg.dataset_options())?;
    log::info!("stage {} dataset: {} examples, {} skipped", stage.number(), report.examples, report.skipped);
    let t = Instant::now();
    let log = sft_train(model, &data, sft_config(cfg, stage)).with_context(|| format!("SFT stage {}", stage.number()))?;
    log::info!("stage {} trained in {:.1?}, final loss {:.4}", stage.number(), t.elapsed(), log.epoch_losses.last().unwrap_or(&f64::NAN));
    Ok(log)
}

fn capped(mut cases: Vec<EvalCase>, cap: usize) -> Vec<EvalCase> {
    if cap > 0 && cases.len() > cap {
        cases.truncate(cap);
    }
    cases
}

/// One case per held-out query with at least one pooled click.
pub fn semantic_cases(bundle: &CorpusBundle, table: &LookupTable, vocab: &SidVocab, queries: &BTreeSet<QueryId>, cap: usize) -> Result<Vec<EvalCase>> {
    let mut clicked: BTreeMap<QueryId, BTreeSet<ItemId>> = BTreeMap::new();
    let mut exposed: BTreeMap<QueryId, BTreeSet<ItemId>> = BTreeMap::new();
    for s in bundle.sessions() {
        if !queries.contains(&s.query_id) {
            continue;
        }
        let pooled = |v: &[ItemId]| v.iter().copied().filter(|&i| table.sid_of(i).is_some()).collect::<Vec<_>>();
        clicked.entry(s.query_id).or_default().extend(pooled(&s.clicked).into_iter().chain(pooled(&s.purchased)));
        exposed.entry(s.query_id).or_default().extend(pooled(&s.exposed));
    }
    let mut out = Vec::new();
    for (q, c) in clicked {
        if c.is_empty() {
            continue;
        }
        let query = bundle.query(q).context("unknown query")?;
        let prompt = query_prompt(vocab, query)?.tokens;
        let e = exposed.remove(&q).unwrap_or_default();
        out.push(EvalCase::new(q, prompt, c.into_iter().collect(), e.into_iter().collect(), Vec::new(), table)?);
    }
    Ok(capped(out, cap))
}

/// One case per held-out session with at least one pooled click.
pub fn personalized_cases(
    bundle: &CorpusBundle,
    table: &LookupTable,
    vocab: &SidVocab,
    queries: &BTreeSet<QueryId>,
    history: usize,
    cap: usize,
) -> Result<Vec<EvalCase>> {
    let mut out = Vec::new();
    for s in bundle.sessions() {
        if !queries.contains(&s.query_id) {
            continue;
        }
        let clicked: BTreeSet<ItemId> =
            s.clicked.iter().chain(&s.purchased).copied().filter(|&i| table.sid_of(i).is_some()).collect();
        if clicked.is_empty() {
            continue;
        }
        let exposed: Vec<ItemId> = s.exposed.iter().copied().filter(|&i| table.sid_of(i).is_some()).collect();
        let prompt = session_prompt(Stage::UserQueryToSid, bundle, table, vocab, s.user_id, s.query_id, s.timestamp, history)?.tokens;
        out.push(EvalCase::new(s.query_id, prompt, clicked.into_iter().collect(), exposed, Vec::new(), table)?);
    }
    Ok(capped(out, cap))
}

pub fn eval_model(
    model: &PolicyModel,
    mut cases: Vec<EvalCase>,
    table: &LookupTable,
    trie: &SidTrie,
    cfg: &PipelineConfig,
    title: &str,
) -> Result<(EvalReport, Vec<EvalCase>)> {
    let ct = ConstraintTrie::new(trie, &model.vocab)?;
    decode_cases(model, &mut cases, &ct, cfg.eval.max_beam())?;
    let report = evaluate(&cases, &cfg.eval.beams, table, cfg.eval.k_items, title)?;
    Ok((report, cases))
}

/// Everything one seed's semantic run produces.
pub struct SemanticRun {
    pub bundle: CorpusBundle,
    pub split: Split,
    pub sids: SidBuild,
    pub policy: PolicyModel,
    pub report: EvalReport,
    pub timings: Vec<(String, f64)>,
}

/// Quantizer, stages 1 and 2, held-out query evaluation.
pub fn run_semantic(cfg: &PipelineConfig) -> Result<SemanticRun> {
    let mut timings = Vec::new();
    let mut t = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), t.elapsed().as_secs_f64()));
        t = Instant::now();
    };
    let bundle = corpus(cfg)?;
    let split = split(&bundle, cfg);
    let sids = build_sids(&bundle, &split, cfg)?;
    lap("cqsid", &mut timings);
    let vocab = vocab(&bundle, &sids.table, cfg)?;
    let mut policy = PolicyModel::new(&cfg.policy, vocab)?;
    sft_stage(&mut policy, Stage::ItemToSid, &bundle, &sids.table, &split, cfg)?;
    sft_stage(&mut policy, Stage::QueryToSid, &bundle, &sids.table, &split, cfg)?;
    lap("sft", &mut timings);
    let cases = semantic_cases(&bundle, &sids.table, &policy.vocab, &split.test, cfg.eval.max_cases)?;
    let (report, _) = eval_model(&policy, cases, &sids.table, &sids.trie, cfg, "semantic")?;
    lap("eval", &mut timings);
    Ok(SemanticRun { bundle, split, sids, policy, report, timings })
}

/// Runs stage 3 on top of a semantic run's policy.
pub fn personalize(run: &SemanticRun, cfg: &PipelineConfig) -> Result<PolicyModel> {
    let mut policy = run.policy.clone();
    sft_stage(&mut policy, Stage::UserQueryToSid, &run.bundle, &run.sids.table, &run.split, cfg)?;
    Ok(policy)
}

pub fn eval_personalized(run: &SemanticRun, policy: &PolicyModel, cfg: &PipelineConfig, title: &str) -> Result<EvalReport> {
    let cases = personalized_cases(&run.bundle, &run.sids.table, &policy.vocab, &run.split.test, cfg.data.history, cfg.eval.max_cases)?;
    Ok(eval_model(policy, cases, &run.sids.table, &run.sids.trie, cfg, title)?.0)
}

/// Aligns a copy of `reference` on training sessions.
pub fn align(run: &SemanticRun, reference: &PolicyModel, rl: &RlConfig, cfg: &PipelineConfig) -> Result<(PolicyModel, RlLog)> {
    let data = build_rl_dataset(&run.bundle, &run.sids.table, &reference.vocab, &run.split.train, cfg.data.history)?;
    let mut policy = reference.clone();
    let log = train_eg_grpo(&mut policy, reference, &data, &run.sids.trie, rl)?;
    Ok((policy, log))
}

/// Averages over the logged steps of an RL run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlSummary {
    pub mean_reward: f64,
    pub reward_variance: f64,
    pub clip_fraction: f64,
    pub final_kl: f64,
    pub experts: usize,
    pub min_expert_reward: Option<f64>,
}

pub fn summarize(log: &RlLog) -> RlSummary {
    let n = log.steps.len().max(1) as f64;
    let mean = |f: fn(&gensid_core::eg_grpo::RlStep) -> f64| log.steps.iter().map(f).sum::<f64>() / n;
    RlSummary {
        mean_reward: mean(|s| s.mean_reward),
        reward_variance: mean(|s| s.reward_variance),
        clip_fraction: mean(|s| s.clip_fraction),
        final_kl: log.steps.last().map_or(0.0, |s| s.mean_kl),
        experts: log.steps.iter().map(|s| s.n_expert).sum(),
        min_expert_reward: log.steps.iter().filter_map(|s| s.min_expert_reward).reduce(f64::min),
    }
}

/// Copies `metrics` of `src` into `dst` under `label.metric`.
fn merge(dst: &mut EvalReport, label: &str, src: &EvalReport, metrics: &[&str]) {
    for &m in metrics {
        if let Some((_, row)) = src.rows.iter().find(|(name, _)| name == m) {
            for (&b, &v) in row {
                dst.insert(&format!("{label}.{m}"), b, v);
            }
        }
    }
}

/// The four ablation tables for one root seed.
pub struct Tables {
    pub same_beam: EvalReport,
    pub top_k: EvalReport,
    pub personalized: EvalReport,
    pub rl: EvalReport,
    pub timings: Vec<(String, f64)>,
}

impl Tables {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in [&self.same_beam, &self.top_k, &self.personalized, &self.rl] {
            s.push_str(&r.render_table());
            s.push('\n');
            s.push_str(&r.render_lines());
            s.push('\n');
        }
        s
    }
}

pub const SEMANTIC_VARIANTS: [(&str, bool, bool); 4] =
    [("cqsid", true, true), ("no_cate", false, true), ("no_qi", true, false), ("rqvae", false, false)];

pub const RL_EXPERTS: [usize; 3] = [0, 2, 4];

pub fn repro_tables(cfg: &PipelineConfig) -> Result<Tables> {
    let topk = format!("top{}", cfg.eval.k_items);
    let mut same_beam = EvalReport::new("same-beam semantic hitrate");
    let mut top_k = EvalReport::new(&format!("top-{} truncation semantic hitrate", cfg.eval.k_items));
    let mut timings = Vec::new();
    let mut full = None;
    for (label, cate, qi) in SEMANTIC_VARIANTS {
        let mut c = cfg.clone();
        c.cqsid.use_category = cate;
        c.cqsid.use_contrastive = qi;
        let t = Instant::now();
        let run = run_semantic(&c)?;
        timings.push((format!("semantic {label}"), t.elapsed().as_secs_f64()));
        merge(&mut same_beam, label, &run.report, &["clk"]);
        merge(&mut top_k, label, &run.report, &[&topk]);
        if full.is_none() {
            full = Some(run);
        }
    }
    let run = full.expect("variant list is non-empty");
    same_beam.counts = run.report.counts.clone();
    top_k.counts = run.report.counts.clone();

    let t = Instant::now();
    let stage3 = personalize(&run, cfg)?;
    let mut personalized = EvalReport::new("personalized hitrate");
    let before = eval_personalized(&run, &run.policy, cfg, "stage2")?;
    let after = eval_personalized(&run, &stage3, cfg, "stage3")?;
    merge(&mut personalized, "stage2", &before, &["clk", "exp", "pvr"]);
    merge(&mut personalized, "stage3", &after, &["clk", "exp", "pvr"]);
    personalized.counts = after.counts.clone();
    timings.push(("personalized".into(), t.elapsed().as_secs_f64()));

    let mut rl = EvalReport::new("alignment ablation (personalized)");
    merge(&mut rl, "sft", &after, &["clk", "exp", "pvr"]);
    for k in RL_EXPERTS {
        let t = Instant::now();
        let rc = RlConfig { experts: k, ..cfg.rl.clone() };
        let (policy, log) = align(&run, &stage3, &rc, cfg)?;
        let r = eval_personalized(&run, &policy, cfg, "rl")?;
        let label = format!("k{k}");
        merge(&mut rl, &label, &r, &["clk", "exp", "pvr"]);
        let s = summarize(&log);
        rl.config.push((format!("{label} mean_reward"), format!("{:.6}", s.mean_reward)));
        rl.config.push((format!("{label} reward_variance"), format!("{:.6}", s.reward_variance)));
        rl.config.push((format!("{label} clip_fraction"), format!("{:.6}", s.clip_fraction)));
        rl.config.push((format!("{label} final_kl"), format!("{:.6}", s.final_kl)));
        rl.config.push((format!("{label} experts"), s.experts.to_string()));
        timings.push((format!("rl {label}"), t.elapsed().as_secs_f64()));
    }
    rl.counts = after.counts;
    Ok(Tables { same_beam, top_k, personalized, rl, timings })
}
