//! Subcommands. Each reads its inputs from the work directory, writes one
//! artifact plus a manifest, and fails with a named prerequisite when an
//! earlier stage has not run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use gensid_core::corpus::{CorpusBundle, Item, ItemId};
use gensid_core::cqsid::CqSidModel;
use gensid_core::eg_grpo::{build_rl_dataset, train_eg_grpo, RlConfig};
use gensid_core::eval::{EvalCase, EvalReport};
use gensid_core::seq2sid::{beam_search_with, query_prompt, session_prompt, ConstraintTrie, PolicyModel, Stage};
use gensid_core::sid_index::{attach_new_items, build_index, LookupTable, SidKey, SidTrie};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::formats::{self, FormatError, Manifest, Prediction};
use crate::pipeline::{self, Split};

#[derive(Debug, Parser)]
#[command(name = "gensid", version, about = "Semantic-ID generative recall pipeline")]
pub struct Cli {
    /// TOML configuration file; defaults are used for unset keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set cqsid.gamma=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory holding all artifacts (default `gensid-out`).
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Beam,
    TopK,
    Exposure,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenCorpus,
    /// Train the quantizer.
    TrainCqsid,
    /// Assign raw SIDs to the efficiency pool.
    AssignSids,
    /// Split oversized clusters into groups.
    Postprocess,
    /// Build the lookup table and trie and report their shape.
    BuildIndex,
    /// Supervised fine-tuning of one stage.
    TrainSft {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
    },
    /// Expert-guided alignment on top of the stage-3 model.
    TrainRl {
        #[arg(long)]
        k: usize,
    },
    /// Evaluate a trained model on held-out queries.
    Eval {
        #[arg(long, value_enum, default_value = "beam")]
        protocol: Protocol,
        /// sft1, sft2, sft3 or rl-k<K>.
        #[arg(long, default_value = "sft2")]
        model: String,
    },
    /// Decode the top-B SIDs with their items.
    Infer {
        #[arg(long)]
        beam: usize,
        #[arg(long, default_value = "sft2")]
        model: String,
        /// Single query; every held-out query when absent.
        #[arg(long)]
        query: Option<u64>,
        /// Personalize the prompt for this user (needs --query).
        #[arg(long, requires = "query")]
        user: Option<u64>,
    },
    /// Attach items outside the index to their clusters.
    AttachItems {
        /// Items file of new items; defaults to corpus items not yet indexed.
        #[arg(long)]
        items: Option<PathBuf>,
    },
    /// Run the whole pipeline and write the four ablation tables.
    ReproTables,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path} not found: run {command} first")]
    Missing { path: PathBuf, command: String },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Other(e) => {
                let diverged = e.chain().any(|c| matches!(c.downcast_ref::<gensid_core::Error>(), Some(gensid_core::Error::Divergence(_))));
                if diverged {
                    4
                } else {
                    1
                }
            }
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Other(e.into())
    }
}

impl From<gensid_core::Error> for CliError {
    fn from(e: gensid_core::Error) -> Self {
        CliError::Other(e.into())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Artifact paths inside the work directory.
#[derive(Debug, Clone)]
pub struct Workdir(pub PathBuf);

impl Workdir {
    pub fn corpus(&self) -> PathBuf {
        self.0.join("corpus")
    }
    pub fn cqsid(&self) -> PathBuf {
        self.0.join("cqsid.ckpt")
    }
    pub fn cqsid_log(&self) -> PathBuf {
        self.0.join("cqsid_log.tsv")
    }
    pub fn raw_sids(&self) -> PathBuf {
        self.0.join("sids_raw.tsv")
    }
    pub fn sids(&self) -> PathBuf {
        self.0.join("sids.tsv")
    }
    pub fn index(&self) -> PathBuf {
        self.0.join("index.txt")
    }
    pub fn model(&self, name: &str) -> PathBuf {
        self.0.join("models").join(format!("{name}.ckpt"))
    }
    pub fn train_log(&self, name: &str) -> PathBuf {
        self.0.join("logs").join(format!("{name}.tsv"))
    }
    pub fn report(&self, model: &str, protocol: Protocol) -> PathBuf {
        let p = match protocol {
            Protocol::Beam => "beam",
            Protocol::TopK => "top-k",
            Protocol::Exposure => "exposure",
        };
        self.0.join("reports").join(format!("{model}_{p}.txt"))
    }
    pub fn predictions(&self, model: &str, beam: usize) -> PathBuf {
        self.0.join("predictions").join(format!("{model}_b{beam}.tsv"))
    }
    pub fn attached(&self) -> PathBuf {
        self.0.join("sids_attached.tsv")
    }
    pub fn attach_report(&self) -> PathBuf {
        self.0.join("attach_report.tsv")
    }
    pub fn tables(&self) -> PathBuf {
        self.0.join("tables.txt")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.0.join("manifests").join(format!("{command}.txt"))
    }
}

/// Builds the effective configuration: file, then `GENSID_SEED`, then `--set`.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_seed_env()?;
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Run {
    cfg: PipelineConfig,
    dir: Workdir,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
    timings: Vec<(String, f64)>,
    clock: Instant,
}

fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut all = Vec::new();
        for n in names {
            all.extend(formats::read_bytes(&n)?);
        }
        return Ok(formats::sha256_hex(&all));
    }
    Ok(formats::sha256_hex(&formats::read_bytes(path)?))
}

impl Run {
    fn new(cfg: PipelineConfig) -> Self {
        let dir = Workdir(cfg.workdir.clone());
        Self { cfg, dir, inputs: Vec::new(), outputs: Vec::new(), timings: Vec::new(), clock: Instant::now() }
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir.0).unwrap_or(path).display().to_string()
    }

    /// Records an input, failing with the subcommand that produces it.
    fn require(&mut self, path: &Path, command: &str) -> Result<()> {
        if !path.exists() {
            return Err(CliError::Missing { path: path.into(), command: command.into() });
        }
        let h = hash_path(path)?;
        self.inputs.push((self.rel(path), h));
        Ok(())
    }

    fn wrote(&mut self, path: &Path) -> Result<()> {
        let h = hash_path(path)?;
        self.outputs.push((self.rel(path), h));
        Ok(())
    }

    fn write_text(&mut self, path: &Path, text: &str) -> Result<()> {
        formats::write_text(path, text)?;
        self.wrote(path)
    }

    fn write_bytes(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        formats::write_bytes(path, bytes)?;
        self.wrote(path)
    }

    fn lap(&mut self, name: &str) {
        self.timings.push((name.into(), self.clock.elapsed().as_secs_f64()));
        self.clock = Instant::now();
    }

    fn finish(self, command: &str) -> Result<()> {
        let m = Manifest {
            command: command.into(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            timings: self.timings,
        };
        formats::write_text(&self.dir.manifest(command), &m.render())?;
        Ok(())
    }

    fn corpus(&mut self) -> Result<CorpusBundle> {
        let p = self.dir.corpus();
        self.require(&p, "gen-corpus")?;
        Ok(formats::load_corpus(&p)?)
    }

    fn quantizer(&mut self) -> Result<CqSidModel> {
        let p = self.dir.cqsid();
        self.require(&p, "train-cqsid")?;
        Ok(CqSidModel::from_checkpoint(&formats::read_bytes(&p)?)?)
    }

    fn index(&mut self, bundle: &CorpusBundle) -> Result<(BTreeMap<SidKey, Vec<ItemId>>, LookupTable, SidTrie)> {
        let p = self.dir.sids();
        self.require(&p, "assign-sids/postprocess")?;
        let grouped = formats::parse_grouped(&p, &formats::read_text(&p)?)?;
        let scores: BTreeMap<ItemId, f64> = bundle.items.iter().map(|i| (i.item_id, i.efficiency_score)).collect();
        let (table, trie) = build_index(&grouped, &scores)?;
        Ok((grouped, table, trie))
    }

    fn policy(&mut self, name: &str) -> Result<PolicyModel> {
        let p = self.dir.model(name);
        let producer = match name {
            "sft1" => "train-sft --stage 1".to_string(),
            "sft2" => "train-sft --stage 2".to_string(),
            "sft3" => "train-sft --stage 3".to_string(),
            n => match n.strip_prefix("rl-k") {
                Some(k) => format!("train-rl --k {k}"),
                None => return Err(anyhow::anyhow!("unknown model `{name}`; expected sft1, sft2, sft3 or rl-k<K>").into()),
            },
        };
        self.require(&p, &producer)?;
        Ok(PolicyModel::from_checkpoint(&formats::read_bytes(&p)?)?)
    }
}

fn personalized_model(name: &str) -> bool {
    name == "sft3" || name.starts_with("rl-")
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let mut r = Run::new(cfg);
    let name = match &cli.command {
        Command::GenCorpus => {
            let bundle = pipeline::corpus(&r.cfg)?;
            r.lap("generate");
            let p = r.dir.corpus();
            formats::save_corpus(&bundle, &p)?;
            r.wrote(&p)?;
            log::info!("{} items, {} queries, {} interactions", bundle.items.len(), bundle.queries.len(), bundle.interactions.len());
            "gen-corpus"
        }
        Command::TrainCqsid => {
            let bundle = r.corpus()?;
            let split = pipeline::split(&bundle, &r.cfg);
            let (model, log) = pipeline::train_quantizer(&bundle, &split, &r.cfg)?;
            r.lap("train");
            let mut text = String::from("epoch\treconstruction\tcommitment\tinfonce\ttotal\tutil1\tutil2\tutil3\trestarts\n");
            for e in &log.epochs {
                let l = &e.losses;
                text.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                    e.epoch, l.reconstruction, l.commitment, l.infonce, l.total, e.utilization[0], e.utilization[1], e.utilization[2], e.restarts
                ));
            }
            let (cq, lp) = (r.dir.cqsid(), r.dir.cqsid_log());
            r.write_bytes(&cq, &model.to_checkpoint()?)?;
            r.write_text(&lp, &text)?;
            "train-cqsid"
        }
        Command::AssignSids => {
            let bundle = r.corpus()?;
            let model = r.quantizer()?;
            let raw = pipeline::assign(&bundle, &model, &r.cfg)?;
            r.lap("assign");
            let p = r.dir.raw_sids();
            r.write_text(&p, &formats::render_raw_sids(&raw))?;
            "assign-sids"
        }
        Command::Postprocess => {
            let p = r.dir.raw_sids();
            r.require(&p, "assign-sids")?;
            let raw = formats::parse_raw_sids(&p, &formats::read_text(&p)?)?;
            let grouped = gensid_core::sid_index::postprocess(
                &gensid_core::sid_index::group_raw(raw.iter().map(|(&i, &s)| (i, s))),
                r.cfg.index.t_max,
                r.cfg.index.g_max,
                r.cfg.postprocess_seed(),
            )?;
            r.lap("postprocess");
            let out = r.dir.sids();
            r.write_text(&out, &formats::render_grouped(&grouped))?;
            "postprocess"
        }
        Command::BuildIndex => {
            let bundle = r.corpus()?;
            let (_, table, trie) = r.index(&bundle)?;
            table.check()?;
            r.lap("build");
            let text = format!(
                "sids = {}\nitems = {}\nlargest_cluster = {}\ntrie_leaves = {}\nlevel1_codes = {}\n",
                table.num_sids(),
                table.num_items(),
                table.largest_cluster(),
                trie.len(),
                trie.level1().count()
            );
            let p = r.dir.index();
            r.write_text(&p, &text)?;
            print!("{text}");
            "build-index"
        }
        Command::TrainSft { stage } => {
            let stage = Stage::from_number(*stage)?;
            let bundle = r.corpus()?;
            let (_, table, _) = r.index(&bundle)?;
            let split = pipeline::split(&bundle, &r.cfg);
            let mut policy = match stage {
                Stage::ItemToSid => PolicyModel::new(&r.cfg.policy, pipeline::vocab(&bundle, &table, &r.cfg)?)?,
                Stage::QueryToSid => r.policy("sft1")?,
                Stage::UserQueryToSid => r.policy("sft2")?,
            };
            let log = pipeline::sft_stage(&mut policy, stage, &bundle, &table, &split, &r.cfg)?;
            r.lap("train");
            let name = format!("sft{}", stage.number());
            let mut text = String::from("epoch\tloss\n");
            for (e, l) in log.epoch_losses.iter().enumerate() {
                text.push_str(&format!("{}\t{l:.6}\n", e + 1));
            }
            let (mp, lp) = (r.dir.model(&name), r.dir.train_log(&name));
            r.write_bytes(&mp, &policy.to_checkpoint())?;
            r.write_text(&lp, &text)?;
            return r.finish(&format!("train-sft-{}", stage.number()));
        }
        Command::TrainRl { k } => {
            let bundle = r.corpus()?;
            let (_, table, trie) = r.index(&bundle)?;
            let reference = r.policy("sft3")?;
            let split = pipeline::split(&bundle, &r.cfg);
            let data = build_rl_dataset(&bundle, &table, &reference.vocab, &split.train, r.cfg.data.history)?;
            let rc = RlConfig { experts: *k, ..r.cfg.rl.clone() };
            let mut policy = reference.clone();
            let log = train_eg_grpo(&mut policy, &reference, &data, &trie, &rc)?;
            r.lap("train");
            let name = format!("rl-k{k}");
            let (mp, lp) = (r.dir.model(&name), r.dir.train_log(&name));
            r.write_bytes(&mp, &policy.to_checkpoint())?;
            r.write_text(&lp, &log.render())?;
            return r.finish(&format!("train-rl-k{k}"));
        }
        Command::Eval { protocol, model } => {
            let bundle = r.corpus()?;
            let (_, table, trie) = r.index(&bundle)?;
            let policy = r.policy(model)?;
            let split = pipeline::split(&bundle, &r.cfg);
            let cases = eval_cases(&bundle, &table, &policy, &split, &r.cfg, personalized_model(model))?;
            let (full, _) = pipeline::eval_model(&policy, cases, &table, &trie, &r.cfg, model)?;
            r.lap("eval");
            let keep: Vec<String> = match protocol {
                Protocol::Beam => vec!["clk".into()],
                Protocol::TopK => vec![format!("top{}", r.cfg.eval.k_items)],
                Protocol::Exposure => vec!["exp".into(), "pvr".into()],
            };
            let mut report = EvalReport::new(&full.title);
            report.rows = full.rows.into_iter().filter(|(m, _)| keep.contains(m)).collect();
            report.counts = full.counts;
            let text = format!("{}\n{}", report.render_table(), report.render_lines());
            let p = r.dir.report(model, *protocol);
            r.write_text(&p, &text)?;
            print!("{text}");
            let p = r.dir.report(model, *protocol);
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            return r.finish(&format!("eval-{stem}"));
        }
        Command::Infer { beam, model, query, user } => {
            if *beam == 0 {
                return Err(ConfigError::BadValue { key: "--beam".into(), detail: "must be at least 1".into() }.into());
            }
            let bundle = r.corpus()?;
            let (_, table, trie) = r.index(&bundle)?;
            let policy = r.policy(model)?;
            let ct = ConstraintTrie::new(&trie, &policy.vocab)?;
            let queries: Vec<u64> = match query {
                Some(q) => vec![*q],
                None => pipeline::split(&bundle, &r.cfg).test.into_iter().collect(),
            };
            let mut preds = Vec::new();
            let mut shown = String::new();
            for q in queries {
                let prompt = match user {
                    Some(u) => session_prompt(Stage::UserQueryToSid, &bundle, &table, &policy.vocab, *u, q, u64::MAX, r.cfg.data.history)?,
                    None => query_prompt(&policy.vocab, bundle.query(q).with_context(|| format!("unknown query {q}"))?)?,
                };
                for (rank, b) in beam_search_with(&policy, &prompt.tokens, *beam, &ct)?.into_iter().enumerate() {
                    let items = table.items(&b.sid).unwrap_or(&[]);
                    shown.push_str(&format!("{q}\t{}\t{}\t{:.4}\t{}\n", rank + 1, b.sid, b.logprob, items.len()));
                    preds.push(Prediction { query_id: q, rank: rank + 1, sid: b.sid, logprob: b.logprob });
                }
            }
            r.lap("decode");
            let p = r.dir.predictions(model, *beam);
            r.write_text(&p, &formats::render_predictions(&preds))?;
            if query.is_some() {
                print!("{shown}");
            }
            return r.finish(&format!("infer-{model}-b{beam}"));
        }
        Command::AttachItems { items } => {
            let bundle = r.corpus()?;
            let model = r.quantizer()?;
            let (_, mut table, mut trie) = r.index(&bundle)?;
            let new_items: Vec<Item> = match items {
                Some(p) => {
                    r.require(p, "an items file")?;
                    formats::parse_items(p, &formats::read_text(p)?)?
                }
                None => bundle.items.iter().filter(|i| table.sid_of(i.item_id).is_none()).cloned().collect(),
            };
            let report = attach_new_items(&model, &mut table, &mut trie, &new_items, r.cfg.index.t_max)?;
            r.lap("attach");
            let created: BTreeSet<SidKey> = report.created.iter().copied().collect();
            let mut text = String::new();
            for (i, k) in &report.attached {
                text.push_str(&format!("{i}\t{}\t{}\t{}\t{}\n", k.s1, k.s2, k.level3, u8::from(created.contains(k))));
            }
            let grouped: BTreeMap<SidKey, Vec<ItemId>> = table.iter().map(|(k, v)| (*k, v.to_vec())).collect();
            let (rp, ap) = (r.dir.attach_report(), r.dir.attached());
            r.write_text(&rp, &text)?;
            r.write_text(&ap, &formats::render_grouped(&grouped))?;
            log::info!("attached {} items, {} new SIDs, {} clusters above t_max", report.attached.len(), report.created.len(), report.overflow.len());
            "attach-items"
        }
        Command::ReproTables => {
            let tables = pipeline::repro_tables(&r.cfg)?;
            r.timings.extend(tables.timings.iter().cloned());
            let text = tables.render();
            let p = r.dir.tables();
            r.write_text(&p, &text)?;
            print!("{text}");
            "repro-tables"
        }
    };
    r.finish(name)
}

fn eval_cases(
    bundle: &CorpusBundle,
    table: &LookupTable,
    policy: &PolicyModel,
    split: &Split,
    cfg: &PipelineConfig,
    personalized: bool,
) -> anyhow::Result<Vec<EvalCase>> {
    if personalized {
        pipeline::personalized_cases(bundle, table, &policy.vocab, &split.test, cfg.data.history, cfg.eval.max_cases)
    } else {
        pipeline::semantic_cases(bundle, table, &policy.vocab, &split.test, cfg.eval.max_cases)
    }
}
