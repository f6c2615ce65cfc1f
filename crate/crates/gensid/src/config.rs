//! Pipeline configuration: one TOML file, every key addressed as
//! `section.key`, module seeds derived from the root seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gensid_core::corpus::GeneratorConfig;
use gensid_core::cqsid::CqSidConfig;
use gensid_core::eg_grpo::RlConfig;
use gensid_core::eval::DEFAULT_K_ITEMS;
use gensid_core::rng::derive_seed;
use gensid_core::seq2sid::{DatasetOptions, PolicyConfig, SftConfig};
use gensid_core::sid_index::{DEFAULT_G_MAX, DEFAULT_T_MAX};

pub const SEED_ENV: &str = "GENSID_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {0} not found")]
    MissingFile(PathBuf),
    #[error("cannot read config file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("bad value for {key}: {detail}")]
    BadValue { key: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub t_max: usize,
    pub g_max: usize,
    /// Share of items (by efficiency) kept in the recall pool.
    pub pool_fraction: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { t_max: DEFAULT_T_MAX, g_max: DEFAULT_G_MAX, pool_fraction: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub holdout: f64,
    pub stage2_samples: usize,
    pub history: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { holdout: 0.2, stage2_samples: 3, history: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub beams: Vec<usize>,
    pub k_items: usize,
    /// Cap on evaluated cases (0 = all).
    pub max_cases: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beams: vec![1, 5, 10, 20, 50], k_items: DEFAULT_K_ITEMS, max_cases: 0 }
    }
}

impl EvalConfig {
    pub fn max_beam(&self) -> usize {
        self.beams.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    pub corpus: GeneratorConfig,
    pub cqsid: CqSidConfig,
    pub index: IndexConfig,
    pub policy: PolicyConfig,
    pub data: DataConfig,
    pub sft1: SftConfig,
    pub sft2: SftConfig,
    pub sft3: SftConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 1,
            workdir: PathBuf::from("gensid-out"),
            corpus: GeneratorConfig::default(),
            cqsid: CqSidConfig::default(),
            index: IndexConfig::default(),
            policy: PolicyConfig::default(),
            data: DataConfig::default(),
            sft1: SftConfig { epochs: 6, batch_size: 32, lr: 3e-3, seed: 0 },
            sft2: SftConfig { epochs: 10, batch_size: 32, lr: 3e-3, seed: 0 },
            sft3: SftConfig { epochs: 4, batch_size: 32, lr: 1e-3, seed: 0 },
            rl: RlConfig { steps: 80, batch_size: 16, lr: 3e-4, ..RlConfig::default() },
            eval: EvalConfig::default(),
        };
        c.derive_seeds();
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::BadValue { key: key.into(), detail: format!("cannot parse `{v}`") })
}

fn set_sft(c: &mut SftConfig, full: &str, key: &str, v: &str) -> Result<(), ConfigError> {
    match key {
        "epochs" => c.epochs = parse(full, v)?,
        "batch_size" => c.batch_size = parse(full, v)?,
        "lr" => c.lr = parse(full, v)?,
        _ => return Err(ConfigError::UnknownKey(full.into())),
    }
    Ok(())
}

fn core_err(full: &str, e: gensid_core::Error) -> ConfigError {
    match e {
        gensid_core::Error::Config(msg) if msg.starts_with("unknown key") => ConfigError::UnknownKey(full.into()),
        other => ConfigError::BadValue { key: full.into(), detail: other.to_string() },
    }
}

impl PipelineConfig {
    /// Re-derives every module seed from the root seed.
    pub fn derive_seeds(&mut self) {
        let s = self.seed;
        self.corpus.seed = derive_seed(s, "corpus");
        self.corpus.encoder_seed = derive_seed(s, "encoder");
        self.cqsid.seed = derive_seed(s, "cqsid");
        self.policy.seed = derive_seed(s, "policy");
        self.sft1.seed = derive_seed(s, "sft1");
        self.sft2.seed = derive_seed(s, "sft2");
        self.sft3.seed = derive_seed(s, "sft3");
        self.rl.seed = derive_seed(s, "rl");
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.derive_seeds();
        self
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn postprocess_seed(&self) -> u64 {
        derive_seed(self.seed, "postprocess")
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            stage2_samples: self.data.stage2_samples,
            history: self.data.history,
            seed: derive_seed(self.seed, "datasets"),
        }
    }

    /// Sets one dotted key. Module seeds are not settable.
    pub fn set(&mut self, full: &str, value: &str) -> Result<(), ConfigError> {
        let (section, key) = match full.split_once('.') {
            Some(p) => p,
            None => ("", full),
        };
        if !section.is_empty() && key == "seed" {
            return Err(ConfigError::UnknownKey(full.into()));
        }
        match (section, key) {
            ("", "seed") => {
                self.seed = parse(full, value)?;
                self.derive_seeds();
            }
            ("", "workdir") => self.workdir = PathBuf::from(value),
            ("corpus", "encoder_seed") => return Err(ConfigError::UnknownKey(full.into())),
            ("corpus", k) => self.corpus.set(k, value).map_err(|e| core_err(full, e))?,
            ("cqsid", k) => self.cqsid.set(k, value).map_err(|e| core_err(full, e))?,
            ("policy", k) => self.policy.set(k, value).map_err(|e| core_err(full, e))?,
            ("rl", k) => self.rl.set(k, value).map_err(|e| core_err(full, e))?,
            ("sft1", k) => set_sft(&mut self.sft1, full, k, value)?,
            ("sft2", k) => set_sft(&mut self.sft2, full, k, value)?,
            ("sft3", k) => set_sft(&mut self.sft3, full, k, value)?,
            ("index", "t_max") => self.index.t_max = parse(full, value)?,
            ("index", "g_max") => self.index.g_max = parse(full, value)?,
            ("index", "pool_fraction") => self.index.pool_fraction = parse(full, value)?,
            ("data", "holdout") => self.data.holdout = parse(full, value)?,
            ("data", "stage2_samples") => self.data.stage2_samples = parse(full, value)?,
            ("data", "history") => self.data.history = parse(full, value)?,
            ("eval", "beams") => {
                self.eval.beams = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(full, s))
                    .collect::<Result<_, _>>()?;
            }
            ("eval", "k_items") => self.eval.k_items = parse(full, value)?,
            ("eval", "max_cases") => self.eval.max_cases = parse(full, value)?,
            _ => return Err(ConfigError::UnknownKey(full.into())),
        }
        Ok(())
    }

    /// Parses TOML text; tables and dotted keys are equivalent.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat)?;
        let mut cfg = Self::default();
        for (k, v) in flat {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |key: &str, r: gensid_core::Result<()>| r.map_err(|e| ConfigError::BadValue { key: key.into(), detail: e.to_string() });
        wrap("corpus", self.corpus.validate())?;
        wrap("cqsid", self.cqsid.validate(Some(self.corpus.categories)))?;
        wrap("policy", self.policy.validate())?;
        wrap("rl", self.rl.validate())?;
        if self.eval.beams.is_empty() || self.eval.beams.contains(&0) {
            return Err(ConfigError::BadValue { key: "eval.beams".into(), detail: "need positive beam sizes".into() });
        }
        if !(0.0..1.0).contains(&self.data.holdout) {
            return Err(ConfigError::BadValue { key: "data.holdout".into(), detail: "must lie in [0, 1)".into() });
        }
        if !(self.index.pool_fraction > 0.0 && self.index.pool_fraction <= 1.0) {
            return Err(ConfigError::BadValue { key: "index.pool_fraction".into(), detail: "must lie in (0, 1]".into() });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::MissingFile(path.into()),
            _ => ConfigError::Io { path: path.into(), source: e },
        })?;
        Self::from_toml(&text)
    }

    /// Applies `GENSID_SEED` when set.
    pub fn apply_seed_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, &v)?;
            self.derive_seeds();
        }
        Ok(())
    }

    /// SHA-256 over the effective settings; the work directory is excluded.
    pub fn hash(&self) -> String {
        let text: String = self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        crate::formats::sha256_hex(text.as_bytes())
    }

    /// Every effective setting as `section.key = value`, sorted.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("seed".into(), self.seed.to_string());
        let mut put = |section: &str, pairs: Vec<(&'static str, String)>| {
            for (k, v) in pairs {
                m.insert(format!("{section}.{k}"), v);
            }
        };
        put("corpus", self.corpus.to_pairs());
        put("cqsid", self.cqsid.to_pairs());
        put("policy", self.policy.to_pairs());
        put("rl", self.rl.to_pairs());
        for (name, s) in [("sft1", &self.sft1), ("sft2", &self.sft2), ("sft3", &self.sft3)] {
            put(name, vec![("epochs", s.epochs.to_string()), ("batch_size", s.batch_size.to_string()), ("lr", s.lr.to_string()), ("seed", s.seed.to_string())]);
        }
        put("index", vec![("t_max", self.index.t_max.to_string()), ("g_max", self.index.g_max.to_string()), ("pool_fraction", self.index.pool_fraction.to_string())]);
        put("data", vec![("holdout", self.data.holdout.to_string()), ("stage2_samples", self.data.stage2_samples.to_string()), ("history", self.data.history.to_string())]);
        let beams: Vec<String> = self.eval.beams.iter().map(|b| b.to_string()).collect();
        put("eval", vec![("beams", beams.join(",")), ("k_items", self.eval.k_items.to_string()), ("max_cases", self.eval.max_cases.to_string())]);
        m
    }

    /// Settings of the listed sections only, as `key = value` lines.
    pub fn echo(&self, sections: &[&str]) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            if k == "seed" || sections.iter().any(|p| k.starts_with(&format!("{p}."))) {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) -> Result<(), ConfigError> {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten(&key(k), v, out)?;
            }
        }
        toml::Value::String(s) => out.push((prefix.into(), s.clone())),
        toml::Value::Integer(i) => out.push((prefix.into(), i.to_string())),
        toml::Value::Float(f) => out.push((prefix.into(), f.to_string())),
        toml::Value::Boolean(b) => out.push((prefix.into(), b.to_string())),
        toml::Value::Array(a) => {
            let mut parts = Vec::new();
            for x in a {
                match x {
                    toml::Value::Integer(i) => parts.push(i.to_string()),
                    toml::Value::Float(f) => parts.push(f.to_string()),
                    other => {
                        return Err(ConfigError::BadValue { key: prefix.into(), detail: format!("unsupported array element {other}") })
                    }
                }
            }
            out.push((prefix.into(), parts.join(",")));
        }
        toml::Value::Datetime(_) => return Err(ConfigError::BadValue { key: prefix.into(), detail: "datetimes are not supported".into() }),
    }
    Ok(())
}
