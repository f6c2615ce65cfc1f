//! Tab-separated artifact files and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gensid_core::corpus::{
    CorpusBundle, GeneratorConfig, HistoryEvent, Interaction, InteractionKind, Item, ItemId, Query, QueryId, UserProfile,
};
use gensid_core::cqsid::RawSid;
use gensid_core::sid_index::{Level3, SidKey};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ITEMS_FILE: &str = "items.tsv";
pub const QUERIES_FILE: &str = "queries.tsv";
pub const USERS_FILE: &str = "users.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const GENERATOR_FILE: &str = "generator.txt";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{0}: not found")]
    NotFound(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: io::Error) -> FormatError {
    if e.kind() == io::ErrorKind::NotFound {
        FormatError::NotFound(path.into())
    } else {
        FormatError::Io { path: path.into(), source: e }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Fields of one record, with enough context to report a positioned error.
struct Record<'a> {
    path: &'a Path,
    line: usize,
    fields: Vec<&'a str>,
}

impl<'a> Record<'a> {
    fn err(&self, msg: impl Into<String>) -> FormatError {
        FormatError::Parse { path: self.path.into(), line: self.line, msg: msg.into() }
    }

    fn get(&self, i: usize) -> Result<&'a str> {
        self.fields.get(i).copied().ok_or_else(|| self.err(format!("expected {} fields, found {}", i + 1, self.fields.len())))
    }

    fn parse<T: FromStr>(&self, i: usize, what: &str) -> Result<T> {
        let s = self.get(i)?;
        s.parse().map_err(|_| self.err(format!("bad {what} `{s}`")))
    }

    fn list<T: FromStr>(&self, i: usize, what: &str) -> Result<Vec<T>> {
        let s = self.get(i)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| p.parse().map_err(|_| self.err(format!("bad {what} `{p}`")))).collect()
    }

    fn expect_len(&self, n: usize) -> Result<()> {
        if self.fields.len() != n {
            return Err(self.err(format!("expected {n} fields, found {}", self.fields.len())));
        }
        Ok(())
    }
}

fn records<'a>(path: &'a Path, text: &'a str) -> impl Iterator<Item = Record<'a>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(move |(i, l)| Record { path, line: i + 1, fields: l.split('\t').collect() })
}

fn csv<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Writes the five corpus files into `dir`.
pub fn save_corpus(bundle: &CorpusBundle, dir: &Path) -> Result<()> {
    let mut items = String::new();
    for it in &bundle.items {
        let _ = writeln!(
            items,
            "{}\t{}\t{}\t{}\t{}\t{}",
            it.item_id,
            it.category_id,
            csv(&it.title_tokens),
            it.efficiency_score,
            csv(&it.embedding),
            csv(&it.attribute_vector)
        );
    }
    let mut queries = String::new();
    for q in &bundle.queries {
        let _ = writeln!(queries, "{}\t{}\t{}\t{}", q.query_id, q.source_category, csv(&q.tokens), csv(&q.embedding));
    }
    let mut users = String::new();
    for u in &bundle.user_profiles {
        let hist: Vec<String> = u.history.iter().map(|e| format!("{}:{}:{}", e.timestamp, e.category_id, e.item_id)).collect();
        let _ = writeln!(users, "{}\t{}\t{}\t{}", u.user_id, u.gender, u.age_group, hist.join(","));
    }
    let mut inter = String::new();
    for x in &bundle.interactions {
        let _ = writeln!(inter, "{}\t{}\t{}\t{}\t{}", x.query_id, x.user_id, x.item_id, x.kind.as_str(), x.timestamp);
    }
    let mut gen = String::new();
    for (k, v) in bundle.config.to_pairs() {
        let _ = writeln!(gen, "{k}={v}");
    }
    write_text(&dir.join(ITEMS_FILE), &items)?;
    write_text(&dir.join(QUERIES_FILE), &queries)?;
    write_text(&dir.join(USERS_FILE), &users)?;
    write_text(&dir.join(INTERACTIONS_FILE), &inter)?;
    write_text(&dir.join(GENERATOR_FILE), &gen)
}

/// Items in the corpus items format.
pub fn parse_items(path: &Path, text: &str) -> Result<Vec<Item>> {
    records(path, text)
        .map(|r| {
            r.expect_len(6)?;
            Ok(Item {
                item_id: r.parse(0, "item id")?,
                category_id: r.parse(1, "category")?,
                title_tokens: r.list(2, "token")?,
                efficiency_score: r.parse(3, "efficiency score")?,
                embedding: r.list(4, "embedding value")?,
                attribute_vector: r.list(5, "attribute value")?,
            })
        })
        .collect()
}

pub fn load_corpus(dir: &Path) -> Result<CorpusBundle> {
    let path = dir.join(GENERATOR_FILE);
    let text = read_text(&path)?;
    let mut config = GeneratorConfig::default();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: String| FormatError::Parse { path: path.clone(), line: i + 1, msg };
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
        config.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
    }

    let path = dir.join(ITEMS_FILE);
    let items = parse_items(&path, &read_text(&path)?)?;

    let path = dir.join(QUERIES_FILE);
    let text = read_text(&path)?;
    let mut queries = Vec::new();
    for r in records(&path, &text) {
        r.expect_len(4)?;
        queries.push(Query {
            query_id: r.parse(0, "query id")?,
            source_category: r.parse(1, "category")?,
            tokens: r.list(2, "token")?,
            embedding: r.list(3, "embedding value")?,
        });
    }

    let path = dir.join(USERS_FILE);
    let text = read_text(&path)?;
    let mut users = Vec::new();
    for r in records(&path, &text) {
        r.expect_len(4)?;
        let hist = r.get(3)?;
        let mut history = Vec::new();
        for ev in hist.split(',').filter(|s| !s.is_empty()) {
            let parts: Vec<&str> = ev.split(':').collect();
            let bad = || r.err(format!("bad history event `{ev}`"));
            if parts.len() != 3 {
                return Err(bad());
            }
            history.push(HistoryEvent {
                timestamp: parts[0].parse().map_err(|_| bad())?,
                category_id: parts[1].parse().map_err(|_| bad())?,
                item_id: parts[2].parse().map_err(|_| bad())?,
            });
        }
        users.push(UserProfile { user_id: r.parse(0, "user id")?, gender: r.parse(1, "gender")?, age_group: r.parse(2, "age group")?, history });
    }

    let path = dir.join(INTERACTIONS_FILE);
    let text = read_text(&path)?;
    let mut interactions = Vec::new();
    for r in records(&path, &text) {
        r.expect_len(5)?;
        let kind = r.get(3)?;
        interactions.push(Interaction {
            query_id: r.parse(0, "query id")?,
            user_id: r.parse(1, "user id")?,
            item_id: r.parse(2, "item id")?,
            kind: InteractionKind::parse(kind).ok_or_else(|| r.err(format!("bad interaction kind `{kind}`")))?,
            timestamp: r.parse(4, "timestamp")?,
        });
    }

    let bundle = CorpusBundle { items, queries, interactions, user_profiles: users, seed: config.seed, config };
    bundle.validate().map_err(|e| FormatError::Invalid { path: dir.into(), msg: e.to_string() })?;
    Ok(bundle)
}

/// `item_id \t k1,k2,k3`
pub fn render_raw_sids(raw: &BTreeMap<ItemId, RawSid>) -> String {
    let mut s = String::new();
    for (i, r) in raw {
        let _ = writeln!(s, "{i}\t{r}");
    }
    s
}

pub fn parse_raw_sids(path: &Path, text: &str) -> Result<BTreeMap<ItemId, RawSid>> {
    let mut out = BTreeMap::new();
    for r in records(path, text) {
        r.expect_len(2)?;
        let ks: Vec<u32> = r.list(1, "code")?;
        if ks.len() != 3 {
            return Err(r.err("expected three codes"));
        }
        let item: ItemId = r.parse(0, "item id")?;
        if out.insert(item, RawSid { k1: ks[0], k2: ks[1], k3: ks[2] }).is_some() {
            return Err(r.err(format!("duplicate item {item}")));
        }
    }
    Ok(out)
}

/// `item_id \t s1 \t s2 \t s3ext`, ordered by item id.
pub fn render_grouped(grouped: &BTreeMap<SidKey, Vec<ItemId>>) -> String {
    let by_item: BTreeMap<ItemId, &SidKey> = grouped.iter().flat_map(|(k, v)| v.iter().map(move |&i| (i, k))).collect();
    let mut s = String::new();
    for (i, k) in by_item {
        let _ = writeln!(s, "{i}\t{}\t{}\t{}", k.s1, k.s2, k.level3);
    }
    s
}

/// Inverse of [`render_grouped`]; item lists come back in ascending id order.
pub fn parse_grouped(path: &Path, text: &str) -> Result<BTreeMap<SidKey, Vec<ItemId>>> {
    let mut out: BTreeMap<SidKey, Vec<ItemId>> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in records(path, text) {
        r.expect_len(4)?;
        let item: ItemId = r.parse(0, "item id")?;
        if !seen.insert(item) {
            return Err(r.err(format!("duplicate item {item}")));
        }
        let l3: Level3 = r.parse(3, "third-level identifier")?;
        let key = SidKey { s1: r.parse(1, "level-1 code")?, s2: r.parse(2, "level-2 code")?, level3: l3 };
        out.entry(key).or_default().push(item);
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    Ok(out)
}

/// One beam entry of a prediction dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query_id: QueryId,
    pub rank: usize,
    pub sid: SidKey,
    pub logprob: f64,
}

/// `query_id \t rank \t s1 \t s2 \t s3ext \t logprob`, ranks from 1.
pub fn render_predictions(preds: &[Prediction]) -> String {
    let mut s = String::new();
    for p in preds {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", p.query_id, p.rank, p.sid.s1, p.sid.s2, p.sid.level3, p.logprob);
    }
    s
}

pub fn parse_predictions(path: &Path, text: &str) -> Result<Vec<Prediction>> {
    records(path, text)
        .map(|r| {
            r.expect_len(6)?;
            Ok(Prediction {
                query_id: r.parse(0, "query id")?,
                rank: r.parse(1, "rank")?,
                sid: SidKey { s1: r.parse(2, "level-1 code")?, s2: r.parse(3, "level-2 code")?, level3: r.parse(4, "third-level identifier")? },
                logprob: r.parse(5, "log-probability")?,
            })
        })
        .collect()
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Run record written next to every artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
    pub timings: Vec<(String, f64)>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (name, h) in &self.inputs {
            let _ = writeln!(s, "input {name} = {h}");
        }
        for (name, h) in &self.outputs {
            let _ = writeln!(s, "output {name} = {h}");
        }
        for (name, t) in &self.timings {
            let _ = writeln!(s, "seconds {name} = {t:.3}");
        }
        s
    }
}
