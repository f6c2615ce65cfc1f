use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::corpus::{CorpusBundle, InteractionKind, Item, ItemId, Query, QueryId, UserProfile};
use crate::rng::indexed_stream;
use crate::sid_index::{LookupTable, SidKey};
use crate::{Error, Result};

use super::vocab::{SidVocab, BAR, HIST, QUERY, SEMI, STAGE1, STAGE2, STAGE3, TITLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    ItemToSid,
    QueryToSid,
    UserQueryToSid,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::ItemToSid),
            2 => Ok(Stage::QueryToSid),
            3 => Ok(Stage::UserQueryToSid),
            _ => Err(Error::Config(format!("stage {n} outside 1..=3"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::ItemToSid => 1,
            Stage::QueryToSid => 2,
            Stage::UserQueryToSid => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub stage: Stage,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// Item id for stage 1, query id for stages 2 and 3.
    pub source: u64,
    pub prompt: Prompt,
    pub target: SidKey,
    pub target_tokens: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetOptions {
    /// Distinct target SIDs sampled per query in stage 2.
    pub stage2_samples: usize,
    /// History SIDs kept in stage-3 prompts.
    pub history: usize,
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { stage2_samples: 3, history: 5, seed: 31 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DatasetReport {
    pub examples: usize,
    /// Queries (stage 2) or sessions (stage 3) without any pooled behavior.
    pub skipped: usize,
}

pub fn item_prompt(vocab: &SidVocab, item: &Item) -> Result<Prompt> {
    let mut tokens = alloc::vec![STAGE1, BAR, TITLE];
    for &t in &item.title_tokens {
        tokens.push(vocab.text(t)?);
    }
    Ok(Prompt { stage: Stage::ItemToSid, tokens })
}

pub fn query_prompt(vocab: &SidVocab, query: &Query) -> Result<Prompt> {
    let mut tokens = alloc::vec![STAGE2, BAR, QUERY];
    for &t in &query.tokens {
        tokens.push(vocab.text(t)?);
    }
    Ok(Prompt { stage: Stage::QueryToSid, tokens })
}

pub fn user_query_prompt(vocab: &SidVocab, user: &UserProfile, history: &[SidKey], query: &Query) -> Result<Prompt> {
    let mut tokens = alloc::vec![STAGE3, BAR, vocab.gender(user.gender)?, vocab.age(user.age_group)?, BAR, HIST];
    for (i, sid) in history.iter().enumerate() {
        if i > 0 {
            tokens.push(SEMI);
        }
        tokens.extend(vocab.sid_tokens(sid)?);
    }
    tokens.extend([BAR, QUERY]);
    for &t in &query.tokens {
        tokens.push(vocab.text(t)?);
    }
    Ok(Prompt { stage: Stage::UserQueryToSid, tokens })
}

/// SIDs of the user's most recent clicks before `timestamp` in the query's
/// category, oldest first, at most `h` of them. Unpooled items are skipped.
pub fn recent_history(
    bundle: &CorpusBundle,
    table: &LookupTable,
    user: &UserProfile,
    query: &Query,
    timestamp: u64,
    h: usize,
) -> Vec<SidKey> {
    let _ = bundle;
    let mut picked: Vec<SidKey> = user
        .history
        .iter()
        .rev()
        .filter(|e| e.timestamp < timestamp && e.category_id == query.source_category)
        .filter_map(|e| table.sid_of(e.item_id))
        .take(h)
        .collect();
    picked.reverse();
    picked
}

/// Prompt for a session at `stage`.
pub fn session_prompt(
    stage: Stage,
    bundle: &CorpusBundle,
    table: &LookupTable,
    vocab: &SidVocab,
    user_id: u64,
    query_id: QueryId,
    timestamp: u64,
    history: usize,
) -> Result<Prompt> {
    let query = bundle.query(query_id).ok_or_else(|| Error::Invalid(format!("unknown query {query_id}")))?;
    match stage {
        Stage::UserQueryToSid => {
            let user = bundle.user(user_id).ok_or_else(|| Error::Invalid(format!("unknown user {user_id}")))?;
            let hist = recent_history(bundle, table, user, query, timestamp, history);
            user_query_prompt(vocab, user, &hist, query)
        }
        _ => query_prompt(vocab, query),
    }
}

fn example(vocab: &SidVocab, source: u64, prompt: Prompt, target: SidKey) -> Result<Example> {
    Ok(Example { source, prompt, target, target_tokens: vocab.sid_tokens(&target)? })
}

/// Training pairs for one stage. `queries` restricts stages 2 and 3 (e.g. to
/// the training split).
pub fn build_stage_dataset(
    stage: Stage,
    bundle: &CorpusBundle,
    table: &LookupTable,
    vocab: &SidVocab,
    queries: &BTreeSet<QueryId>,
    opts: &DatasetOptions,
) -> Result<(Vec<Example>, DatasetReport)> {
    let mut out = Vec::new();
    let mut report = DatasetReport::default();
    match stage {
        Stage::ItemToSid => {
            for (item, sid) in table.assignments() {
                let it = bundle.item(item).ok_or_else(|| Error::Invalid(format!("unknown item {item}")))?;
                out.push(example(vocab, item, item_prompt(vocab, it)?, sid)?);
            }
        }
        Stage::QueryToSid => {
            let mut positives: BTreeMap<QueryId, BTreeSet<SidKey>> = BTreeMap::new();
            for x in &bundle.interactions {
                if x.kind != InteractionKind::Exposure && queries.contains(&x.query_id) {
                    let e = positives.entry(x.query_id).or_default();
                    if let Some(s) = table.sid_of(x.item_id) {
                        e.insert(s);
                    }
                }
            }
            for &q in queries {
                let sids: Vec<SidKey> = positives.get(&q).map(|s| s.iter().copied().collect()).unwrap_or_default();
                if sids.is_empty() {
                    report.skipped += 1;
                    continue;
                }
                let mut sids = sids;
                sids.shuffle(&mut indexed_stream(opts.seed, "stage2.targets", q));
                let query = bundle.query(q).ok_or_else(|| Error::Invalid(format!("unknown query {q}")))?;
                let prompt = query_prompt(vocab, query)?;
                for &s in sids.iter().take(opts.stage2_samples) {
                    out.push(example(vocab, q, prompt.clone(), s)?);
                }
            }
        }
        Stage::UserQueryToSid => {
            for s in bundle.sessions() {
                if !queries.contains(&s.query_id) {
                    continue;
                }
                let targets: BTreeSet<SidKey> = s.clicked.iter().filter_map(|&i| table.sid_of(i)).collect();
                if targets.is_empty() {
                    report.skipped += 1;
                    continue;
                }
                let prompt = session_prompt(stage, bundle, table, vocab, s.user_id, s.query_id, s.timestamp, opts.history)?;
                for t in targets {
                    out.push(example(vocab, s.query_id, prompt.clone(), t)?);
                }
            }
        }
    }
    report.examples = out.len();
    Ok((out, report))
}

/// Items clicked or purchased in a session, as a sorted set.
pub fn positive_items(clicked: &[ItemId], purchased: &[ItemId]) -> BTreeSet<ItemId> {
    clicked.iter().chain(purchased).copied().collect()
}
