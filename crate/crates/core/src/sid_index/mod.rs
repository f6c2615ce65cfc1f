//! Semantic identifiers after grouping, the identifier-to-items table, the
//! trie of valid identifiers, recall-pool filtering and incremental attachment.

#[cfg(test)]
mod tests;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;

use crate::corpus::{Item, ItemId};
use crate::cqsid::{CqSidModel, RawSid};
use crate::rng::indexed_stream;
use crate::{Error, Result};

pub const DEFAULT_T_MAX: usize = 50;
pub const DEFAULT_G_MAX: usize = 100;

/// Third level of a [`SidKey`]: the raw index for clusters that were never
/// split, or a base index plus a 1-based group for split clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level3 {
    Plain(u32),
    Grouped { base: u32, group: u32 },
}

impl Level3 {
    /// The third-level index before grouping.
    pub fn base(self) -> u32 {
        match self {
            Level3::Plain(k) => k,
            Level3::Grouped { base, .. } => base,
        }
    }
}

impl fmt::Display for Level3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Level3::Plain(k) => write!(f, "{k}"),
            Level3::Grouped { base, group } => write!(f, "{base:04}{group:03}"),
        }
    }
}

impl FromStr for Level3 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("bad third-level identifier `{s}`"));
        if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) {
            if s.len() == 7 {
                let base: u32 = s[..4].parse().map_err(|_| bad())?;
                let group: u32 = s[4..].parse().map_err(|_| bad())?;
                if group == 0 {
                    return Err(bad());
                }
                return Ok(Level3::Grouped { base, group });
            }
            if s.len() < 7 && (s == "0" || !s.starts_with('0')) {
                return Ok(Level3::Plain(s.parse().map_err(|_| bad())?));
            }
        }
        Err(bad())
    }
}

/// Zero-padded 4-digit base followed by a zero-padded 3-digit group.
pub fn format_level3(base: u32, group: u32) -> Result<String> {
    if base >= 10_000 {
        return Err(Error::OutOfRange(format!("base {base} needs more than 4 digits")));
    }
    if !(1..=999).contains(&group) {
        return Err(Error::OutOfRange(format!("group {group} outside 1..=999")));
    }
    Ok(format!("{base:04}{group:03}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SidKey {
    pub s1: u32,
    pub s2: u32,
    pub level3: Level3,
}

impl SidKey {
    pub fn plain(s1: u32, s2: u32, s3: u32) -> Self {
        Self { s1, s2, level3: Level3::Plain(s3) }
    }

    pub fn grouped(s1: u32, s2: u32, base: u32, group: u32) -> Self {
        Self { s1, s2, level3: Level3::Grouped { base, group } }
    }

    /// The raw identifier this key was derived from.
    pub fn raw(&self) -> RawSid {
        RawSid { k1: self.s1, k2: self.s2, k3: self.level3.base() }
    }
}

impl fmt::Display for SidKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.s1, self.s2, self.level3)
    }
}

impl FromStr for SidKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Invalid(format!("SID `{s}` needs three comma-separated levels")));
        }
        let num = |p: &str| p.parse::<u32>().map_err(|_| Error::Invalid(format!("bad SID level `{p}` in `{s}`")));
        Ok(SidKey { s1: num(parts[0])?, s2: num(parts[1])?, level3: parts[2].parse()? })
    }
}

/// Splits every raw cluster larger than `t_max` into
/// `min(ceil(c / t_max), g_max)` balanced, randomly drawn groups.
pub fn postprocess(
    raw: &BTreeMap<RawSid, Vec<ItemId>>,
    t_max: usize,
    g_max: usize,
    seed: u64,
) -> Result<BTreeMap<SidKey, Vec<ItemId>>> {
    if t_max == 0 || g_max == 0 {
        return Err(Error::Config("t_max and g_max must be at least 1".into()));
    }
    if g_max > 999 {
        return Err(Error::Config(format!("g_max {g_max} does not fit a 3-digit group")));
    }
    let mut out = BTreeMap::new();
    for (sid, items) in raw {
        if items.is_empty() {
            continue;
        }
        let c = items.len();
        if c <= t_max {
            out.insert(SidKey::plain(sid.k1, sid.k2, sid.k3), items.clone());
            continue;
        }
        if sid.k3 >= 10_000 {
            return Err(Error::OutOfRange(format!("third-level index {} needs more than 4 digits", sid.k3)));
        }
        let groups = c.div_ceil(t_max).min(g_max);
        let mut shuffled = items.clone();
        shuffled.sort_unstable();
        let tag = (u64::from(sid.k1) << 42) | (u64::from(sid.k2) << 21) | u64::from(sid.k3);
        shuffled.shuffle(&mut indexed_stream(seed, "postprocess", tag));
        let (small, extra) = (c / groups, c % groups);
        let mut start = 0;
        for g in 0..groups {
            let len = small + usize::from(g < extra);
            let mut part = shuffled[start..start + len].to_vec();
            part.sort_unstable();
            out.insert(SidKey::grouped(sid.k1, sid.k2, sid.k3, g as u32 + 1), part);
            start += len;
        }
    }
    Ok(out)
}

/// Groups item ids by raw identifier.
pub fn group_raw(assignments: impl IntoIterator<Item = (ItemId, RawSid)>) -> BTreeMap<RawSid, Vec<ItemId>> {
    let mut out: BTreeMap<RawSid, Vec<ItemId>> = BTreeMap::new();
    for (item, sid) in assignments {
        out.entry(sid).or_default().push(item);
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    out
}

/// Identifier-to-items map with its inverse. Item lists are ordered by
/// efficiency score, highest first, ties by item id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LookupTable {
    by_sid: BTreeMap<SidKey, Vec<ItemId>>,
    by_item: BTreeMap<ItemId, SidKey>,
    scores: BTreeMap<ItemId, f64>,
}

impl LookupTable {
    pub fn items(&self, sid: &SidKey) -> Option<&[ItemId]> {
        self.by_sid.get(sid).map(Vec::as_slice)
    }

    pub fn sid_of(&self, item: ItemId) -> Option<SidKey> {
        self.by_item.get(&item).copied()
    }

    pub fn score(&self, item: ItemId) -> Option<f64> {
        self.scores.get(&item).copied()
    }

    pub fn sids(&self) -> impl Iterator<Item = &SidKey> {
        self.by_sid.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SidKey, &[ItemId])> {
        self.by_sid.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn num_sids(&self) -> usize {
        self.by_sid.len()
    }

    pub fn num_items(&self) -> usize {
        self.by_item.len()
    }

    pub fn largest_cluster(&self) -> usize {
        self.by_sid.values().map(Vec::len).max().unwrap_or(0)
    }

    /// Item-to-SID pairs ordered by item id.
    pub fn assignments(&self) -> impl Iterator<Item = (ItemId, SidKey)> + '_ {
        self.by_item.iter().map(|(&i, &s)| (i, s))
    }

    fn insert_sorted(&mut self, sid: SidKey, item: ItemId, score: f64) {
        let list = self.by_sid.entry(sid).or_default();
        let scores = &self.scores;
        let pos = list.partition_point(|&other| {
            let s = scores[&other];
            s > score || (s == score && other < item)
        });
        list.insert(pos, item);
        self.by_item.insert(item, sid);
    }

    /// Bijection and non-emptiness; item lists ordered by score.
    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (sid, items) in &self.by_sid {
            if items.is_empty() {
                return Err(Error::Invalid(format!("SID {sid} has no items")));
            }
            for w in items.windows(2) {
                let (a, b) = (self.scores[&w[0]], self.scores[&w[1]]);
                if a < b || (a == b && w[0] > w[1]) {
                    return Err(Error::Invalid(format!("SID {sid} items out of efficiency order")));
                }
            }
            for &i in items {
                if !seen.insert(i) || self.by_item.get(&i) != Some(sid) {
                    return Err(Error::DuplicateItem(i));
                }
            }
        }
        if seen.len() != self.by_item.len() {
            return Err(Error::Invalid("reverse map covers items missing from the table".into()));
        }
        Ok(())
    }
}

/// Prefix tree of valid identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SidTrie {
    nodes: BTreeMap<u32, BTreeMap<u32, BTreeSet<Level3>>>,
    len: usize,
}

impl SidTrie {
    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a SidKey>) -> Self {
        let mut t = SidTrie::default();
        for k in keys {
            t.insert(*k);
        }
        t
    }

    pub fn insert(&mut self, key: SidKey) -> bool {
        let fresh = self.nodes.entry(key.s1).or_default().entry(key.s2).or_default().insert(key.level3);
        self.len += usize::from(fresh);
        fresh
    }

    pub fn contains(&self, key: &SidKey) -> bool {
        self.nodes.get(&key.s1).and_then(|m| m.get(&key.s2)).is_some_and(|s| s.contains(&key.level3))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn level1(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes.keys().copied()
    }

    pub fn level2(&self, s1: u32) -> impl Iterator<Item = u32> + '_ {
        self.nodes.get(&s1).into_iter().flat_map(|m| m.keys().copied())
    }

    pub fn level3(&self, s1: u32, s2: u32) -> impl Iterator<Item = Level3> + '_ {
        self.nodes.get(&s1).and_then(|m| m.get(&s2)).into_iter().flat_map(|s| s.iter().copied())
    }

    /// All leaves in key order.
    pub fn leaves(&self) -> Vec<SidKey> {
        let mut out = Vec::with_capacity(self.len);
        for (&s1, m) in &self.nodes {
            for (&s2, set) in m {
                out.extend(set.iter().map(|&level3| SidKey { s1, s2, level3 }));
            }
        }
        out
    }
}

/// Builds the lookup table and trie. `scores` must cover every item.
pub fn build_index(
    grouped: &BTreeMap<SidKey, Vec<ItemId>>,
    scores: &BTreeMap<ItemId, f64>,
) -> Result<(LookupTable, SidTrie)> {
    let mut table = LookupTable::default();
    for (sid, items) in grouped {
        if items.is_empty() {
            return Err(Error::Invalid(format!("SID {sid} has no items")));
        }
        for &i in items {
            let s = *scores.get(&i).ok_or_else(|| Error::Invalid(format!("no efficiency score for item {i}")))?;
            if table.by_item.contains_key(&i) {
                return Err(Error::DuplicateItem(i));
            }
            table.scores.insert(i, s);
            table.insert_sorted(*sid, i, s);
        }
    }
    let trie = SidTrie::from_keys(table.by_sid.keys());
    Ok((table, trie))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolRule {
    /// Keep items with efficiency score at least this value.
    Threshold(f64),
    /// Keep the highest-scoring fraction (rounded to the nearest count).
    TopFraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolSelection {
    /// Kept item ids in ascending order.
    pub items: Vec<ItemId>,
    pub warning: Option<String>,
}

pub fn filter_pool(items: &[Item], rule: PoolRule) -> Result<PoolSelection> {
    let mut kept: Vec<ItemId> = match rule {
        PoolRule::Threshold(t) => items.iter().filter(|i| i.efficiency_score >= t).map(|i| i.item_id).collect(),
        PoolRule::TopFraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("pool fraction {f} outside [0, 1]")));
            }
            let mut order: Vec<&Item> = items.iter().collect();
            order.sort_by(|a, b| b.efficiency_score.total_cmp(&a.efficiency_score).then(a.item_id.cmp(&b.item_id)));
            let n = libm::round(items.len() as f64 * f) as usize;
            order[..n].iter().map(|i| i.item_id).collect()
        }
    };
    kept.sort_unstable();
    let warning = kept.is_empty().then(|| {
        let w = format!("recall pool filter {rule:?} kept no items");
        log::warn!("{w}");
        w
    });
    Ok(PoolSelection { items: kept, warning })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttachReport {
    pub attached: Vec<(ItemId, SidKey)>,
    pub created: Vec<SidKey>,
    /// Clusters that ended above `t_max` after attachment.
    pub overflow: Vec<SidKey>,
}

/// Places one item with a known raw identifier. Split clusters take it in the
/// least-loaded group (smallest group number on ties); an unseen raw prefix
/// creates a fresh ungrouped SID.
pub fn attach_raw(
    table: &mut LookupTable,
    trie: &mut SidTrie,
    item: ItemId,
    raw: RawSid,
    score: f64,
) -> Result<(SidKey, bool)> {
    if table.by_item.contains_key(&item) {
        return Err(Error::DuplicateItem(item));
    }
    let mut target = None;
    for l3 in trie.level3(raw.k1, raw.k2) {
        if l3.base() != raw.k3 {
            continue;
        }
        let key = SidKey { s1: raw.k1, s2: raw.k2, level3: l3 };
        let load = table.by_sid.get(&key).map_or(0, Vec::len);
        match target {
            Some((_, best)) if best <= load => {}
            _ => target = Some((key, load)),
        }
    }
    let (key, created) = match target {
        Some((k, _)) => (k, false),
        None => (SidKey::plain(raw.k1, raw.k2, raw.k3), true),
    };
    table.scores.insert(item, score);
    table.insert_sorted(key, item, score);
    trie.insert(key);
    Ok((key, created))
}

/// Assigns each new item through the quantizer and attaches it. The whole
/// batch is rejected before any change if an id is already present or repeated.
pub fn attach_new_items(
    model: &CqSidModel,
    table: &mut LookupTable,
    trie: &mut SidTrie,
    new_items: &[Item],
    t_max: usize,
) -> Result<AttachReport> {
    let mut ids = BTreeSet::new();
    for it in new_items {
        if table.by_item.contains_key(&it.item_id) || !ids.insert(it.item_id) {
            return Err(Error::DuplicateItem(it.item_id));
        }
    }
    let raws: Vec<RawSid> = new_items
        .iter()
        .map(|it| model.assign_sid(&it.embedding, Some(it.category_id)))
        .collect::<Result<_>>()?;
    let mut report = AttachReport::default();
    for (it, raw) in new_items.iter().zip(raws) {
        let (key, created) = attach_raw(table, trie, it.item_id, raw, it.efficiency_score)?;
        if created {
            report.created.push(key);
        }
        report.attached.push((it.item_id, key));
    }
    let touched: BTreeSet<SidKey> = report.attached.iter().map(|&(_, k)| k).collect();
    report.overflow = touched.into_iter().filter(|k| table.by_sid[k].len() > t_max).collect();
    if !report.overflow.is_empty() {
        log::info!("{} clusters above t_max after attachment", report.overflow.len());
    }
    Ok(report)
}
