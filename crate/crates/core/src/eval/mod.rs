//! Offline retrieval metrics: same-beam click hitrate, efficiency-truncated
//! item hitrate, exposure hitrate and exposure coverage (pvr).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{ItemId, QueryId};
use crate::seq2sid::{beam_search_with, ConstraintTrie, PolicyModel};
use crate::sid_index::{LookupTable, SidKey};
use crate::{Error, Result};


/// Default item budget for truncation at desk scale.
pub const DEFAULT_K_ITEMS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub query_id: QueryId,
    pub prompt: Vec<usize>,
    pub clicked: Vec<ItemId>,
    pub exposed: Vec<ItemId>,
    clicked_sids: BTreeSet<SidKey>,
    exposed_sids: BTreeSet<SidKey>,
    /// Ranked SIDs with their log-probabilities, best first.
    pub generated: Vec<(SidKey, f64)>,
}

impl EvalCase {
    /// Errors when a clicked or exposed item has no SID in `table`.
    pub fn new(
        query_id: QueryId,
        prompt: Vec<usize>,
        clicked: Vec<ItemId>,
        exposed: Vec<ItemId>,
        generated: Vec<(SidKey, f64)>,
        table: &LookupTable,
    ) -> Result<Self> {
        let resolve = |items: &[ItemId]| -> Result<BTreeSet<SidKey>> {
            items
                .iter()
                .map(|&i| table.sid_of(i).ok_or_else(|| Error::Invalid(format!("item {i} has no SID"))))
                .collect()
        };
        Ok(Self {
            query_id,
            clicked_sids: resolve(&clicked)?,
            exposed_sids: resolve(&exposed)?,
            prompt,
            clicked,
            exposed,
            generated,
        })
    }

    pub fn clicked_sids(&self) -> &BTreeSet<SidKey> {
        &self.clicked_sids
    }

    pub fn exposed_sids(&self) -> &BTreeSet<SidKey> {
        &self.exposed_sids
    }

    fn top(&self, b: usize) -> impl Iterator<Item = &SidKey> {
        self.generated.iter().take(b).map(|(s, _)| s)
    }
}

/// Beam-decodes every case's prompt to `beam` SIDs.
pub fn decode_cases(model: &PolicyModel, cases: &mut [EvalCase], trie: &ConstraintTrie, beam: usize) -> Result<()> {
    for c in cases.iter_mut() {
        c.generated = beam_search_with(model, &c.prompt, beam, trie)?.into_iter().map(|b| (b.sid, b.logprob)).collect();
    }
    Ok(())
}

fn check(cases: &[EvalCase], b: usize) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluation cases".into()));
    }
    if b == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    Ok(())
}

/// Fraction of cases with a clicked item's SID among the top `b` generated.
pub fn hitrate_at_beam(cases: &[EvalCase], b: usize) -> Result<f64> {
    check(cases, b)?;
    let hits = cases.iter().filter(|c| c.top(b).any(|s| c.clicked_sids.contains(s))).count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Items of the top `b` SIDs, merged and ranked by efficiency (ties by id),
/// cut to `k_items`.
pub fn truncated_items(case: &EvalCase, b: usize, table: &LookupTable, k_items: usize) -> Result<Vec<ItemId>> {
    let mut pool: BTreeSet<ItemId> = BTreeSet::new();
    for s in case.top(b) {
        let items = table.items(s).ok_or_else(|| Error::Invalid(format!("generated SID {s} is not in the table")))?;
        pool.extend(items.iter().copied());
    }
    let mut ranked: Vec<(f64, ItemId)> =
        pool.into_iter().map(|i| (table.score(i).unwrap_or(f64::NEG_INFINITY), i)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k_items).map(|(_, i)| i).collect())
}

/// Item-level hitrate after truncation, for each beam size.
pub fn topk_truncation_hitrate(
    cases: &[EvalCase],
    beams: &[usize],
    table: &LookupTable,
    k_items: usize,
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for &b in beams {
        check(cases, b)?;
        let mut hits = 0;
        for c in cases {
            let kept = truncated_items(c, b, table, k_items)?;
            if c.clicked.iter().any(|i| kept.contains(i)) {
                hits += 1;
            }
        }
        out.insert(b, hits as f64 / cases.len() as f64);
    }
    Ok(out)
}

/// `(exp hitrate, pvr)` at beam `b` over cases with exposures.
pub fn exposure_metrics(cases: &[EvalCase], b: usize) -> Result<(f64, f64)> {
    check(cases, b)?;
    let mut n = 0usize;
    let mut hits = 0usize;
    let mut coverage = 0.0;
    for c in cases.iter().filter(|c| !c.exposed_sids.is_empty()) {
        let top: BTreeSet<&SidKey> = c.top(b).collect();
        let covered = c.exposed_sids.iter().filter(|s| top.contains(s)).count();
        n += 1;
        hits += usize::from(covered > 0);
        coverage += covered as f64 / c.exposed_sids.len() as f64;
    }
    if n == 0 {
        return Err(Error::Empty("cases with exposures".into()));
    }
    Ok((hits as f64 / n as f64, coverage / n as f64))
}

/// Metric values by name and beam size, in insertion order of metrics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub title: String,
    pub rows: Vec<(String, BTreeMap<usize, f64>)>,
    pub counts: Vec<(String, usize)>,
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub fn new(title: &str) -> Self {
        Self { title: title.into(), ..Self::default() }
    }

    pub fn insert(&mut self, metric: &str, beam: usize, value: f64) {
        match self.rows.iter_mut().find(|(m, _)| m == metric) {
            Some((_, row)) => {
                row.insert(beam, value);
            }
            None => self.rows.push((metric.into(), [(beam, value)].into())),
        }
    }

    pub fn get(&self, metric: &str, beam: usize) -> Option<f64> {
        self.rows.iter().find(|(m, _)| m == metric).and_then(|(_, r)| r.get(&beam).copied())
    }

    pub fn beams(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.rows.iter().flat_map(|(_, r)| r.keys().copied()).collect();
        set.into_iter().collect()
    }

    /// `metric \t beam \t value` lines.
    pub fn render_lines(&self) -> String {
        let mut s = String::new();
        for (m, row) in &self.rows {
            for (b, v) in row {
                s.push_str(&format!("{m}\t{b}\t{v:.6}\n"));
            }
        }
        s
    }

    /// Aligned table, one row per metric and one column per beam size.
    pub fn render_table(&self) -> String {
        let beams = self.beams();
        let name_w = self.rows.iter().map(|(m, _)| m.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        if !self.title.is_empty() {
            s.push_str(&format!("== {} ==\n", self.title));
        }
        s.push_str(&format!("{:<name_w$}", "metric"));
        for b in &beams {
            s.push_str(&format!(" {:>9}", format!("beam@{b}")));
        }
        s.push('\n');
        for (m, row) in &self.rows {
            s.push_str(&format!("{m:<name_w$}"));
            for b in &beams {
                match row.get(b) {
                    Some(v) => s.push_str(&format!(" {v:>9.4}")),
                    None => s.push_str(&format!(" {:>9}", "-")),
                }
            }
            s.push('\n');
        }
        for (k, v) in &self.counts {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        for (k, v) in &self.config {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        s
    }
}

/// All metrics at every beam size; `generated` must hold at least the
/// largest beam for each case.
pub fn evaluate(cases: &[EvalCase], beams: &[usize], table: &LookupTable, k_items: usize, title: &str) -> Result<EvalReport> {
    let mut r = EvalReport::new(title);
    for &b in beams {
        r.insert("clk", b, hitrate_at_beam(cases, b)?);
    }
    let has_exposure = cases.iter().any(|c| !c.exposed_sids.is_empty());
    if has_exposure {
        for &b in beams {
            let (e, p) = exposure_metrics(cases, b)?;
            r.insert("exp", b, e);
            r.insert("pvr", b, p);
        }
    }
    for (b, v) in topk_truncation_hitrate(cases, beams, table, k_items)? {
        r.insert(&format!("top{k_items}"), b, v);
    }
    r.counts.push(("cases".into(), cases.len()));
    Ok(r)
}
