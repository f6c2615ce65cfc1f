use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use alloc::string::ToString;
use proptest::prelude::*;

use super::*;
use crate::corpus::{generate_corpus, GeneratorConfig};
use crate::cqsid::{CqSidConfig, CqSidModel};

fn raw(k1: u32, k2: u32, k3: u32) -> RawSid {
    RawSid { k1, k2, k3 }
}

fn cluster(sid: RawSid, n: u64, offset: u64) -> BTreeMap<RawSid, Vec<ItemId>> {
    let mut m = BTreeMap::new();
    m.insert(sid, (offset..offset + n).collect());
    m
}

#[test]
fn format_fixtures() {
    assert_eq!(format_level3(608, 1).unwrap(), "0608001");
    assert_eq!(format_level3(608, 2).unwrap(), "0608002");
    assert_eq!(format_level3(0, 1).unwrap(), "0000001");
    assert!(format_level3(10_000, 1).is_err());
    assert!(format_level3(5, 0).is_err());
    assert!(format_level3(5, 1000).is_err());
    let k = SidKey::grouped(73, 55, 608, 1);
    assert_eq!(k.to_string(), "73,55,0608001");
    assert_eq!("73,55,0608001".parse::<SidKey>().unwrap(), k);
    assert_eq!("3,4,12".parse::<SidKey>().unwrap(), SidKey::plain(3, 4, 12));
    assert!("3,4,012".parse::<SidKey>().is_err());
    assert!("3,4,0608000".parse::<SidKey>().is_err());
}

#[test]
fn postprocess_examples() {
    let small = postprocess(&cluster(raw(1, 2, 3), 30, 0), 50, 100, 9).unwrap();
    assert_eq!(small.len(), 1);
    assert_eq!(small.keys().next().unwrap(), &SidKey::plain(1, 2, 3));

    let mid = postprocess(&cluster(raw(1, 2, 3), 120, 0), 50, 100, 9).unwrap();
    let sizes: Vec<usize> = mid.values().map(Vec::len).collect();
    assert_eq!(sizes, vec![40, 40, 40]);
    let groups: Vec<u32> = mid
        .keys()
        .map(|k| match k.level3 {
            Level3::Grouped { base: 3, group } => group,
            other => panic!("{other:?}"),
        })
        .collect();
    assert_eq!(groups, vec![1, 2, 3]);

    let big = postprocess(&cluster(raw(0, 0, 608), 10_000, 0), 50, 100, 9).unwrap();
    assert_eq!(big.len(), 100);
    assert!(big.values().any(|v| v.len() > 50));
    assert!(big.values().all(|v| v.len() == 100));
    assert_eq!(big.keys().next().unwrap().level3.to_string(), "0608001");

    assert_eq!(postprocess(&cluster(raw(1, 2, 3), 120, 0), 50, 100, 9).unwrap(), mid);
    assert!(postprocess(&cluster(raw(1, 2, 3), 5, 0), 0, 100, 9).is_err());
}

fn scores_for(n: u64) -> BTreeMap<ItemId, f64> {
    (0..n).map(|i| (i, ((i * 37) % 11) as f64)).collect()
}

#[test]
fn build_index_examples() {
    let mut grouped = BTreeMap::new();
    grouped.insert(SidKey::plain(0, 0, 0), vec![0, 1, 2]);
    grouped.insert(SidKey::plain(0, 1, 0), vec![3, 4, 5, 6]);
    grouped.insert(SidKey::grouped(1, 0, 2, 1), vec![7, 8, 9]);
    let (table, trie) = build_index(&grouped, &scores_for(10)).unwrap();
    assert_eq!(trie.len(), 3);
    assert_eq!(table.num_items(), 10);
    table.check().unwrap();
    assert_eq!(trie.leaves(), table.sids().copied().collect::<Vec<_>>());
    assert_eq!(trie.level2(0).collect::<Vec<_>>(), vec![0, 1]);

    grouped.insert(SidKey::plain(2, 0, 0), vec![4]);
    assert_eq!(build_index(&grouped, &scores_for(10)).unwrap_err(), Error::DuplicateItem(4));
}

#[test]
fn pool_filter_examples() {
    let b = generate_corpus(&GeneratorConfig::default()).unwrap();
    let half = filter_pool(&b.items, PoolRule::TopFraction(0.5)).unwrap();
    assert_eq!(half.items.len(), 1000);
    let kept: BTreeSet<ItemId> = half.items.iter().copied().collect();
    let min_kept = b.items.iter().filter(|i| kept.contains(&i.item_id)).map(|i| i.efficiency_score).fold(f64::INFINITY, f64::min);
    let max_dropped = b.items.iter().filter(|i| !kept.contains(&i.item_id)).map(|i| i.efficiency_score).fold(0.0, f64::max);
    assert!(min_kept >= max_dropped);
    assert_eq!(filter_pool(&b.items, PoolRule::Threshold(0.0)).unwrap().items.len(), 2000);
    let none = filter_pool(&b.items, PoolRule::Threshold(1e9)).unwrap();
    assert!(none.items.is_empty() && none.warning.is_some());
}

fn split_table() -> (LookupTable, SidTrie) {
    let mut grouped = BTreeMap::new();
    grouped.insert(SidKey::grouped(1, 1, 7, 1), (0..50).collect::<Vec<_>>());
    grouped.insert(SidKey::grouped(1, 1, 7, 2), (50..62).collect());
    grouped.insert(SidKey::grouped(1, 1, 7, 3), (62..102).collect());
    grouped.insert(SidKey::plain(2, 3, 4), (102..110).collect());
    build_index(&grouped, &scores_for(110)).unwrap()
}

#[test]
fn attach_rules() {
    let (mut table, mut trie) = split_table();
    let (k, created) = attach_raw(&mut table, &mut trie, 500, raw(1, 1, 7), 3.0).unwrap();
    assert_eq!((k, created), (SidKey::grouped(1, 1, 7, 2), false));
    let (k, created) = attach_raw(&mut table, &mut trie, 501, raw(2, 3, 4), 0.5).unwrap();
    assert_eq!((k, created), (SidKey::plain(2, 3, 4), false));
    let before = table.num_sids();
    let (k, created) = attach_raw(&mut table, &mut trie, 502, raw(5, 5, 5), 1.0).unwrap();
    assert!(created);
    assert_eq!(k, SidKey::plain(5, 5, 5));
    assert_eq!(table.num_sids(), before + 1);
    assert_eq!(attach_raw(&mut table, &mut trie, 502, raw(5, 5, 5), 1.0).unwrap_err(), Error::DuplicateItem(502));
    table.check().unwrap();
    assert_eq!(trie.leaves(), table.sids().copied().collect::<Vec<_>>());
}

#[test]
fn attach_through_model_keeps_invariants() {
    let b = generate_corpus(&GeneratorConfig { items: 300, queries: 50, users: 20, ..GeneratorConfig::default() }).unwrap();
    let model = CqSidModel::new(&CqSidConfig::default(), 12).unwrap();
    let (old, new) = b.items.split_at(250);
    let x: Vec<(ItemId, RawSid)> =
        old.iter().map(|i| (i.item_id, model.assign_sid(&i.embedding, Some(i.category_id)).unwrap())).collect();
    let grouped = postprocess(&group_raw(x), 5, 100, 1).unwrap();
    let scores = old.iter().map(|i| (i.item_id, i.efficiency_score)).collect();
    let (mut table, mut trie) = build_index(&grouped, &scores).unwrap();
    let report = attach_new_items(&model, &mut table, &mut trie, new, 5).unwrap();
    assert_eq!(report.attached.len(), 50);
    assert_eq!(table.num_items(), 300);
    table.check().unwrap();
    assert_eq!(trie.leaves(), table.sids().copied().collect::<Vec<_>>());
    let dup = attach_new_items(&model, &mut table, &mut trie, &new[..1], 5).unwrap_err();
    assert_eq!(dup, Error::DuplicateItem(new[0].item_id));
}

fn random_map() -> impl Strategy<Value = BTreeMap<RawSid, Vec<ItemId>>> {
    prop::collection::btree_map((0u32..4, 0u32..4, 0u32..9999), 1usize..400, 1..8).prop_map(|m| {
        let mut next = 0u64;
        m.into_iter()
            .map(|((a, b, c), n)| {
                let items = (next..next + n as u64).collect();
                next += n as u64;
                (raw(a, b, c), items)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn grouping_invariants(m in random_map(), t_max in 1usize..80, g_max in 1usize..40, seed in 0u64..100) {
        let out = postprocess(&m, t_max, g_max, seed).unwrap();
        let before: usize = m.values().map(Vec::len).sum();
        let after: usize = out.values().map(Vec::len).sum();
        prop_assert_eq!(before, after);
        let mut all: Vec<ItemId> = out.values().flatten().copied().collect();
        all.sort_unstable();
        let mut orig: Vec<ItemId> = m.values().flatten().copied().collect();
        orig.sort_unstable();
        prop_assert_eq!(all, orig);
        for (k, items) in &out {
            let parent = &m[&k.raw()];
            prop_assert!(items.iter().all(|i| parent.contains(i)));
            if parent.len().div_ceil(t_max) <= g_max {
                prop_assert!(items.len() <= t_max);
            }
            if let Level3::Grouped { base, group } = k.level3 {
                let s = format_level3(base, group).unwrap();
                prop_assert_eq!(s.len(), 7);
                prop_assert_eq!(k.level3.to_string(), s);
            }
        }
        for (sid, items) in &m {
            let sizes: Vec<usize> = out.iter().filter(|(k, _)| k.raw() == *sid).map(|(_, v)| v.len()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            prop_assert_eq!(sizes.len(), if items.len() <= t_max { 1 } else { items.len().div_ceil(t_max).min(g_max) });
        }
    }

    #[test]
    fn table_lists_are_efficiency_ordered(scores in prop::collection::vec(0.0f64..5.0, 1..60), k in 1u32..5) {
        let mut grouped = BTreeMap::new();
        for i in 0..scores.len() as u64 {
            grouped.entry(SidKey::plain(0, 0, i as u32 % k)).or_insert_with(Vec::new).push(i);
        }
        let s: BTreeMap<ItemId, f64> = scores.iter().enumerate().map(|(i, &v)| (i as u64, v)).collect();
        let (table, _) = build_index(&grouped, &s).unwrap();
        for (_, items) in table.iter() {
            prop_assert!(items.windows(2).all(|w| s[&w[0]] >= s[&w[1]]));
        }
    }
}
