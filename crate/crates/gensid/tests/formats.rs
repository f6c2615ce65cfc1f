use std::collections::BTreeMap;
use std::path::Path;

use gensid::formats::{
    load_corpus, parse_grouped, parse_predictions, parse_raw_sids, render_grouped, render_predictions, render_raw_sids,
    save_corpus, FormatError, Prediction, ITEMS_FILE, USERS_FILE,
};
use gensid_core::corpus::{generate_corpus, GeneratorConfig};
use gensid_core::cqsid::RawSid;
use gensid_core::sid_index::SidKey;
use proptest::prelude::*;

fn small() -> GeneratorConfig {
    GeneratorConfig { items: 120, queries: 40, users: 15, seed: 5, ..GeneratorConfig::default() }
}

#[test]
fn corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_corpus(&small()).unwrap();
    save_corpus(&bundle, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back, bundle);

    let again = tempfile::tempdir().unwrap();
    save_corpus(&back, again.path()).unwrap();
    for f in [ITEMS_FILE, USERS_FILE] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
    }
}

#[test]
fn truncated_items_file_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&generate_corpus(&small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join(ITEMS_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let cut: usize = text.lines().take(7).map(|l| l.len() + 1).sum::<usize>() + 25;
    std::fs::write(&path, &text[..cut]).unwrap();
    match load_corpus(dir.path()).unwrap_err() {
        FormatError::Parse { line, path: p, .. } => {
            assert_eq!(line, 8);
            assert_eq!(p, path);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn dangling_reference_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&generate_corpus(&small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join(ITEMS_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let kept: String = text.lines().take(100).map(|l| format!("{l}\n")).collect();
    std::fs::write(&path, kept).unwrap();
    assert!(matches!(load_corpus(dir.path()).unwrap_err(), FormatError::Invalid { .. }));
}

#[test]
fn missing_corpus_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let e = load_corpus(&dir.path().join("nothing")).unwrap_err();
    assert!(matches!(e, FormatError::NotFound(_)), "{e}");
}

#[test]
fn sid_file_fixtures() {
    let mut raw = BTreeMap::new();
    raw.insert(3u64, RawSid { k1: 6, k2: 8, k3: 1 });
    raw.insert(10u64, RawSid { k1: 0, k2: 2, k3: 14 });
    let text = render_raw_sids(&raw);
    assert_eq!(text, "3\t6,8,1\n10\t0,2,14\n");
    assert_eq!(parse_raw_sids(Path::new("r"), &text).unwrap(), raw);

    let mut grouped = BTreeMap::new();
    grouped.insert(SidKey::grouped(6, 8, 1, 1), vec![3u64, 4]);
    grouped.insert(SidKey::plain(0, 2, 14), vec![10u64]);
    let text = render_grouped(&grouped);
    assert_eq!(text, "3\t6\t8\t0001001\n4\t6\t8\t0001001\n10\t0\t2\t14\n");
    assert_eq!(parse_grouped(Path::new("g"), &text).unwrap(), grouped);

    let e = parse_grouped(Path::new("g"), "3\t6\t8\t0001001\n3\t1\t1\t1\n").unwrap_err();
    assert!(matches!(e, FormatError::Parse { line: 2, .. }));
    let e = parse_raw_sids(Path::new("r"), "1\t2,3\n").unwrap_err();
    assert!(matches!(e, FormatError::Parse { line: 1, .. }));
}

#[test]
fn prediction_dump_layout() {
    let preds = vec![
        Prediction { query_id: 7, rank: 1, sid: SidKey::grouped(6, 8, 1, 2), logprob: -0.25 },
        Prediction { query_id: 7, rank: 2, sid: SidKey::plain(1, 2, 3), logprob: -1.5 },
    ];
    let text = render_predictions(&preds);
    assert_eq!(text, "7\t1\t6\t8\t0001002\t-0.25\n7\t2\t1\t2\t3\t-1.5\n");
    assert_eq!(parse_predictions(Path::new("p"), &text).unwrap(), preds);
}

proptest! {
    #[test]
    fn grouped_map_round_trips(entries in prop::collection::btree_map(0u64..500, (0u32..12, 0u32..64, 0u32..64, 0u32..4), 1..60)) {
        let mut grouped: BTreeMap<SidKey, Vec<u64>> = BTreeMap::new();
        for (item, (a, b, c, g)) in entries {
            let key = if g == 0 { SidKey::plain(a, b, c) } else { SidKey::grouped(a, b, c, g) };
            grouped.entry(key).or_default().push(item);
        }
        let back = parse_grouped(Path::new("g"), &render_grouped(&grouped)).unwrap();
        prop_assert_eq!(back, grouped);
    }
}
