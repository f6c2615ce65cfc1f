use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_corpus, CorpusBundle, GeneratorConfig, ItemId};
use crate::nn::{Graph, ParameterSet, Tensor};
use crate::sid_index::{build_index, postprocess, LookupTable, SidKey, SidTrie};
use crate::cqsid::RawSid;

pub(crate) struct Fixture {
    pub bundle: CorpusBundle,
    pub table: LookupTable,
    pub trie: SidTrie,
    pub vocab: SidVocab,
}

/// Corpus with SIDs assigned directly: level 1 is the category, levels 2
/// and 3 come from the item's subcluster and id, then grouped.
pub(crate) fn fixture(seed: u64, items: usize, queries: usize) -> Fixture {
    let cfg = GeneratorConfig { items, queries, users: 60, seed, ..GeneratorConfig::default() };
    let bundle = generate_corpus(&cfg).unwrap();
    let mut raw: BTreeMap<RawSid, Vec<ItemId>> = BTreeMap::new();
    for it in &bundle.items {
        let a = &it.attribute_vector;
        let k2 = (0..a.len().min(4)).fold(0, |b, i| if a[i] > a[b] { i } else { b }) as u32;
        let k3 = (it.item_id % 3) as u32;
        raw.entry(RawSid { k1: it.category_id, k2, k3 }).or_default().push(it.item_id);
    }
    let grouped = postprocess(&raw, 20, 100, seed).unwrap();
    let scores = bundle.items.iter().map(|i| (i.item_id, i.efficiency_score)).collect();
    let (table, trie) = build_index(&grouped, &scores).unwrap();
    let vocab = SidVocab::new(cfg.genders as usize, cfg.age_groups as usize, cfg.text_vocab_size(), [cfg.categories, 4, 3], &table).unwrap();
    Fixture { bundle, table, trie, vocab }
}

pub(crate) fn tiny_policy(vocab: SidVocab, seed: u64, init_std: f64) -> PolicyModel {
    let cfg = PolicyConfig { d_model: 16, layers: 1, heads: 2, context: 48, mlp_hidden: 32, init_std, seed };
    PolicyModel::new(&cfg, vocab).unwrap()
}

/// Random trie of at most `max_leaves` SIDs, some grouped.
fn random_trie(rng: &mut ChaCha8Rng, max_leaves: usize) -> (LookupTable, SidTrie, SidVocab) {
    let n = rng.random_range(1..=max_leaves);
    let mut grouped: BTreeMap<SidKey, Vec<ItemId>> = BTreeMap::new();
    let mut next = 0u64;
    while grouped.len() < n {
        let s1 = rng.random_range(0..4);
        let s2 = rng.random_range(0..6);
        let key = if rng.random_bool(0.3) {
            SidKey::grouped(s1, s2, rng.random_range(0..8), rng.random_range(0..3))
        } else {
            SidKey::plain(s1, s2, rng.random_range(0..8))
        };
        grouped.entry(key).or_insert_with(|| {
            next += 1;
            alloc::vec![next]
        });
    }
    let scores = (1..=next).map(|i| (i, 1.0)).collect();
    let (table, trie) = build_index(&grouped, &scores).unwrap();
    let vocab = SidVocab::new(2, 3, 20, [4, 6, 8], &table).unwrap();
    (table, trie, vocab)
}

#[test]
fn beam_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..12 {
        let (_, trie, vocab) = random_trie(&mut rng, 200);
        let model = tiny_policy(vocab.clone(), case, 1.0);
        let prompt: Vec<usize> = (0..4).map(|_| vocab.text(rng.random_range(0..20)).unwrap()).collect();
        let oracle = exhaustive_ranking(&model, &prompt, &trie).unwrap();
        for b in [1, 5, 20, trie.len()] {
            let got = beam_search(&model, &prompt, b, &trie).unwrap();
            assert_eq!(got.len(), b.min(trie.len()));
            for (g, o) in got.iter().zip(&oracle) {
                assert_eq!(g.sid, o.sid, "case {case} beam {b}");
                assert!((g.logprob - o.logprob).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn beam_scores_equal_sequence_logprob() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (table, trie, vocab) = random_trie(&mut rng, 60);
    let model = tiny_policy(vocab.clone(), 3, 0.5);
    let ct = ConstraintTrie::new(&trie, &vocab).unwrap();
    let prompt = [vocab.text(3).unwrap(), vocab.text(7).unwrap()];
    for beam in beam_search_with(&model, &prompt, 10, &ct).unwrap() {
        assert!(table.items(&beam.sid).is_some());
        let lp = sequence_logprob(&model, &prompt, beam.tokens, Norm::Trie(&ct)).unwrap();
        assert!((lp - beam.logprob).abs() < 1e-6);
        assert!(lp <= 0.0);
    }
}

#[test]
fn batched_and_single_scoring_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (_, trie, vocab) = random_trie(&mut rng, 40);
    let model = tiny_policy(vocab.clone(), 4, 0.5);
    let ct = ConstraintTrie::new(&trie, &vocab).unwrap();
    let prompts: Vec<Vec<usize>> = (0..5).map(|i| (0..=i).map(|t| vocab.text(t as u32).unwrap()).collect()).collect();
    let leaves = trie.leaves();
    let batch: Vec<(&[usize], [usize; 3])> = prompts
        .iter()
        .zip(leaves.iter().cycle())
        .map(|(p, s)| (p.as_slice(), vocab.sid_tokens(s).unwrap()))
        .collect();
    for norm in [Norm::Full, Norm::Level, Norm::Trie(&ct)] {
        let many = model.batch_logprobs(&batch, norm).unwrap();
        for ((p, s), v) in batch.iter().zip(&many) {
            let one = sequence_logprob(&model, p, *s, norm).unwrap();
            assert!((one - v).abs() < 1e-9);
        }
    }
}

fn uniform_model(vocab: SidVocab) -> PolicyModel {
    let mut model = tiny_policy(vocab, 1, 0.3);
    let ids: Vec<_> = model.params.ids().filter(|&id| model.params.name(id).starts_with("head.")).collect();
    for id in ids {
        let t = model.params.value_mut(id);
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    model
}

#[test]
fn uniform_logits_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, trie, vocab) = random_trie(&mut rng, 80);
    let model = uniform_model(vocab.clone());
    let [v1, v2, v3] = vocab.level_sizes();
    let sid = vocab.sid_tokens(&trie.leaves()[0]).unwrap();
    let prompt = [vocab.text(0).unwrap()];
    let level = sequence_logprob(&model, &prompt, sid, Norm::Level).unwrap();
    let expect = -libm::log(v1 as f64) - libm::log(v2 as f64) - libm::log(v3 as f64);
    assert!((level - expect).abs() < 1e-12);
    let full = sequence_logprob(&model, &prompt, sid, Norm::Full).unwrap();
    assert!((full + 3.0 * libm::log(vocab.size() as f64)).abs() < 1e-12);
    let ct = ConstraintTrie::new(&trie, &vocab).unwrap();
    let trie_lp = sequence_logprob(&model, &prompt, sid, Norm::Trie(&ct)).unwrap();
    let n1 = ct.children(&[]).len() as f64;
    let n2 = ct.children(&sid[..1]).len() as f64;
    let n3 = ct.children(&sid[..2]).len() as f64;
    assert!((trie_lp + libm::log(n1) + libm::log(n2) + libm::log(n3)).abs() < 1e-12);
}

#[test]
fn constrained_distribution_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (_, trie, vocab) = random_trie(&mut rng, 100);
    let model = tiny_policy(vocab.clone(), 8, 1.0);
    let ct = ConstraintTrie::new(&trie, &vocab).unwrap();
    let prompt = [vocab.text(5).unwrap()];
    let total: f64 = trie
        .leaves()
        .iter()
        .map(|s| libm::exp(sequence_logprob(&model, &prompt, vocab.sid_tokens(s).unwrap(), Norm::Trie(&ct)).unwrap()))
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn scoring_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, trie, vocab) = random_trie(&mut rng, 10);
    let model = tiny_policy(vocab.clone(), 1, 0.1);
    let prompt = [vocab.text(0).unwrap()];
    assert!(sequence_logprob(&model, &prompt, [vocab.size(), 0, 0], Norm::Full).is_err());
    assert!(sequence_logprob(&model, &[], [0, 0, 0], Norm::Full).is_err());
    assert!(beam_search(&model, &prompt, 0, &trie).is_err());
}

#[test]
fn constrained_sampling_stays_in_trie() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (_, trie, vocab) = random_trie(&mut rng, 50);
    let model = tiny_policy(vocab.clone(), 2, 1.0);
    let ct = ConstraintTrie::new(&trie, &vocab).unwrap();
    let p1 = [vocab.text(1).unwrap()];
    let p2 = [vocab.text(2).unwrap(), vocab.text(3).unwrap()];
    let out = sample_sids(&model, &[&p1, &p2], 16, 1.0, Some(&ct), &mut rng).unwrap();
    assert_eq!(out.len(), 2);
    for s in out.iter().flatten() {
        assert!(ct.contains(s));
    }
    let free = sample_sids(&model, &[&p1], 64, 1.0, None, &mut rng).unwrap();
    for s in &free[0] {
        for l in 0..3 {
            assert!(vocab.level_range(l).contains(&s[l]));
        }
    }
}

#[test]
fn prompts_render_with_template() {
    let fx = fixture(3, 300, 100);
    let item = &fx.bundle.items[0];
    let p = item_prompt(&fx.vocab, item).unwrap();
    let text = fx.vocab.render(&p.tokens).unwrap();
    assert!(text.starts_with("I2S | title: "));
    assert_eq!(fx.vocab.parse(&text).unwrap(), p.tokens);

    let q = &fx.bundle.queries[0];
    let text = fx.vocab.render(&query_prompt(&fx.vocab, q).unwrap().tokens).unwrap();
    assert!(text.starts_with("Q2S | query: "));

    let user = &fx.bundle.user_profiles[0];
    let hist = [SidKey::plain(5, 1, 0), SidKey::grouped(6, 0, 2, 1)];
    let vocab = SidVocab::new(2, 6, fx.vocab.text_size, [12, 4, 3], &fx.table).unwrap();
    let mut tokens = user_query_prompt(&vocab, user, &[], q).unwrap().tokens;
    let empty = vocab.render(&tokens).unwrap();
    assert!(empty.contains("| hist: | query: "), "{empty}");
    if vocab.sid_tokens(&hist[1]).is_ok() {
        tokens = user_query_prompt(&vocab, user, &hist, q).unwrap().tokens;
        let text = vocab.render(&tokens).unwrap();
        let expect = alloc::format!("U2S | g={} a={} | hist: 5,1,0;6,0,0002001 | query: ", user.gender, user.age_group);
        assert!(text.starts_with(&expect), "{text}");
        assert_eq!(vocab.parse(&text).unwrap(), tokens);
    }
}

#[test]
fn stage_datasets_follow_their_definitions() {
    let fx = fixture(4, 400, 150);
    let all: BTreeSet<u64> = fx.bundle.queries.iter().map(|q| q.query_id).collect();
    let opts = DatasetOptions::default();

    let (s1, r1) = build_stage_dataset(Stage::ItemToSid, &fx.bundle, &fx.table, &fx.vocab, &all, &opts).unwrap();
    assert_eq!(s1.len(), fx.table.num_items());
    assert_eq!(r1.skipped, 0);

    let (s2, r2) = build_stage_dataset(Stage::QueryToSid, &fx.bundle, &fx.table, &fx.vocab, &all, &opts).unwrap();
    let positives = fx.bundle.query_positives();
    let mut per_query: BTreeMap<u64, BTreeSet<SidKey>> = BTreeMap::new();
    for e in &s2 {
        assert!(fx.trie.contains(&e.target));
        assert!(per_query.entry(e.source).or_default().insert(e.target), "duplicate stage-2 target");
    }
    let mut with = 0;
    for q in &fx.bundle.queries {
        let sids: BTreeSet<SidKey> =
            positives.get(&q.query_id).into_iter().flatten().filter_map(|&i| fx.table.sid_of(i)).collect();
        if sids.is_empty() {
            continue;
        }
        with += 1;
        let got = &per_query[&q.query_id];
        assert_eq!(got.len(), sids.len().min(3));
        assert!(got.is_subset(&sids));
    }
    assert_eq!(with + r2.skipped, all.len());

    let (s3, r3) = build_stage_dataset(Stage::UserQueryToSid, &fx.bundle, &fx.table, &fx.vocab, &all, &opts).unwrap();
    assert_eq!(r3.examples, s3.len());
    for e in &s3 {
        assert_eq!(e.prompt.tokens[0], 2);
        let text = fx.vocab.render(&e.prompt.tokens).unwrap();
        let hist = text.split("hist:").nth(1).unwrap().split('|').next().unwrap().trim();
        let n = if hist.is_empty() { 0 } else { hist.split(';').count() };
        assert!(n <= opts.history);
    }
    let again = build_stage_dataset(Stage::QueryToSid, &fx.bundle, &fx.table, &fx.vocab, &all, &opts).unwrap().0;
    assert_eq!(again, s2);
}

#[test]
fn stage2_sampling_caps_at_three() {
    let fx = fixture(6, 300, 80);
    let q = fx.bundle.queries.iter().find(|q| {
        let pos = fx.bundle.query_positives();
        pos.get(&q.query_id).map_or(0, |s| s.iter().filter_map(|&i| fx.table.sid_of(i)).collect::<BTreeSet<_>>().len()) >= 4
    });
    if let Some(q) = q {
        let only: BTreeSet<u64> = [q.query_id].into();
        let (ex, _) = build_stage_dataset(Stage::QueryToSid, &fx.bundle, &fx.table, &fx.vocab, &only, &DatasetOptions::default()).unwrap();
        assert_eq!(ex.len(), 3);
        let distinct: BTreeSet<SidKey> = ex.iter().map(|e| e.target).collect();
        assert_eq!(distinct.len(), 3);
    }
}

#[test]
fn prompt_logits_get_no_gradient() {
    let lens = [6usize, 5];
    let prompts = [4usize, 3];
    let targets = [[1usize, 2, 3], [0, 4, 2]];
    let mut params = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let id = params.add("logits", Tensor::randn(11, 7, 1.0, &mut rng)).unwrap();
    let mut g = Graph::with_params(&params);
    let x = g.param(id);
    let loss = masked_token_loss(&mut g, x, &lens, &prompts, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    let grad = grads.get(id).unwrap();
    let target_rows: BTreeSet<usize> = [3, 4, 5, 8, 9, 10].into();
    for r in 0..11 {
        let norm: f64 = grad.row_slice(r).iter().map(|v| v * v).sum();
        if target_rows.contains(&r) {
            assert!(norm > 0.0);
        } else {
            assert_eq!(norm, 0.0, "row {r}");
        }
    }
}

#[test]
fn masked_loss_matches_target_only_loss() {
    let fx = fixture(8, 200, 40);
    let all: BTreeSet<u64> = fx.bundle.queries.iter().map(|q| q.query_id).collect();
    let (data, _) = build_stage_dataset(Stage::ItemToSid, &fx.bundle, &fx.table, &fx.vocab, &all, &DatasetOptions::default()).unwrap();
    let model = tiny_policy(fx.vocab.clone(), 2, 0.3);
    let batch: Vec<&Example> = data.iter().take(5).collect();
    let mut g = Graph::with_params(&model.params);
    let a = sft_loss(&model, &mut g, &batch).unwrap();
    let a = g.value(a).item();
    let seqs: Vec<Vec<usize>> = batch
        .iter()
        .map(|e| {
            let mut s = e.prompt.tokens.clone();
            s.extend_from_slice(&e.target_tokens[..2]);
            s
        })
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let mut g = Graph::with_params(&model.params);
    let all_logits = model.logits_all(&mut g, &refs).unwrap();
    let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let plens: Vec<usize> = batch.iter().map(|e| e.prompt.tokens.len()).collect();
    let targets: Vec<[usize; 3]> = batch.iter().map(|e| e.target_tokens).collect();
    let b = masked_token_loss(&mut g, all_logits, &lens, &plens, &targets).unwrap();
    assert!((a - g.value(b).item()).abs() < 1e-10);
}

#[test]
fn sft_is_deterministic_and_learns_categories() {
    let fx = fixture(11, 600, 50);
    let all: BTreeSet<u64> = BTreeSet::new();
    let (data, _) = build_stage_dataset(Stage::ItemToSid, &fx.bundle, &fx.table, &fx.vocab, &all, &DatasetOptions::default()).unwrap();
    let (train, test): (Vec<Example>, Vec<Example>) = data.into_iter().enumerate().fold((Vec::new(), Vec::new()), |mut acc, (i, e)| {
        if i % 5 == 0 { acc.1.push(e) } else { acc.0.push(e) }
        acc
    });
    let pcfg = PolicyConfig { d_model: 32, layers: 1, heads: 2, context: 16, mlp_hidden: 64, ..PolicyConfig::default() };
    let scfg = SftConfig { epochs: 6, batch_size: 32, lr: 3e-3, seed: 5 };
    let mut a = PolicyModel::new(&pcfg, fx.vocab.clone()).unwrap();
    let log = sft_train(&mut a, &train, &scfg).unwrap();
    assert_eq!(log.epoch_losses.len(), 6);
    assert!(log.epoch_losses[5] < log.epoch_losses[0]);
    let acc = level_accuracy(&a, &test, 0).unwrap();
    assert!(acc > 0.8, "held-out level-1 accuracy {acc}");

    let mut b = PolicyModel::new(&pcfg, fx.vocab.clone()).unwrap();
    sft_train(&mut b, &train, &scfg).unwrap();
    assert!(a.params.values_equal(&b.params));
}

#[test]
fn sft_rejects_empty_data() {
    let fx = fixture(2, 100, 20);
    let mut m = tiny_policy(fx.vocab.clone(), 1, 0.1);
    assert!(sft_train(&mut m, &[], &SftConfig::default()).is_err());
}

#[test]
fn policy_checkpoint_round_trip() {
    let fx = fixture(12, 300, 20);
    let m = tiny_policy(fx.vocab.clone(), 7, 0.2);
    let back = PolicyModel::from_checkpoint(&m.to_checkpoint()).unwrap();
    assert_eq!(back, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stage1_round_trips_through_text(seed in 0u64..500, idx in 0usize..200) {
        let fx = fixture(seed % 4, 200, 20);
        let item = &fx.bundle.items[idx % fx.bundle.items.len()];
        let p = item_prompt(&fx.vocab, item).unwrap();
        let text = fx.vocab.render(&p.tokens).unwrap();
        prop_assert_eq!(fx.vocab.parse(&text).unwrap(), p.tokens);
    }

    #[test]
    fn every_table_sid_has_three_tokens(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (table, _, vocab) = random_trie(&mut rng, 120);
        for sid in table.sids() {
            let t = vocab.sid_tokens(sid).unwrap();
            prop_assert_eq!(vocab.sid_from_tokens(t).unwrap(), *sid);
            for l in 0..3 {
                prop_assert!(vocab.level_range(l).contains(&t[l]));
                prop_assert!(t[l] >= 8 + vocab.genders + vocab.age_groups + vocab.text_size);
            }
        }
    }
}
