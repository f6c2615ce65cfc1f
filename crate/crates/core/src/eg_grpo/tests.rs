use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Graph;
use crate::seq2sid::tests::{fixture, tiny_policy};
use crate::sid_index::SidKey;

fn sets(pay: &[SidKey], clk: &[SidKey], exp: &[SidKey]) -> BehaviorSets {
    BehaviorSets {
        pay: pay.iter().copied().collect(),
        clk: clk.iter().copied().collect(),
        exp: exp.iter().copied().collect(),
    }
}

#[test]
fn reward_table_on_every_membership_combination() {
    let o = SidKey::plain(1, 2, 3);
    let other = SidKey::plain(0, 0, 0);
    let valid_with = SidTrie::from_keys([&o, &other]);
    let valid_without = SidTrie::from_keys([&other]);
    for mask in 0u8..16 {
        let pick = |bit: u8| if mask & bit != 0 { alloc::vec![o] } else { Vec::new() };
        let s = sets(&pick(1), &pick(2), &pick(4));
        let valid = if mask & 8 != 0 { &valid_with } else { &valid_without };
        let expect = if mask & 1 != 0 {
            1.0
        } else if mask & 2 != 0 {
            1.0
        } else if mask & 4 != 0 {
            0.5
        } else if mask & 8 != 0 {
            0.1
        } else {
            0.0
        };
        assert_eq!(reward(&o, &s, valid), expect, "mask {mask:04b}");
    }
    assert_eq!(reward_case(&o, &sets(&[o], &[o], &[o]), &valid_with), RewardCase::Purchase);
    assert_eq!(reward_case(&o, &sets(&[], &[o], &[o]), &valid_with), RewardCase::Click);
}

#[test]
fn advantages_hand_example() {
    let a = group_advantages(&[1.0, 0.5, 0.1, 0.0], 0.0).unwrap();
    for (x, e) in a.iter().zip([1.524, 0.254, -0.762, -1.016]) {
        assert!((x - e).abs() < 1e-3, "{a:?}");
    }
    assert_eq!(group_advantages(&[0.5, 0.5], ADVANTAGE_EPS).unwrap(), [0.0, 0.0]);
    assert_eq!(group_advantages(&[0.1; 7], ADVANTAGE_EPS).unwrap(), [0.0; 7]);
    assert!(group_advantages(&[1.0], ADVANTAGE_EPS).is_err());
    assert!(group_advantages(&[], ADVANTAGE_EPS).is_err());
}

#[test]
fn clipped_objective_fixtures() {
    let cases = [
        (0.5, 1.0, -0.5),
        (0.5, -1.0, 0.8),
        (1.0, 1.0, -1.0),
        (1.0, -1.0, 1.0),
        (1.5, 1.0, -1.2),
        (1.5, -1.0, 1.5),
    ];
    for (rho, a, expect) in cases {
        let l = grpo_objective(&[libm::log(rho)], &[0.0], &[libm::log(rho)], &[a], 0.2, 0.0).unwrap();
        assert!((l - expect).abs() < 1e-10, "rho {rho} A {a}: {l}");
        let with_kl = grpo_objective(&[libm::log(rho)], &[0.0], &[libm::log(rho)], &[a], 0.2, 1.0).unwrap();
        assert!((with_kl - expect).abs() < 1e-10);
    }
    let kl = grpo_objective(&[-1.0], &[-1.0], &[-1.5], &[0.0], 0.2, 2.0).unwrap();
    let d: f64 = -0.5;
    assert!((kl - 2.0 * (libm::exp(d) - d - 1.0)).abs() < 1e-12);
    assert!(grpo_objective(&[f64::NAN], &[0.0], &[0.0], &[1.0], 0.2, 0.0).is_err());
    assert!(grpo_objective(&[0.0, 0.0], &[0.0], &[0.0], &[1.0], 0.2, 0.0).is_err());
}

#[test]
fn graph_objective_matches_scalar_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.random_range(2..9);
        let new: Vec<f64> = (0..n).map(|_| -rng.random_range(0.1..4.0)).collect();
        let old: Vec<f64> = new.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let reference: Vec<f64> = new.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let expect = grpo_objective(&new, &old, &reference, &adv, 0.2, 0.7).unwrap();
        let mut g = Graph::new();
        let v = g.input(Tensor::column(&new));
        let (loss, stats) = grpo_objective_graph(&mut g, v, &old, &reference, &adv, &[n], 0.2, 0.7).unwrap();
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
        assert_eq!(stats.loss, g.value(loss).item());
        let kl: f64 = new.iter().zip(&reference).map(|(&a, &b)| kl_estimate(a, b)).sum::<f64>() / n as f64;
        assert!((stats.mean_kl - kl).abs() < 1e-12);
    }
}

#[test]
fn kl_vanishes_at_reference() {
    for x in [-3.0, -0.2, 0.0] {
        assert_eq!(kl_estimate(x, x), 0.0);
        assert!(kl_estimate(x, x - 0.3) > 0.0);
    }
}

/// Max abs difference between gradients of the clipped objective at ratio one
/// and the plain policy-gradient loss, on a small policy.
pub(crate) fn ratio_one_gradient_gap(seed: u64) -> f64 {
    let fx = fixture(seed, 150, 30);
    let model = tiny_policy(fx.vocab.clone(), seed, 0.5);
    let ct = ConstraintTrie::new(&fx.trie, &fx.vocab).unwrap();
    let leaves = fx.trie.leaves();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts: Vec<Vec<usize>> = (0..3).map(|i| (0..3).map(|t| fx.vocab.text(i * 3 + t).unwrap()).collect()).collect();
    let mut pairs = Vec::new();
    for p in &prompts {
        for _ in 0..4 {
            let s = leaves[rng.random_range(0..leaves.len())];
            pairs.push((p.as_slice(), fx.vocab.sid_tokens(&s).unwrap()));
        }
    }
    let adv: Vec<f64> = (0..pairs.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
    let sizes = [4, 4, 4];
    let norm = Norm::Trie(&ct);
    let old = model.batch_logprobs(&pairs, norm).unwrap();
    let mut g = Graph::with_params(&model.params);
    let new = model.logprob_graph(&mut g, &pairs, norm).unwrap();
    let (loss, stats) = grpo_objective_graph(&mut g, new, &old, &old, &adv, &sizes, 0.2, 0.0).unwrap();
    assert_eq!(stats.clip_fraction, 0.0);
    let a = g.backward(loss).unwrap();
    let mut g = Graph::with_params(&model.params);
    let new = model.logprob_graph(&mut g, &pairs, norm).unwrap();
    let loss = policy_gradient_graph(&mut g, new, &adv, &sizes).unwrap();
    let b = g.backward(loss).unwrap();
    let mut gap: f64 = 0.0;
    for id in model.params.ids() {
        let (x, y) = (a.get(id).unwrap(), b.get(id).unwrap());
        for (u, v) in x.data().iter().zip(y.data()) {
            gap = gap.max((u - v).abs());
        }
    }
    gap
}

#[test]
fn ratio_one_gradient_is_policy_gradient() {
    for seed in 0..3 {
        let gap = ratio_one_gradient_gap(seed);
        assert!(gap < 1e-8, "seed {seed}: {gap}");
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    use crate::nn::gradcheck::max_relative_error;
    let fx = fixture(3, 120, 20);
    let cfg = crate::seq2sid::PolicyConfig { d_model: 8, layers: 1, heads: 2, context: 16, mlp_hidden: 8, init_std: 0.5, seed: 2 };
    let model = PolicyModel::new(&cfg, fx.vocab.clone()).unwrap();
    let ct = ConstraintTrie::new(&fx.trie, &fx.vocab).unwrap();
    let leaves = fx.trie.leaves();
    let prompt = [fx.vocab.text(1).unwrap(), fx.vocab.text(2).unwrap()];
    let pairs: Vec<(&[usize], [usize; 3])> =
        leaves.iter().take(4).map(|s| (&prompt[..], fx.vocab.sid_tokens(s).unwrap())).collect();
    let norm = Norm::Trie(&ct);
    let cur = model.batch_logprobs(&pairs, norm).unwrap();
    // ratios 0.6, 0.9, 1.1, 1.4: two clipped, two inside, none near a kink
    let old: Vec<f64> = cur.iter().zip([0.51, 0.105, -0.095, -0.336]).map(|(c, o)| c + o).collect();
    let reference: Vec<f64> = cur.iter().map(|c| c - 0.3).collect();
    let adv = [1.0, -0.5, 0.7, -1.2];
    let err = max_relative_error(&model.params, &|p| {
        let mut g = Graph::with_params(p);
        let new = model.logprob_graph(&mut g, &pairs, norm).unwrap();
        let (loss, _) = grpo_objective_graph(&mut g, new, &old, &reference, &adv, &[4], 0.2, 1.0).unwrap();
        let v = g.value(loss).item();
        (v, g.backward(loss).unwrap())
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn expert_sampling() {
    let a = SidKey::plain(0, 0, 1);
    let b = SidKey::plain(0, 1, 1);
    let c = SidKey::plain(2, 1, 1);
    let valid = SidTrie::from_keys([&a, &b, &c]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = sets(&[], &[a], &[a, b, c]);
    assert!(sample_experts(&s, 0, &mut rng).is_empty());
    assert_eq!(sample_experts(&sets(&[], &[], &[b]), 2, &mut rng), [b]);
    assert!(sample_experts(&BehaviorSets::default(), 3, &mut rng).is_empty());
    for _ in 0..50 {
        let e = sample_experts(&s, 2, &mut rng);
        assert_eq!(e.len(), 2);
        assert_ne!(e[0], e[1]);
        for x in &e {
            assert!(reward(x, &s, &valid) >= 0.5);
        }
    }
    let mut seen = BTreeSet::new();
    for _ in 0..200 {
        seen.extend(sample_experts(&s, 1, &mut rng));
    }
    assert_eq!(seen.len(), 3);
}

fn rl_setup(seed: u64) -> (crate::seq2sid::tests::Fixture, Vec<RlExample>, PolicyModel) {
    let fx = fixture(seed, 200, 40);
    let all: BTreeSet<u64> = fx.bundle.queries.iter().map(|q| q.query_id).collect();
    let data = build_rl_dataset(&fx.bundle, &fx.table, &fx.vocab, &all, 5).unwrap();
    let model = tiny_policy(fx.vocab.clone(), seed, 0.3);
    (fx, data, model)
}

#[test]
fn behavior_sets_nest() {
    let (fx, data, _) = rl_setup(5);
    assert!(!data.is_empty());
    for ex in &data {
        assert!(ex.sets.is_funnel(&fx.trie));
    }
}

#[test]
fn zero_steps_leave_policy_unchanged() {
    let (fx, data, model) = rl_setup(2);
    let mut p = model.clone();
    let log = train_eg_grpo(&mut p, &model, &data, &fx.trie, &RlConfig { steps: 0, ..RlConfig::default() }).unwrap();
    assert!(log.steps.is_empty());
    assert_eq!(p, model);
}

#[test]
fn constant_rewards_without_kl_do_not_move_parameters() {
    let (fx, mut data, model) = rl_setup(3);
    for ex in &mut data {
        ex.sets = BehaviorSets::default();
    }
    let cfg = RlConfig { steps: 3, batch_size: 4, experts: 2, kl_weight: 0.0, lr: 1e-2, ..RlConfig::default() };
    let mut p = model.clone();
    let log = train_eg_grpo(&mut p, &model, &data, &fx.trie, &cfg).unwrap();
    assert!(log.steps.iter().all(|s| s.constant_groups == 1.0 && s.n_expert == 0));
    assert!(p.params.values_equal(&model.params));
}

#[test]
fn short_run_logs_and_is_deterministic() {
    let (fx, data, model) = rl_setup(4);
    let cfg = RlConfig { steps: 4, batch_size: 6, group_size: 4, experts: 2, lr: 1e-3, ..RlConfig::default() };
    let mut a = model.clone();
    let la = train_eg_grpo(&mut a, &model, &data, &fx.trie, &cfg).unwrap();
    let mut b = model.clone();
    let lb = train_eg_grpo(&mut b, &model, &data, &fx.trie, &cfg).unwrap();
    assert_eq!(la, lb);
    assert!(a.params.values_equal(&b.params));
    assert!(!a.params.values_equal(&model.params));
    assert_eq!(la.steps.len(), 4);
    assert_eq!(la.steps[0].mean_kl, 0.0);
    for s in &la.steps {
        assert!(s.min_expert_reward.is_some_and(|r| r >= 0.5));
        assert_eq!(s.line().split('\t').count(), 5);
        assert!((0.0..=1.0).contains(&s.mean_reward));
    }
    assert!(la.render().starts_with("step\tmean_reward\tmean_kl\tclip_frac\tn_expert\n"));
}

#[test]
fn stale_snapshot_produces_ratios() {
    let (fx, data, model) = rl_setup(6);
    let cfg = RlConfig { steps: 3, batch_size: 6, group_size: 4, lr: 5e-2, refresh_every: 3, ..RlConfig::default() };
    let mut p = model.clone();
    let log = train_eg_grpo(&mut p, &model, &data, &fx.trie, &cfg).unwrap();
    assert_eq!(log.steps[0].clip_fraction, 0.0);
    assert!(log.steps[1].mean_kl > 0.0);
}

#[test]
fn unconstrained_rollouts_reach_the_invalid_branch() {
    let (fx, data, model) = rl_setup(7);
    let ct = ConstraintTrie::new(&fx.trie, &fx.vocab).unwrap();
    let batch: Vec<&RlExample> = data.iter().take(8).collect();
    let cfg = RlConfig { constrained: false, group_size: 16, ..RlConfig::default() };
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    let groups = rollout(&model, &batch, &ct, &fx.trie, &cfg, &mut r1, &mut r2).unwrap();
    assert!(groups.iter().flat_map(|g| &g.cases).any(|c| *c == RewardCase::Invalid));
    let cfg = RlConfig { constrained: true, ..cfg };
    let groups = rollout(&model, &batch, &ct, &fx.trie, &cfg, &mut r1, &mut r2).unwrap();
    for g in &groups {
        assert_eq!(g.len(), 16 + g.expert.iter().filter(|&&e| e).count());
        assert!(g.cases.iter().all(|c| *c != RewardCase::Invalid));
        let s: f64 = g.advantages.iter().sum();
        assert!(s.abs() < 1e-9);
    }
    let mut p = model.clone();
    let cfg = RlConfig { constrained: false, steps: 2, batch_size: 4, group_size: 4, lr: 1e-3, ..RlConfig::default() };
    train_eg_grpo(&mut p, &model, &data, &fx.trie, &cfg).unwrap();
}

#[test]
fn config_validation() {
    assert!(RlConfig::default().validate().is_ok());
    assert!(RlConfig { group_size: 1, ..RlConfig::default() }.validate().is_err());
    assert!(RlConfig { clip: 1.0, ..RlConfig::default() }.validate().is_err());
    assert!(RlConfig { kl_weight: -0.1, ..RlConfig::default() }.validate().is_err());
    let mut c = RlConfig::default();
    c.set("experts", "4").unwrap();
    assert_eq!(c.experts, 4);
    assert!(c.set("expert", "4").is_err());
}

proptest! {
    #[test]
    fn advantages_are_normalized(rewards in prop::collection::vec(prop::sample::select(alloc::vec![0.0, 0.1, 0.5, 1.0]), 2..16)) {
        let a = group_advantages(&rewards, ADVANTAGE_EPS).unwrap();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = libm::sqrt(rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n);
        let am = a.iter().sum::<f64>() / n;
        prop_assert!(am.abs() < 1e-9);
        if rewards.iter().any(|&r| r != rewards[0]) {
            let astd = libm::sqrt(a.iter().map(|x| (x - am) * (x - am)).sum::<f64>() / n);
            prop_assert!((astd - std / (std + ADVANTAGE_EPS)).abs() < 1e-9);
            let max_r = rewards.iter().copied().fold(f64::MIN, f64::max);
            let bound = (max_r - mean) / (std + ADVANTAGE_EPS);
            prop_assert!(a.iter().all(|x| *x <= bound + 1e-12));
        } else {
            prop_assert!(a.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn objective_is_identity_ratio_surrogate(a in -3.0f64..3.0, x in -5.0f64..0.0) {
        let l = grpo_objective(&[x], &[x], &[x], &[a], 0.2, 1.0).unwrap();
        prop_assert!((l + a).abs() < 1e-12);
    }
}
