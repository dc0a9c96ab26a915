mod common;

use ivy_core::digest::sha256_file;
use ivy_core::model::vocab::BOS;
use ivy_core::numcore::{AdamWConfig, AdamWState};
use ivy_core::rlhf::toy::{self, BANDIT_ARM};
use ivy_core::rlhf::{
    compute_advantages, evaluate_policy, normalize_advantages, ppo_step, sample_rollouts, train_ppo,
    Critic, PpoConfig, RolloutBatch,
};
use ivy_core::model::PolicyCheckpoint;
use ivy_core::Error;
use proptest::prelude::*;

fn brute_force_gae(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let val = |t: usize| if t < n { v[t] } else { 0.0 };
    (0..n)
        .map(|t| {
            (t..n)
                .map(|l| {
                    let delta = r[l] + gamma * val(l + 1) - v[l];
                    (gamma * lambda).powi((l - t) as i32) * delta
                })
                .sum()
        })
        .collect()
}

fn rollout_batch(advantage_sets: &[Vec<f64>]) -> RolloutBatch {
    let policy = toy::length_policy(0).model;
    let cfg = PpoConfig { k: 1, ..toy::length_config(0.1, 0) };
    let mut rng = common::rng(0);
    let prompts: Vec<_> = toy::length_prompts().into_iter().take(advantage_sets.len()).collect();
    let mut b = sample_rollouts(&policy, None, &policy, &toy::length_reward, &prompts, &cfg, &mut rng).unwrap();
    for (r, a) in b.rollouts.iter_mut().zip(advantage_sets) {
        r.advantages = a.iter().cycle().take(r.response.len()).copied().collect();
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gae_matches_double_loop(
        rv in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
        gamma in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
        let (adv, ret) = compute_advantages(&r, &v, gamma, lambda);
        let oracle = brute_force_gae(&r, &v, gamma, lambda);
        for t in 0..r.len() {
            prop_assert!((adv[t] - oracle[t]).abs() <= 1e-10);
            prop_assert!((ret[t] - (adv[t] + v[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalised_advantages_ignore_positive_rescaling(
        sets in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 1..4), 2..5),
        scale in 0.01f64..100.0,
    ) {
        let mut a = rollout_batch(&sets);
        let raw: Vec<f64> = a.rollouts.iter().flat_map(|r| r.advantages.clone()).collect();
        let m = raw.iter().sum::<f64>() / raw.len() as f64;
        let spread = raw.iter().map(|x| (x - m).abs()).fold(0.0, f64::max);
        let mut b = a.clone();
        for r in &mut b.rollouts {
            r.advantages.iter_mut().for_each(|x| *x *= scale);
        }
        normalize_advantages(&mut a);
        normalize_advantages(&mut b);
        for (x, y) in a.rollouts.iter().zip(&b.rollouts) {
            for (p, q) in x.advantages.iter().zip(&y.advantages) {
                // The std guard only matters once the spread is tiny.
                prop_assert!(p * q >= 0.0, "{} vs {}", p, q);
                if spread * scale > 1e-3 {
                    prop_assert!((p - q).abs() < 1e-4, "{} vs {}", p, q);
                }
            }
        }
    }
}

#[test]
fn normalisation_centres_and_scales() {
    let mut b = rollout_batch(&[vec![1.0, 2.0], vec![5.0], vec![-1.0, 0.5, 3.0]]);
    normalize_advantages(&mut b);
    let all: Vec<f64> = b.rollouts.iter().flat_map(|r| r.advantages.clone()).collect();
    let m = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|a| (a - m).powi(2)).sum::<f64>() / all.len() as f64;
    assert!(m.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-6);

    let mut flat = rollout_batch(&[vec![0.7], vec![0.7]]);
    normalize_advantages(&mut flat);
    assert!(flat.rollouts.iter().flat_map(|r| &r.advantages).all(|a| a.abs() < 1e-6));
}

#[test]
fn identical_policies_give_pure_reward() {
    let start = toy::length_policy(3);
    let cfg = toy::length_config(0.5, 0);
    let prompts = toy::length_prompts();
    let mut rng = common::rng(1);
    let b = sample_rollouts(&start.model, None, &start.model, &toy::length_reward, &prompts, &cfg, &mut rng).unwrap();
    assert_eq!(b.rollouts.len(), prompts.len() * cfg.k);
    for r in &b.rollouts {
        let n = r.response.len();
        for v in [&r.logprobs, &r.ref_logprobs, &r.kl, &r.rewards, &r.values, &r.advantages, &r.returns] {
            assert_eq!(v.len(), n);
        }
        assert!(r.kl.iter().all(|k| *k == 0.0));
        assert!(r.rewards[..n - 1].iter().all(|x| *x == 0.0));
        assert_eq!(r.rewards[n - 1], r.rm_score);
        assert!(r.advantages.iter().all(|a| a.is_finite()));
    }
    let again = sample_rollouts(&start.model, None, &start.model, &toy::length_reward, &prompts, &cfg, &mut common::rng(1)).unwrap();
    assert_eq!(again, b);
}

#[test]
fn kl_estimator_is_calibrated() {
    // E_policy[exp(-Σ kl)] = Σ_y π_ref(y) = 1 for any pair of policies.
    let policy = toy::length_policy(5).model;
    let reference = toy::length_policy(6).model;
    let cfg = PpoConfig { k: 200, max_new_tokens: 4, eos: None, ..toy::length_config(0.1, 0) };
    let prompts = vec![vec![BOS, 4, 7, 5]];
    let b = sample_rollouts(&policy, None, &reference, &toy::length_reward, &prompts, &cfg, &mut common::rng(2)).unwrap();
    let est = b.rollouts.iter().map(|r| (-r.sequence_kl()).exp()).sum::<f64>() / b.rollouts.len() as f64;
    assert!((est - 1.0).abs() < 0.1, "{est}");
    assert!(b.mean_kl() > 0.0);
}

#[test]
fn non_finite_rewards_are_dropped() {
    let start = toy::length_policy(0);
    let cfg = PpoConfig { k: 2, ..toy::length_config(0.1, 0) };
    let nan = |_: &[usize], r: &[usize]| if r.len() % 2 == 0 { f64::NAN } else { 1.0 };
    let b = sample_rollouts(&start.model, None, &start.model, &nan, &toy::length_prompts(), &cfg, &mut common::rng(4)).unwrap();
    assert!(b.discarded > 0);
    assert_eq!(b.rollouts.len() + b.discarded, 16);
    assert!(b.rollouts.iter().all(|r| r.rm_score == 1.0));
}

#[test]
fn first_inner_epoch_sees_unit_ratios() {
    let mut policy = toy::length_policy(2).model;
    let cfg = PpoConfig { ppo_epochs: 1, ..toy::length_config(0.1, 0) };
    let mut b = sample_rollouts(&policy, None, &policy, &toy::length_reward, &toy::length_prompts()[..2], &cfg, &mut common::rng(5)).unwrap();
    normalize_advantages(&mut b);
    let mean_adv = {
        let all: Vec<f64> = b.rollouts.iter().flat_map(|r| r.advantages.clone()).collect();
        all.iter().sum::<f64>() / all.len() as f64
    };
    let mut opt = AdamWState::new(AdamWConfig { lr: 1e-3, ..Default::default() });
    let m = ppo_step(&mut policy, &mut opt, None, &b, &cfg).unwrap();
    assert!((m.mean_ratio[0] - 1.0).abs() < 1e-6);
    assert_eq!(m.clip_frac, 0.0);
    assert!(m.approx_kl.abs() < 1e-6);
    assert!((m.policy_loss + mean_adv).abs() < 1e-5);
    assert_eq!(m.epochs_run, 1);
}

#[test]
fn zero_advantage_moves_only_the_critic() {
    let start = toy::length_policy(4).model;
    let cfg = toy::length_config(0.1, 0);
    let mut critic = Critic::new(&start, 1e-2, 9);
    let mut b = sample_rollouts(&start, Some(&critic.model), &start, &toy::length_reward, &toy::length_prompts()[..3], &cfg, &mut common::rng(6)).unwrap();
    for r in &mut b.rollouts {
        r.advantages.iter_mut().for_each(|a| *a = 0.0);
    }
    let mut policy = start.clone();
    let mut opt = AdamWState::new(AdamWConfig { lr: 1e-2, weight_decay: 0.0, ..Default::default() });
    let critic_before = critic.model.clone();
    let m = ppo_step(&mut policy, &mut opt, Some(&mut critic), &b, &cfg).unwrap();
    assert_eq!(m.epochs_run, cfg.ppo_epochs);
    assert_eq!(policy.params(), start.params());
    assert_ne!(critic.model.params(), critic_before.params());
}

#[test]
fn bandit_finds_the_rewarded_arm() {
    for seed in 0..3 {
        let start = toy::bandit_policy(seed);
        let p0 = toy::bandit_probability(&start.model).unwrap();
        let out = train_ppo(&start, &toy::bandit_reward, &toy::bandit_prompts(), &toy::bandit_config(0.1, 200, seed)).unwrap();
        let p = toy::bandit_probability(&out.policy.model).unwrap();
        assert!(p > 0.9, "seed {seed}: p({BANDIT_ARM}) {p0:.3} -> {p:.3}");
        assert_eq!(out.history.len(), 200);
    }
}

#[test]
fn single_sample_per_prompt_runs() {
    let start = toy::bandit_policy(7);
    let cfg = PpoConfig { k: 1, ..toy::bandit_config(0.1, 5, 7) };
    let out = train_ppo(&start, &toy::bandit_reward, &toy::bandit_prompts(), &cfg).unwrap();
    assert_eq!(out.history.len(), 5);
}

#[test]
fn same_seed_same_history() {
    let start = toy::length_policy(1);
    let cfg = PpoConfig { k: 4, max_iters: Some(4), ..toy::length_config(0.1, 8) };
    let run = || train_ppo(&start, &toy::length_reward, &toy::length_prompts(), &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.policy.model, b.policy.model);
    assert_eq!(a.policy.metadata["stage"], "ppo");
}

#[test]
fn reference_checkpoint_is_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.ivy");
    toy::length_policy(2).save(&path).unwrap();
    let before = sha256_file(&path).unwrap();
    let start = PolicyCheckpoint::load(&path).unwrap();
    let copy = start.clone();
    let cfg = PpoConfig { k: 4, max_iters: Some(3), ..toy::length_config(0.1, 0) };
    let out = train_ppo(&start, &toy::length_reward, &toy::length_prompts(), &cfg).unwrap();
    assert_eq!(start, copy);
    assert_eq!(sha256_file(&path).unwrap(), before);
    assert_ne!(out.policy.model.params(), start.model.params());
}

#[test]
fn collapse_guard_aborts() {
    let start = toy::length_policy(1);
    let cfg = PpoConfig { kl_ceiling: 1e-3, lr: 2e-2, ..toy::length_config(0.0, 0) };
    let err = train_ppo(&start, &toy::length_reward, &toy::length_prompts(), &cfg).unwrap_err();
    assert!(matches!(err, Error::Training(ref m) if m.contains("ceiling")), "{err}");
}

#[test]
fn bad_inputs_are_rejected() {
    let start = toy::bandit_policy(0);
    let cfg = toy::bandit_config(0.1, 1, 0);
    assert!(train_ppo(&start, &toy::bandit_reward, &[], &cfg).is_err());
    assert!(train_ppo(&start, &toy::bandit_reward, &[vec![]], &cfg).is_err());
    let bad = PpoConfig { clip_eps: 0.0, ..cfg };
    assert!(matches!(train_ppo(&start, &toy::bandit_reward, &toy::bandit_prompts(), &bad), Err(Error::Config(_))));
}

#[test]
fn kl_penalty_restrains_the_length_task() {
    let start = toy::length_policy(1);
    let prompts = toy::length_prompts();
    let eval_cfg = PpoConfig { k: 64, ..toy::length_config(0.0, 0) };
    let initial = evaluate_policy(&start.model, &start.model, &toy::length_reward, &prompts, &eval_cfg, 99).unwrap();
    let run = |beta: f64| {
        let out = train_ppo(&start, &toy::length_reward, &prompts, &toy::length_config(beta, 3)).unwrap();
        let eval = evaluate_policy(&out.policy.model, &start.model, &toy::length_reward, &prompts, &eval_cfg, 99).unwrap();
        (out.history, eval)
    };
    let (free_hist, free) = run(0.0);
    let (_, tied) = run(0.1);
    let (_, anchored) = run(1e3);

    assert!(free.mean_kl > tied.mean_kl, "{free:?} vs {tied:?}");
    assert!(free.mean_score > tied.mean_score, "{free:?} vs {tied:?}");
    assert!(tied.mean_score > initial.mean_score);
    assert!(anchored.mean_kl < 0.05, "{anchored:?}");
    assert!((anchored.mean_score - initial.mean_score).abs() < 0.1, "{anchored:?} vs {initial:?}");

    let pairs = free_hist.windows(2).count();
    let up = free_hist.windows(2).filter(|w| w[1].mean_rm_score >= w[0].mean_rm_score).count();
    assert!(up as f64 >= 0.8 * pairs as f64, "{up}/{pairs}");
}

#[test]
fn length_preferring_reward_makes_answers_longer() {
    let out = toy::verbosity_experiment(&toy::VerbosityConfig::default()).unwrap();
    assert!(out.rm_holdout_accuracy >= 0.9, "{out:?}");
    assert!(out.ppo_mean_words > out.sft_mean_words, "{} -> {}", out.sft_mean_words, out.ppo_mean_words);
    assert!(out.history.iter().all(|h| h.mean_kl < 20.0));
}
