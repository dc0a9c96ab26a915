//! Small synthetic tasks with known optima for exercising PPO.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PpoConfig;
use crate::data::{word_count, Dialogue, Role, Turn};
use crate::error::Result;
use crate::model::vocab::{BOS, DOCTOR, EOS, PATIENT};
use crate::model::{generate, DecoderModel, ModelConfig, PolicyCheckpoint, SamplerConfig, Vocabulary};
use crate::reward::{synthetic, train_reward, RewardModel, RmConfig};
use crate::sft::{train_sft, SftConfig, SftStatus};

/// Token the bandit rewards.
pub const BANDIT_ARM: usize = 2;
pub const LENGTH_MAX_NEW: usize = 16;

/// Three-token, single-step policy: the prompt is `[0]` and one token is
/// drawn.
pub fn bandit_policy(seed: u64) -> PolicyCheckpoint {
    let model = DecoderModel::new(ModelConfig {
        vocab_size: 3,
        context_length: 2,
        n_layers: 1,
        n_heads: 1,
        d_model: 8,
        d_ff: 16,
        seed,
    })
    .expect("valid bandit config");
    PolicyCheckpoint::new(model, Vocabulary::from_texts(["abc"]))
}

pub fn bandit_prompts() -> Vec<Vec<usize>> {
    vec![vec![0]]
}

pub fn bandit_reward(_prompt: &[usize], response: &[usize]) -> f64 {
    if response.first() == Some(&BANDIT_ARM) {
        1.0
    } else {
        0.0
    }
}

pub fn bandit_config(kl_coef: f64, steps: usize, seed: u64) -> PpoConfig {
    PpoConfig {
        lr: 1e-2,
        batch_size: 1,
        context_length: 2,
        epochs: usize::MAX,
        k: 8,
        kl_coef,
        max_new_tokens: 1,
        eos: None,
        max_iters: Some(steps),
        seed,
        ..PpoConfig::default()
    }
}

/// Probability the policy assigns to the rewarded arm.
pub fn bandit_probability(model: &DecoderModel<f32>) -> Result<f64> {
    let logits = model.forward(&[0])?;
    let l: Vec<f64> = logits.data().iter().map(|&x| x as f64).collect();
    let z = crate::numcore::kernels::logsumexp(&l);
    Ok((l[BANDIT_ARM] - z).exp())
}

/// Ten-token policy whose reward is the response length before EOS,
/// scaled to `[0, 1]`.
pub fn length_policy(seed: u64) -> PolicyCheckpoint {
    let model = DecoderModel::new(ModelConfig {
        vocab_size: 10,
        context_length: 32,
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        seed,
    })
    .expect("valid length-task config");
    PolicyCheckpoint::new(model, Vocabulary::from_texts(["abcd"]))
}

pub fn length_prompts() -> Vec<Vec<usize>> {
    (0..8).map(|i| vec![BOS, PATIENT, 6 + i % 4, 7 + i / 4, DOCTOR]).collect()
}

pub fn length_reward(_prompt: &[usize], response: &[usize]) -> f64 {
    response.iter().take_while(|&&t| t != EOS).count() as f64 / LENGTH_MAX_NEW as f64
}

pub fn length_config(kl_coef: f64, seed: u64) -> PpoConfig {
    PpoConfig {
        lr: 2e-3,
        batch_size: 8,
        context_length: 32,
        epochs: usize::MAX,
        k: 32,
        kl_coef,
        max_new_tokens: LENGTH_MAX_NEW,
        separate_critic: true,
        max_iters: Some(15),
        seed,
        ..PpoConfig::default()
    }
}

/// Settings of the verbosity experiment: SFT on short answers, a reward
/// model trained on length preferences, then PPO against it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbosityConfig {
    pub seed: u64,
    pub sft_dialogues: usize,
    pub sft_steps: usize,
    pub preferences: usize,
    pub eval_prompts: usize,
    pub ppo: PpoConfig,
}

impl Default for VerbosityConfig {
    fn default() -> Self {
        VerbosityConfig {
            seed: 0,
            sft_dialogues: 64,
            sft_steps: 150,
            preferences: 200,
            eval_prompts: 50,
            ppo: PpoConfig {
                lr: 3e-4,
                batch_size: 8,
                context_length: 128,
                epochs: usize::MAX,
                k: 4,
                kl_coef: 0.1,
                max_new_tokens: 60,
                separate_critic: true,
                max_iters: Some(12),
                ..PpoConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbosityOutcome {
    pub sft_mean_words: f64,
    pub ppo_mean_words: f64,
    pub rm_holdout_accuracy: f64,
    pub history: Vec<super::HistoryEntry>,
}

fn mean_generated_words(
    policy: &DecoderModel<f32>,
    vocab: &Vocabulary,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
    seed: u64,
) -> Result<f64> {
    let mut total = 0usize;
    for (i, p) in prompts.iter().enumerate() {
        let sampler = SamplerConfig {
            top_k: cfg.top_k.unwrap_or(vocab.len()),
            temperature: cfg.temperature,
            max_new_tokens: cfg.max_new_tokens,
            seed: seed.wrapping_add(i as u64),
            eos: cfg.eos,
        };
        let g = generate(policy, p, &sampler)?;
        total += word_count(&vocab.decode_response(&g.tokens));
    }
    Ok(total as f64 / prompts.len().max(1) as f64)
}

/// Runs the whole experiment and reports mean generated word counts on the
/// same evaluation prompts before and after PPO.
pub fn verbosity_experiment(cfg: &VerbosityConfig) -> Result<VerbosityOutcome> {
    let seed = cfg.seed;
    let vocab = Vocabulary::from_texts([synthetic::alphabet().as_str()]);
    let prompts = synthetic::prompts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogues: Vec<Dialogue> = (0..cfg.sft_dialogues)
        .map(|i| {
            let words = rng.random_range(2..=4);
            Dialogue {
                id: i.to_string(),
                source: "synthetic".into(),
                turns: vec![
                    Turn { role: Role::Patient, text: prompts[i % prompts.len()].into() },
                    Turn { role: Role::Doctor, text: synthetic::random_answer(&mut rng, words) },
                ],
            }
        })
        .collect();
    let model = DecoderModel::new(ModelConfig {
        vocab_size: vocab.len(),
        context_length: cfg.ppo.context_length,
        n_layers: 1,
        n_heads: 4,
        d_model: 32,
        d_ff: 128,
        seed,
    })?;
    let sft_cfg = SftConfig {
        lr: 3e-3,
        batch_size: 8,
        context_length: cfg.ppo.context_length,
        epochs: usize::MAX,
        eval_every: 50,
        lora_rank: 0,
        max_steps: Some(cfg.sft_steps),
        seed,
        ..SftConfig::default()
    };
    let sft = train_sft(model, &vocab, &dialogues, &dialogues[..8], &sft_cfg)?;
    if let SftStatus::Diverged { message, .. } = sft.status {
        return Err(crate::Error::Training(format!("SFT diverged: {message}")));
    }
    let mut policy = sft.best;

    let mut rm = RewardModel::from_policy(&policy, false, seed ^ 0x5A)?;
    let records = synthetic::length_preferences(cfg.preferences, 12, seed ^ 0xBEEF);
    let rm_cfg = RmConfig { lr: 3e-3, epochs: 6, seed, ..RmConfig::default() };
    let metrics = train_reward(&mut rm, &records, &rm_cfg)?;

    let train_prompts: Vec<Vec<usize>> = prompts.iter().map(|p| vocab.encode_prompt(p)).collect();
    let eval_prompts: Vec<Vec<usize>> =
        (0..cfg.eval_prompts).map(|i| train_prompts[i % train_prompts.len()].clone()).collect();
    let ppo_cfg = PpoConfig { seed, ..cfg.ppo.clone() };
    let before = mean_generated_words(&policy.model, &vocab, &eval_prompts, &ppo_cfg, seed ^ 0xE7A1)?;
    policy.optimizer = None;
    let out = super::train_ppo(&policy, &rm, &train_prompts, &ppo_cfg)?;
    let after = mean_generated_words(&out.policy.model, &vocab, &eval_prompts, &ppo_cfg, seed ^ 0xE7A1)?;
    Ok(VerbosityOutcome {
        sft_mean_words: before,
        ppo_mean_words: after,
        rm_holdout_accuracy: metrics.holdout_accuracy,
        history: out.history,
    })
}
