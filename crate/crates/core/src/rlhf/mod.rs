//! KL-penalised PPO against a frozen reference policy.

pub mod toy;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::fit_prompt_response;
use crate::error::{Error, Result};
use crate::model::vocab::{BOS, EOS};
use crate::model::{generate, Bound, DecoderModel, PolicyCheckpoint, SamplerConfig};
use crate::numcore::{kernels, AdamWConfig, AdamWState, Tape, Var};
use crate::reward::RewardModel;

pub const VALUE_HEAD: &str = "value";

/// Scores a sampled response given its prompt, both as token ids.
pub trait RewardFn {
    fn score(&self, prompt: &[usize], response: &[usize]) -> Result<f64>;
}

impl<F: Fn(&[usize], &[usize]) -> f64> RewardFn for F {
    fn score(&self, prompt: &[usize], response: &[usize]) -> Result<f64> {
        Ok(self(prompt, response))
    }
}

impl RewardFn for RewardModel {
    /// Responses cut off before EOS are scored as if they ended there.
    fn score(&self, prompt: &[usize], response: &[usize]) -> Result<f64> {
        let mut resp = response.to_vec();
        if resp.last() != Some(&EOS) {
            resp.push(EOS);
        }
        let (tokens, _) = fit_prompt_response(prompt, &resp, self.model.config().context_length)?;
        self.score_tokens(&tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub context_length: usize,
    pub epochs: usize,
    /// Responses sampled per prompt.
    pub k: usize,
    pub kl_coef: f64,
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub ppo_epochs: usize,
    pub seed: u64,
    /// Abort when the mean sequence KL of a rollout batch exceeds this.
    pub kl_ceiling: f64,
    pub value_coef: f64,
    /// Train the value head on its own copy of the backbone instead of
    /// sharing the policy's.
    pub separate_critic: bool,
    pub max_new_tokens: usize,
    /// Sampling cut-off; `None` samples from the full distribution.
    pub top_k: Option<usize>,
    pub temperature: f64,
    /// Stop token; `None` always generates `max_new_tokens`.
    pub eos: Option<usize>,
    /// Stop after this many rollout/update iterations.
    pub max_iters: Option<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            lr: 5e-5,
            batch_size: 8,
            context_length: 256,
            epochs: 2,
            k: 4,
            kl_coef: 0.1,
            clip_eps: 0.2,
            gamma: 1.0,
            lambda: 0.95,
            ppo_epochs: 4,
            seed: 0,
            kl_ceiling: 20.0,
            value_coef: 0.5,
            separate_critic: false,
            max_new_tokens: 64,
            top_k: None,
            temperature: 1.0,
            eos: Some(EOS),
            max_iters: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.k == 0 || self.ppo_epochs == 0 {
            return bad("batch size, epochs, k and ppo epochs must be positive");
        }
        if self.context_length < 2 {
            return bad("context length must be at least 2");
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return bad("KL coefficient must be finite and non-negative");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip epsilon must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) || self.top_k == Some(0) {
            return bad("temperature must be positive and top_k at least 1");
        }
        if !(self.kl_ceiling > 0.0) {
            return bad("KL ceiling must be positive");
        }
        Ok(())
    }
}

/// One sampled response with everything PPO needs about it. All per-token
/// vectors have the response's length.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    /// Policy log-probabilities at sampling time.
    pub logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub rm_score: f64,
    /// `logπ − logπ_ref` per token.
    pub kl: Vec<f64>,
    /// `−β·kl`, plus the reward score on the final token.
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Rollout {
    pub fn sequence_kl(&self) -> f64 {
        self.kl.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
    /// Samples dropped because their reward was not finite.
    pub discarded: usize,
}

impl RolloutBatch {
    pub fn mean_score(&self) -> f64 {
        mean(self.rollouts.iter().map(|r| r.rm_score))
    }

    pub fn mean_kl(&self) -> f64 {
        mean(self.rollouts.iter().map(Rollout::sequence_kl))
    }

    pub fn mean_len(&self) -> f64 {
        mean(self.rollouts.iter().map(|r| r.response.len() as f64))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Log-probabilities of `response` given `prompt` and, if the model has a
/// value head, the value of each state the response tokens were drawn in.
fn policy_eval(
    model: &DecoderModel<f32>,
    tape: &mut Tape<f32>,
    b: &Bound,
    prompt: &[usize],
    response: &[usize],
    with_values: bool,
) -> Result<(Var, Option<Var>)> {
    let n = response.len();
    let mut input = prompt.to_vec();
    input.extend_from_slice(&response[..n - 1]);
    let h = model.hidden_tape(tape, b, &input)?;
    let rows: Vec<usize> = (prompt.len() - 1..input.len()).collect();
    let hr = tape.gather_rows(h, &rows)?;
    let logits = model.logits_tape(tape, b, hr)?;
    let ls = tape.log_softmax(logits)?;
    let lp = tape.pick(ls, response)?;
    let v = if with_values { Some(model.head_tape(tape, b, VALUE_HEAD, hr)?) } else { None };
    Ok((lp, v))
}

fn eval_values(model: &DecoderModel<f32>, prompt: &[usize], response: &[usize]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape)?;
    let with_values = model.has_head(VALUE_HEAD);
    let (lp, v) = policy_eval(model, &mut tape, &b, prompt, response, with_values)?;
    let f = |x: Var| tape.value(x).iter().map(|&y| y as f64).collect::<Vec<_>>();
    Ok((f(lp), v.map(f)))
}

/// Prompt kept within `budget` tokens: its tail, behind a fresh BOS.
pub fn fit_prompt(prompt: &[usize], budget: usize) -> Vec<usize> {
    if prompt.len() <= budget {
        return prompt.to_vec();
    }
    let mut out = vec![BOS];
    out.extend_from_slice(&prompt[prompt.len() - (budget - 1)..]);
    out
}

/// GAE over one response. `values[t]` is the value of the state emitting
/// token `t`; the state after the last token has value zero.
pub fn compute_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales the advantages of the whole batch to mean 0, std 1.
pub fn normalize_advantages(batch: &mut RolloutBatch) {
    let all: Vec<f64> = batch.rollouts.iter().flat_map(|r| r.advantages.iter().copied()).collect();
    if all.is_empty() {
        return;
    }
    let m = mean(all.iter().copied());
    let std = (all.iter().map(|a| (a - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    for r in &mut batch.rollouts {
        for a in &mut r.advantages {
            *a = (*a - m) / (std + 1e-8);
        }
    }
}

/// Value model trained alongside a policy that has no value head.
#[derive(Clone, Debug)]
pub struct Critic {
    pub model: DecoderModel<f32>,
    pub opt: AdamWState<f32>,
}

impl Critic {
    pub fn new(backbone: &DecoderModel<f32>, lr: f64, seed: u64) -> Self {
        let mut model = backbone.clone();
        model.add_head(VALUE_HEAD, seed);
        Critic { model, opt: AdamWState::new(AdamWConfig { lr, ..AdamWConfig::default() }) }
    }
}

/// Samples `cfg.k` responses per prompt from `policy`, scores them and
/// fills in KL penalties, rewards, values and (unnormalised) advantages.
/// Values come from `critic` when given, else from the policy's own head,
/// else are zero.
pub fn sample_rollouts(
    policy: &DecoderModel<f32>,
    critic: Option<&DecoderModel<f32>>,
    reference: &DecoderModel<f32>,
    rm: &dyn RewardFn,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    let ctx = cfg.context_length.min(policy.config().context_length);
    let vocab = policy.config().vocab_size;
    let mut batch = RolloutBatch::default();
    for prompt in prompts {
        let max_new = cfg.max_new_tokens.min(ctx - 1);
        let prompt = fit_prompt(prompt, ctx - max_new);
        for _ in 0..cfg.k {
            let sampler = SamplerConfig {
                top_k: cfg.top_k.unwrap_or(vocab),
                temperature: cfg.temperature,
                max_new_tokens: max_new,
                seed: rng.random(),
                eos: cfg.eos,
            };
            let response = generate(policy, &prompt, &sampler)?.tokens;
            if response.is_empty() {
                continue;
            }
            let (logprobs, mut values) = eval_values(policy, &prompt, &response)?;
            if let Some(c) = critic {
                values = eval_values(c, &prompt, &response)?.1;
            }
            let (ref_logprobs, _) = eval_values(reference, &prompt, &response)?;
            let score = rm.score(&prompt, &response)?;
            if !score.is_finite() {
                log::warn!("discarding rollout with non-finite reward {score}");
                batch.discarded += 1;
                continue;
            }
            let kl: Vec<f64> = logprobs.iter().zip(&ref_logprobs).map(|(a, b)| a - b).collect();
            let mut rewards: Vec<f64> = kl.iter().map(|k| -cfg.kl_coef * k).collect();
            *rewards.last_mut().expect("non-empty response") += score;
            let values = values.unwrap_or_else(|| vec![0.0; response.len()]);
            let (advantages, returns) = compute_advantages(&rewards, &values, cfg.gamma, cfg.lambda);
            batch.rollouts.push(Rollout {
                prompt: prompt.clone(),
                response,
                logprobs,
                ref_logprobs,
                rm_score: score,
                kl,
                rewards,
                values,
                advantages,
                returns,
            });
        }
    }
    Ok(batch)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Mean probability ratio seen by each inner epoch, before its update.
    pub mean_ratio: Vec<f64>,
    /// Clip fraction and approximate KL of the last inner epoch run.
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

fn value_loss(tape: &mut Tape<f32>, vals: &[Var], ret: &[f32]) -> Result<Var> {
    let v = if vals.len() == 1 { vals[0] } else { tape.concat_rows(vals)? };
    let target = tape.constant(&[ret.len()], ret.to_vec())?;
    let diff = tape.sub(v, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

fn critic_update(critic: &mut Critic, batch: &RolloutBatch, ret: &[f32], coef: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let b = critic.model.bind(&mut tape)?;
    let mut vals = Vec::with_capacity(batch.rollouts.len());
    for r in &batch.rollouts {
        vals.extend(policy_eval(&critic.model, &mut tape, &b, &r.prompt, &r.response, true)?.1);
    }
    let mse = value_loss(&mut tape, &vals, ret)?;
    let out = tape.scalar_value(mse) as f64;
    if !out.is_finite() {
        return Err(Error::Numeric("value loss is not finite".into()));
    }
    let loss = tape.scale(mse, coef as f32);
    tape.backward(loss)?;
    critic.model.zero_grads();
    critic.model.collect_grads(&tape, &b)?;
    critic.model.apply_step(&mut critic.opt)?;
    critic.model.zero_grads();
    Ok(out)
}

/// Runs `cfg.ppo_epochs` full-batch updates of the clipped surrogate plus
/// the value loss. Advantages must already be normalised.
pub fn ppo_step(
    policy: &mut DecoderModel<f32>,
    opt: &mut AdamWState<f32>,
    mut critic: Option<&mut Critic>,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
) -> Result<StepMetrics> {
    let mut m = StepMetrics::default();
    if batch.rollouts.is_empty() {
        return Ok(m);
    }
    let old: Vec<f32> = batch.rollouts.iter().flat_map(|r| r.logprobs.iter().map(|&x| x as f32)).collect();
    let adv: Vec<f32> = batch.rollouts.iter().flat_map(|r| r.advantages.iter().map(|&x| x as f32)).collect();
    let ret: Vec<f32> = batch.rollouts.iter().flat_map(|r| r.returns.iter().map(|&x| x as f32)).collect();
    let with_values = critic.is_none() && policy.has_head(VALUE_HEAD);
    for epoch in 0..cfg.ppo_epochs {
        let mut tape = Tape::new();
        let b = policy.bind(&mut tape)?;
        let mut lps = Vec::with_capacity(batch.rollouts.len());
        let mut vals = Vec::with_capacity(batch.rollouts.len());
        for r in &batch.rollouts {
            let (lp, v) = policy_eval(policy, &mut tape, &b, &r.prompt, &r.response, with_values)?;
            lps.push(lp);
            vals.extend(v);
        }
        let lp = if lps.len() == 1 { lps[0] } else { tape.concat_rows(&lps)? };
        let new: Vec<f64> = tape.value(lp).iter().map(|&x| x as f64).collect();
        let ratios: Vec<f64> = new.iter().zip(&old).map(|(n, o)| (n - *o as f64).exp()).collect();
        let mean_ratio = mean(ratios.iter().copied());
        if !(0.2..=5.0).contains(&mean_ratio) {
            log::warn!("mean probability ratio {mean_ratio:.3} left [0.2, 5]; stopping inner epochs");
            m.early_stopped = true;
            break;
        }
        m.mean_ratio.push(mean_ratio);
        m.clip_frac = ratios.iter().filter(|r| (*r - 1.0).abs() > cfg.clip_eps).count() as f64 / ratios.len() as f64;
        m.approx_kl = mean(new.iter().zip(&old).map(|(n, o)| *o as f64 - n));

        let surr = tape.clipped_surrogate(lp, &old, &adv, cfg.clip_eps as f32)?;
        let surr_mean = tape.mean(surr);
        let mut loss = tape.scale(surr_mean, -1.0);
        m.policy_loss = tape.scalar_value(loss) as f64;
        if with_values {
            let mse = value_loss(&mut tape, &vals, &ret)?;
            m.value_loss = tape.scalar_value(mse) as f64;
            let weighted = tape.scale(mse, cfg.value_coef as f32);
            loss = tape.add(loss, weighted)?;
        }
        if !tape.scalar_value(loss).is_finite() {
            return Err(Error::Numeric("PPO loss is not finite".into()));
        }
        tape.backward(loss)?;
        policy.zero_grads();
        policy.collect_grads(&tape, &b)?;
        policy.apply_step(opt)?;
        policy.zero_grads();
        if let Some(c) = critic.as_deref_mut() {
            m.value_loss = critic_update(c, batch, &ret, cfg.value_coef)?;
        }
        m.epochs_run = epoch + 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    pub mean_rm_score: f64,
    pub mean_kl: f64,
    pub mean_len: f64,
    pub clip_frac: f64,
}

#[derive(Clone, Debug)]
pub struct PpoOutcome {
    pub policy: PolicyCheckpoint,
    pub history: Vec<HistoryEntry>,
}

/// Loops `cfg.epochs` times over shuffled prompt batches: sample, score,
/// estimate advantages, update. The reference is a frozen copy of the
/// starting policy.
pub fn train_ppo(
    start: &PolicyCheckpoint,
    rm: &dyn RewardFn,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
) -> Result<PpoOutcome> {
    cfg.validate()?;
    if prompts.is_empty() || prompts.iter().any(Vec::is_empty) {
        return Err(Error::Training("PPO needs at least one non-empty prompt".into()));
    }
    let reference = start.model.clone();
    let mut policy = start.model.clone();
    let mut critic = if cfg.separate_critic {
        Some(Critic::new(&start.model, cfg.lr, cfg.seed ^ 0xA11CE))
    } else {
        policy.add_head(VALUE_HEAD, cfg.seed ^ 0xA11CE);
        None
    };
    let mut opt = AdamWState::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let max_iters = cfg.max_iters.unwrap_or(usize::MAX);

    'outer: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prompts.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if history.len() >= max_iters {
                break 'outer;
            }
            let batch_prompts: Vec<Vec<usize>> = chunk.iter().map(|&i| prompts[i].clone()).collect();
            let mut batch = sample_rollouts(
                &policy,
                critic.as_ref().map(|c| &c.model),
                &reference,
                rm,
                &batch_prompts,
                cfg,
                &mut rng,
            )?;
            let entry = HistoryEntry {
                iter: history.len() + 1,
                mean_rm_score: batch.mean_score(),
                mean_kl: batch.mean_kl(),
                mean_len: batch.mean_len(),
                clip_frac: 0.0,
            };
            if entry.mean_kl > cfg.kl_ceiling {
                return Err(Error::Training(format!(
                    "mean KL {:.2} nats exceeds the ceiling of {} at iteration {}",
                    entry.mean_kl, cfg.kl_ceiling, entry.iter
                )));
            }
            normalize_advantages(&mut batch);
            let step = ppo_step(&mut policy, &mut opt, critic.as_mut(), &batch, cfg)?;
            log::info!(
                "ppo iter {}: score {:.4} kl {:.4} len {:.1}",
                entry.iter,
                entry.mean_rm_score,
                entry.mean_kl,
                entry.mean_len
            );
            history.push(HistoryEntry { clip_frac: step.clip_frac, ..entry });
        }
    }
    let mut ck = PolicyCheckpoint::new(policy, start.vocab.clone());
    ck.optimizer = Some(opt);
    ck.metadata = start.metadata.clone();
    ck.metadata.insert("stage".into(), "ppo".into());
    Ok(PpoOutcome { policy: ck, history })
}

/// Exact KL between the next-token distributions of two models, summed
/// over the positions where `response` was generated.
pub fn exact_sequence_kl(
    policy: &DecoderModel<f32>,
    reference: &DecoderModel<f32>,
    prompt: &[usize],
    response: &[usize],
) -> Result<f64> {
    let mut input = prompt.to_vec();
    input.extend_from_slice(&response[..response.len() - 1]);
    let p = policy.forward(&input)?;
    let q = reference.forward(&input)?;
    let v = policy.config().vocab_size;
    let mut total = 0.0;
    for row in prompt.len() - 1..input.len() {
        let lp: Vec<f64> = p.data()[row * v..(row + 1) * v].iter().map(|&x| x as f64).collect();
        let lq: Vec<f64> = q.data()[row * v..(row + 1) * v].iter().map(|&x| x as f64).collect();
        let (zp, zq) = (kernels::logsumexp(&lp), kernels::logsumexp(&lq));
        total += lp
            .iter()
            .zip(&lq)
            .map(|(a, b)| {
                let la = a - zp;
                la.exp() * (la - (b - zq))
            })
            .sum::<f64>();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub mean_score: f64,
    /// Mean exact sequence KL to the reference along sampled responses.
    pub mean_kl: f64,
    pub mean_len: f64,
}

/// Samples `cfg.k` responses per prompt without training and reports
/// their mean reward, KL to `reference` and length.
pub fn evaluate_policy(
    policy: &DecoderModel<f32>,
    reference: &DecoderModel<f32>,
    rm: &dyn RewardFn,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
    seed: u64,
) -> Result<PolicyEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_rollouts(policy, None, reference, rm, prompts, cfg, &mut rng)?;
    let mut kl = Vec::with_capacity(batch.rollouts.len());
    for r in &batch.rollouts {
        kl.push(exact_sequence_kl(policy, reference, &r.prompt, &r.response)?);
    }
    Ok(PolicyEval {
        mean_score: batch.mean_score(),
        mean_kl: mean(kl.into_iter()),
        mean_len: batch.mean_len(),
    })
}
