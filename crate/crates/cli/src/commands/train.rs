use std::path::PathBuf;

use ivy_core::data::{load_corpus, Dialogue};
use ivy_core::jsonl;
use ivy_core::model::{DecoderModel, ModelConfig, PolicyCheckpoint, Vocabulary};
use ivy_core::reward::{load_preferences, train_reward, RewardModel, RmConfig};
use ivy_core::rlhf::{train_ppo, PpoConfig};
use ivy_core::sft::{prepare_policy, train_sft, SftConfig, SftStatus};
use serde::Serialize;

use crate::args::{TrainPpoArgs, TrainRmArgs, TrainSftArgs};
use crate::commands::data::load_prompts;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::runner::{require_file, resolve_seed, usage, write_json, write_text, Outcome, Run};

pub const SFT_CHECKPOINT: &str = "sft.ivy";
pub const RM_CHECKPOINT: &str = "rm.ivy";
pub const PPO_CHECKPOINT: &str = "policy.ivy";

#[derive(Serialize)]
struct SftRunConfig {
    /// `None` when continuing from `--init`.
    model: Option<ModelConfig>,
    sft: SftConfig,
}

fn sft_config(a: &TrainSftArgs) -> CliResult<SftConfig> {
    let d = SftConfig::default();
    let cfg = SftConfig {
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        context_length: a.ctx.unwrap_or(d.context_length),
        epochs: a.epochs.unwrap_or(d.epochs),
        seed: resolve_seed(a.seed.unwrap_or(d.seed))?,
        eval_every: a.eval_every.unwrap_or(d.eval_every),
        lora_rank: a.lora_rank.unwrap_or(d.lora_rank),
        lora_alpha: a.lora_alpha.unwrap_or(d.lora_alpha),
        quantize_base: a.quantize,
        max_steps: a.max_steps,
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn corpus_vocab(sets: &[&[Dialogue]]) -> Vocabulary {
    Vocabulary::from_texts(
        sets.iter()
            .flat_map(|s| s.iter())
            .flat_map(|d| d.turns.iter().map(|t| t.text.as_str())),
    )
}

pub fn train_sft_cmd(a: &TrainSftArgs) -> CliResult<RunManifest> {
    let cfg = sft_config(a)?;
    require_file("train", &a.train)?;
    require_file("val", &a.val)?;
    let mut inputs = vec![("train", a.train.clone()), ("val", a.val.clone())];
    let model_cfg = match &a.init {
        Some(p) => {
            require_file("init checkpoint", p)?;
            inputs.push(("init", p.clone()));
            None
        }
        None => {
            let m = ModelConfig {
                vocab_size: 0,
                context_length: a.model.model_ctx.unwrap_or(cfg.context_length),
                n_layers: a.model.layers,
                n_heads: a.model.heads,
                d_model: a.model.d_model,
                d_ff: a.model.d_ff,
                seed: cfg.seed,
            };
            ModelConfig { vocab_size: 1, ..m }.validate().map_err(usage)?;
            Some(m)
        }
    };
    let run_cfg = SftRunConfig { model: model_cfg, sft: cfg.clone() };
    let run = Run::start(&a.out, "train-sft", &run_cfg, &inputs)?;
    let result = (|| -> CliResult<Outcome> {
        let train = load_corpus(&a.train)?.dialogues;
        let val = load_corpus(&a.val)?.dialogues;
        let (mut model, vocab) = match (&a.init, model_cfg) {
            (Some(p), _) => {
                let ck = PolicyCheckpoint::load(p)?;
                (ck.model, ck.vocab)
            }
            (None, Some(m)) => {
                let vocab = corpus_vocab(&[&train, &val]);
                (DecoderModel::new(ModelConfig { vocab_size: vocab.len(), ..m })?, vocab)
            }
            (None, None) => unreachable!("model config is set without --init"),
        };
        prepare_policy(&mut model, &cfg)?;
        eprintln!(
            "training {} of {} parameters on {} dialogues",
            model.trainable_params(),
            model.total_params(),
            train.len()
        );
        let outcome = train_sft(model, &vocab, &train, &val, &cfg)?;

        let mut out = Outcome::default();
        outcome.best.save(&run.path(SFT_CHECKPOINT))?;
        out.add("checkpoint", run.path(SFT_CHECKPOINT));
        write_text(&run.path("train_log.jsonl"), &outcome.log.to_jsonl()?)?;
        out.add("log", run.path("train_log.jsonl"));
        eprintln!(
            "{} steps, best val loss {:.4} at step {}",
            outcome.steps,
            outcome.log.best_val_loss.unwrap_or(f64::NAN),
            outcome.log.best_step.unwrap_or(0)
        );
        if let SftStatus::Diverged { step, message } = outcome.status {
            out.failure = Some(format!("training diverged at step {step}: {message}; kept the best earlier weights"));
        }
        Ok(out)
    })();
    run.finish(result)
}

fn rm_config(a: &TrainRmArgs) -> CliResult<RmConfig> {
    let d = RmConfig::default();
    let cfg = RmConfig {
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        epochs: a.epochs.unwrap_or(d.epochs),
        seed: resolve_seed(a.seed.unwrap_or(d.seed))?,
        holdout_fraction: a.holdout.unwrap_or(d.holdout_fraction),
        use_adapters: a.use_adapters,
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn train_rm_cmd(a: &TrainRmArgs) -> CliResult<RunManifest> {
    let cfg = rm_config(a)?;
    require_file("policy checkpoint", &a.sft)?;
    let mut inputs = vec![("policy", a.sft.clone())];
    for p in &a.prefs {
        require_file("preference", p)?;
        inputs.push(("preferences", p.clone()));
    }
    #[derive(Serialize)]
    struct RmRunConfig<'a> {
        rm: &'a RmConfig,
    }
    let run = Run::start(&a.out, "train-rm", &RmRunConfig { rm: &cfg }, &inputs)?;
    let result = (|| -> CliResult<Outcome> {
        let policy = PolicyCheckpoint::load(&a.sft)?;
        let mut records = Vec::new();
        for p in &a.prefs {
            records.extend(load_preferences(p)?);
        }
        let mut rm = RewardModel::from_policy(&policy, cfg.use_adapters, cfg.seed)?;
        let metrics = train_reward(&mut rm, &records, &cfg)?;
        eprintln!(
            "{} train / {} held-out pairs, held-out accuracy {:.3} (untrained {:.3})",
            metrics.n_train, metrics.n_holdout, metrics.holdout_accuracy, metrics.initial_holdout_accuracy
        );
        let mut out = Outcome::default();
        rm.to_checkpoint().save(&run.path(RM_CHECKPOINT))?;
        out.add("checkpoint", run.path(RM_CHECKPOINT));
        write_json(&run.path("metrics.json"), &metrics)?;
        out.add("metrics", run.path("metrics.json"));
        Ok(out)
    })();
    run.finish(result)
}

fn ppo_config(a: &TrainPpoArgs) -> CliResult<PpoConfig> {
    let d = PpoConfig::default();
    let cfg = PpoConfig {
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        context_length: a.ctx.unwrap_or(d.context_length),
        epochs: a.epochs.unwrap_or(d.epochs),
        k: a.k.unwrap_or(d.k),
        kl_coef: a.kl_coef.unwrap_or(d.kl_coef),
        clip_eps: a.clip_eps.unwrap_or(d.clip_eps),
        gamma: a.gamma.unwrap_or(d.gamma),
        lambda: a.lambda.unwrap_or(d.lambda),
        ppo_epochs: a.ppo_epochs.unwrap_or(d.ppo_epochs),
        seed: resolve_seed(a.seed.unwrap_or(d.seed))?,
        kl_ceiling: a.kl_ceiling.unwrap_or(d.kl_ceiling),
        max_new_tokens: a.max_new.unwrap_or(d.max_new_tokens),
        top_k: a.top_k.or(d.top_k),
        temperature: a.temp.unwrap_or(d.temperature),
        separate_critic: a.separate_critic,
        max_iters: a.max_iters.or(d.max_iters),
        ..d
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn train_ppo_cmd(a: &TrainPpoArgs) -> CliResult<RunManifest> {
    let cfg = ppo_config(a)?;
    require_file("policy checkpoint", &a.sft)?;
    require_file("reward checkpoint", &a.rm)?;
    require_file("prompts", &a.prompts)?;
    #[derive(Serialize)]
    struct PpoRunConfig<'a> {
        ppo: &'a PpoConfig,
    }
    let inputs: Vec<(&str, PathBuf)> =
        vec![("policy", a.sft.clone()), ("reward", a.rm.clone()), ("prompts", a.prompts.clone())];
    let run = Run::start(&a.out, "train-ppo", &PpoRunConfig { ppo: &cfg }, &inputs)?;
    let result = (|| -> CliResult<Outcome> {
        let start = PolicyCheckpoint::load(&a.sft)?;
        let rm = RewardModel::from_checkpoint(PolicyCheckpoint::load(&a.rm)?)?;
        if rm.vocab != start.vocab {
            return Err(CliError::Runtime("reward model and policy use different vocabularies".into()));
        }
        let prompts: Vec<Vec<usize>> = load_prompts(&a.prompts)?
            .iter()
            .map(|p| start.vocab.encode_prompt(p))
            .collect();
        let outcome = train_ppo(&start, &rm, &prompts, &cfg)?;
        if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
            eprintln!(
                "{} iterations: reward {:.4} -> {:.4}, KL {:.4} -> {:.4}",
                outcome.history.len(),
                first.mean_rm_score,
                last.mean_rm_score,
                first.mean_kl,
                last.mean_kl
            );
        }
        let mut out = Outcome::default();
        outcome.policy.save(&run.path(PPO_CHECKPOINT))?;
        out.add("checkpoint", run.path(PPO_CHECKPOINT));
        jsonl::write(&run.path("history.jsonl"), &outcome.history)?;
        out.add("history", run.path("history.jsonl"));
        Ok(out)
    })();
    run.finish(result)
}
