//! Supervised fine-tuning on rendered dialogues with validation-based
//! checkpoint selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{attach_adapters, build_codebook, default_targets, CodebookKind, DEFAULT_BLOCK_SIZE};
use crate::data::{render_template, Dialogue, Rendered};
use crate::error::{Error, Result};
use crate::model::{Bound, DecoderModel, PolicyCheckpoint, Vocabulary};
use crate::numcore::{kernels, AdamWConfig, AdamWState, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub context_length: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Adapter rank; 0 trains every backbone weight instead.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Store the frozen layer matrices as NF4 (requires adapters).
    pub quantize_base: bool,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lr: 5e-5,
            batch_size: 16,
            context_length: 1024,
            epochs: 3,
            seed: 0,
            eval_every: 50,
            lora_rank: crate::adapt::lora::DEFAULT_RANK,
            lora_alpha: crate::adapt::lora::DEFAULT_ALPHA,
            quantize_base: false,
            max_steps: None,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.context_length < 3 {
            return bad("context length must be at least 3");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha >= 0.0) {
            return bad("adapter alpha must be finite and non-negative");
        }
        if self.quantize_base && self.lora_rank == 0 {
            return bad("a quantized base is frozen and needs adapters (rank > 0)");
        }
        Ok(())
    }
}

/// Applies the adapter and quantization settings of `cfg` to a fresh
/// policy. Models that already carry adapters are only quantized.
pub fn prepare_policy(model: &mut DecoderModel<f32>, cfg: &SftConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.lora_rank > 0 && model.adapters().is_empty() {
        let targets = default_targets(model.config().n_layers);
        attach_adapters(model, &targets, cfg.lora_rank, cfg.lora_alpha, cfg.seed)?;
    }
    if cfg.quantize_base && model.quantized().is_empty() {
        model.quantize_base(DEFAULT_BLOCK_SIZE, &build_codebook(CodebookKind::Nf4))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub kind: LogKind,
    pub loss: f64,
    pub millis: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub best_step: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl TrainLog {
    pub fn train_losses(&self) -> Vec<(usize, f64)> {
        self.of_kind(LogKind::Train)
    }

    pub fn val_losses(&self) -> Vec<(usize, f64)> {
        self.of_kind(LogKind::Val)
    }

    fn of_kind(&self, kind: LogKind) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| (e.step, e.loss))
            .collect()
    }

    fn record(&mut self, step: usize, kind: LogKind, loss: f64, millis: f64) {
        self.entries.push(LogEntry { step, kind, loss, millis });
        if kind == LogKind::Val && self.best_val_loss.is_none_or(|b| loss < b) {
            self.best_val_loss = Some(loss);
            self.best_step = Some(step);
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        crate::jsonl::to_string(&self.entries)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SftStatus {
    Completed,
    /// Training stopped at `step` because the loss or a gradient became
    /// non-finite; the returned checkpoint is the best one seen before.
    Diverged { step: usize, message: String },
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub best: PolicyCheckpoint,
    pub log: TrainLog,
    pub status: SftStatus,
    pub steps: usize,
}

/// Renders every dialogue and drops those whose shifted mask selects no
/// target (only possible at tiny context lengths).
pub fn render_all(dialogues: &[Dialogue], vocab: &Vocabulary, context_length: usize) -> Result<Vec<Rendered>> {
    let mut out = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let r = render_template(d, vocab, context_length)?;
        if r.len() >= 2 && r.shifted().2.iter().any(|&m| m) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Mean masked cross-entropy of a batch, recorded on `tape` for backward.
fn batch_loss(model: &DecoderModel<f32>, tape: &mut Tape<f32>, batch: &[&Rendered]) -> Result<(Var, Bound)> {
    let b = model.bind(tape)?;
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for r in batch {
        let (inp, tgt, m) = r.shifted();
        let h = model.hidden_tape(tape, &b, inp)?;
        logits.push(model.logits_tape(tape, &b, h)?);
        targets.extend_from_slice(tgt);
        mask.extend_from_slice(m);
    }
    let all = if logits.len() == 1 { logits[0] } else { tape.concat_rows(&logits)? };
    Ok((tape.cross_entropy(all, &targets, &mask)?, b))
}

/// Loss of one batch at the current weights, without touching them.
pub fn batch_train_loss(model: &DecoderModel<f32>, batch: &[&Rendered]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = batch_loss(model, &mut tape, batch)?;
    Ok(tape.scalar_value(loss) as f64)
}

/// Mean cross-entropy over every masked target token of the set.
pub fn evaluate_val(model: &DecoderModel<f32>, val: &[Rendered]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let v = model.config().vocab_size;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in val {
        let (inp, tgt, m) = r.shifted();
        let logits = model.forward(inp)?;
        for (i, row) in logits.data().chunks(v).enumerate().filter(|(i, _)| m[*i]) {
            let row: Vec<f64> = row.iter().map(|&x| x as f64).collect();
            total += kernels::logsumexp(&row) - row[tgt[i]];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("validation set has no masked target tokens".into()));
    }
    Ok(total / count as f64)
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step(model: &mut DecoderModel<f32>, opt: &mut AdamWState<f32>, batch: &[&Rendered]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, b) = batch_loss(model, &mut tape, batch)?;
    let value = tape.scalar_value(loss) as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    tape.backward(loss)?;
    model.zero_grads();
    model.collect_grads(&tape, &b)?;
    model.apply_step(opt)?;
    model.zero_grads();
    Ok(value)
}

fn snapshot(model: &DecoderModel<f32>, vocab: &Vocabulary, opt: &AdamWState<f32>, step: usize) -> PolicyCheckpoint {
    let mut ck = PolicyCheckpoint::new(model.clone(), vocab.clone());
    ck.optimizer = Some(opt.clone());
    ck.metadata.insert("stage".into(), "sft".into());
    ck.metadata.insert("step".into(), step.to_string());
    ck
}

/// Trains `model` (already prepared with [`prepare_policy`]) for
/// `cfg.epochs` passes over shuffled batches of `train`, evaluating on `val`
/// before training, every `cfg.eval_every` steps and at each epoch end.
/// Returns the weights with the lowest validation loss.
pub fn train_sft(
    mut model: DecoderModel<f32>,
    vocab: &Vocabulary,
    train: &[Dialogue],
    val: &[Dialogue],
    cfg: &SftConfig,
) -> Result<SftOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training("training and validation sets must be non-empty".into()));
    }
    let ctx = cfg.context_length.min(model.config().context_length);
    let train_r = render_all(train, vocab, ctx)?;
    let val_r = render_all(val, vocab, ctx)?;
    if train_r.is_empty() || val_r.is_empty() {
        return Err(Error::Training("no dialogue has a response token within the context".into()));
    }

    let mut opt = AdamWState::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0usize;

    let start = Instant::now();
    let v0 = evaluate_val(&model, &val_r)?;
    log.record(0, LogKind::Val, v0, start.elapsed().as_secs_f64() * 1e3);
    let mut best = snapshot(&model, vocab, &opt, 0);
    let mut status = SftStatus::Completed;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_r.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let batch: Vec<&Rendered> = chunk.iter().map(|&i| &train_r[i]).collect();
            let t0 = Instant::now();
            let stepped = train_step(&mut model, &mut opt, &batch).and_then(|loss| {
                step += 1;
                log.record(step, LogKind::Train, loss, t0.elapsed().as_secs_f64() * 1e3);
                if step % cfg.eval_every == 0 {
                    evaluate_into(&model, vocab, &opt, &val_r, step, &mut log, &mut best)?;
                }
                Ok(())
            });
            if let Some(s) = divergence(stepped, step)? {
                status = s;
                break 'epochs;
            }
        }
        if log.entries.last().is_some_and(|e| e.kind == LogKind::Train) {
            let r = evaluate_into(&model, vocab, &opt, &val_r, step, &mut log, &mut best);
            if let Some(s) = divergence(r, step)? {
                status = s;
                break 'epochs;
            }
        }
    }
    Ok(SftOutcome { best, log, status, steps: step })
}

/// Turns a numeric failure into a divergence status; other errors pass.
fn divergence(r: Result<()>, step: usize) -> Result<Option<SftStatus>> {
    match r {
        Ok(()) => Ok(None),
        Err(Error::Numeric(message)) => {
            log::error!("training diverged at step {step}: {message}");
            Ok(Some(SftStatus::Diverged { step, message }))
        }
        Err(e) => Err(e),
    }
}

fn evaluate_into(
    model: &DecoderModel<f32>,
    vocab: &Vocabulary,
    opt: &AdamWState<f32>,
    val: &[Rendered],
    step: usize,
    log: &mut TrainLog,
    best: &mut PolicyCheckpoint,
) -> Result<()> {
    let t0 = Instant::now();
    let loss = evaluate_val(model, val)?;
    let improved = log.best_val_loss.is_none_or(|b| loss < b);
    log.record(step, LogKind::Val, loss, t0.elapsed().as_secs_f64() * 1e3);
    if improved {
        *best = snapshot(model, vocab, opt, step);
    }
    Ok(())
}
