use std::time::Instant;

use ivy_core::data::{Dialogue, Role, Turn};
use ivy_core::model::{DecoderModel, ModelConfig, Vocabulary};
use ivy_core::numcore::{AdamWConfig, AdamWState};
use ivy_core::reward::synthetic::{alphabet, prompts, random_answer};
use ivy_core::sft::{batch_train_loss, prepare_policy, render_all, train_step, SftConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{BenchArgs, BenchMode};
use crate::error::CliResult;
use crate::manifest::RunManifest;
use crate::runner::{resolve_seed, write_json, write_text, Outcome, Run};

const DIALOGUES: usize = 32;
const BATCH: usize = 4;

#[derive(Clone, Debug, Serialize)]
struct Workload {
    model: ModelConfig,
    sft: SftConfig,
    dialogues: usize,
    steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub steps: usize,
    pub setup_ms: f64,
    pub train_ms: f64,
    pub ms_per_step: Option<f64>,
    /// Backbone storage: dense scalars plus packed quantized sections.
    pub weight_storage_bytes: usize,
    /// Packed bytes of the quantized sections and what they would take dense.
    pub quantized_bytes: usize,
    pub quantized_dense_bytes: usize,
    pub trainable_params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn dialogues(seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..DIALOGUES)
        .map(|i| {
            let words = rng.random_range(3..=8);
            Dialogue {
                id: format!("bench-{i}"),
                source: "bench".into(),
                turns: vec![
                    Turn { role: Role::Patient, text: prompts()[i % prompts().len()].to_string() },
                    Turn { role: Role::Doctor, text: random_answer(&mut rng, words) },
                ],
            }
        })
        .collect()
}

fn run_mode(quantize: bool, w: &Workload, ds: &[Dialogue], vocab: &Vocabulary) -> CliResult<BenchRow> {
    let cfg = SftConfig { quantize_base: quantize, ..w.sft.clone() };
    let t0 = Instant::now();
    let mut model = DecoderModel::new(w.model)?;
    prepare_policy(&mut model, &cfg)?;
    let mut opt = AdamWState::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let rendered = render_all(ds, vocab, cfg.context_length)?;
    let setup_ms = t0.elapsed().as_secs_f64() * 1e3;

    let batches: Vec<Vec<_>> = rendered.chunks(BATCH).map(|c| c.iter().collect()).collect();
    let initial_loss = batch_train_loss(&model, &batches[0])?;
    let mut final_loss = initial_loss;
    let t1 = Instant::now();
    for s in 0..w.steps {
        final_loss = train_step(&mut model, &mut opt, &batches[s % batches.len()])?;
    }
    let train_ms = if w.steps == 0 { 0.0 } else { t1.elapsed().as_secs_f64() * 1e3 };
    let quantized_bytes = model.quantized().values().map(|q| q.storage_bytes()).sum();
    let quantized_dense_bytes = model.quantized().values().map(|q| 4 * q.numel()).sum();
    Ok(BenchRow {
        mode: if quantize { "qlora" } else { "lora" }.into(),
        steps: w.steps,
        setup_ms,
        train_ms,
        ms_per_step: (w.steps > 0).then(|| train_ms / w.steps as f64),
        weight_storage_bytes: model.weight_storage_bytes(),
        quantized_bytes,
        quantized_dense_bytes,
        trainable_params: model.trainable_params(),
        initial_loss,
        final_loss,
    })
}

fn render(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<6}  {:>6}  {:>10}  {:>11}  {:>14}  {:>10}\n",
        "mode", "steps", "setup ms", "ms/step", "weight bytes", "loss"
    );
    for r in rows {
        let per = r.ms_per_step.map_or_else(|| "-".to_string(), |m| format!("{m:.2}"));
        s.push_str(&format!(
            "{:<6}  {:>6}  {:>10.2}  {:>11}  {:>14}  {:>10.4}\n",
            r.mode, r.steps, r.setup_ms, per, r.weight_storage_bytes, r.final_loss
        ));
    }
    s
}

pub fn bench_finetune(a: &BenchArgs) -> CliResult<RunManifest> {
    let seed = resolve_seed(a.seed)?;
    let ds = dialogues(seed);
    let vocab = Vocabulary::from_texts([alphabet().as_str()]);
    let w = Workload {
        model: ModelConfig {
            vocab_size: vocab.len(),
            context_length: 128,
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            seed,
        },
        sft: SftConfig { lr: 1e-3, batch_size: BATCH, context_length: 128, seed, ..SftConfig::default() },
        dialogues: ds.len(),
        steps: a.steps,
    };
    #[derive(Serialize)]
    struct BenchConfig<'a> {
        mode: BenchMode,
        workload: &'a Workload,
    }
    let run = Run::start(&a.out, "bench-finetune", &BenchConfig { mode: a.mode, workload: &w }, &[])?;
    let result = (|| -> CliResult<Outcome> {
        let modes: &[bool] = match a.mode {
            BenchMode::Lora => &[false],
            BenchMode::Qlora => &[true],
            BenchMode::Both => &[false, true],
        };
        let rows = modes.iter().map(|&q| run_mode(q, &w, &ds, &vocab)).collect::<CliResult<Vec<_>>>()?;
        let table = render(&rows);
        print!("{table}");
        let mut out = Outcome::default();
        write_json(&run.path("bench.json"), &rows)?;
        out.add("bench", run.path("bench.json"));
        write_text(&run.path("bench.txt"), &table)?;
        out.add("table", run.path("bench.txt"));
        Ok(out)
    })();
    run.finish(result)
}
