//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ivy_cli::manifest::RunManifest;
use ivy_core::adapt::{
    attach_adapters, build_codebook, default_targets, dequantize, quantize_blockwise, CodebookKind,
    DEFAULT_BLOCK_SIZE,
};
use ivy_core::data::{Dialogue, Role, Turn};
use ivy_core::digest::sha256_file;
use ivy_core::evalsim::{
    cosine_similarity, embedding_corpus, evaluate_pairs, render_leaderboard, train_word2vec, QueryPair,
    Word2VecConfig,
};
use ivy_core::model::{DecoderModel, ModelConfig, PolicyCheckpoint, SectionData, Vocabulary};
use ivy_core::numcore::gradcheck::{numeric_gradient, relative_error};
use ivy_core::numcore::{Tape, Tensor, Var};
use ivy_core::reward::synthetic::{self, balanced_random_labels, length_preferences};
use ivy_core::reward::{pairwise_loss, train_reward, RewardModel, RmConfig};
use ivy_core::rlhf::toy;
use ivy_core::rlhf::{evaluate_policy, train_ppo, PpoConfig};
use ivy_core::sft::{prepare_policy, train_sft, SftConfig, SftStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tokens(r: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| r.random_range(0..vocab)).collect()
}

fn tiny_model<T: ivy_core::numcore::Scalar>(vocab: usize, ctx: usize, seed: u64) -> DecoderModel<T> {
    DecoderModel::new(ModelConfig {
        vocab_size: vocab,
        context_length: ctx,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        seed,
    })
    .unwrap()
}

// ---------------------------------------------------------------- gradients

/// Relative error between tape and central-difference gradients of
/// `Σ op(inputs) ⊙ R` for a fixed random `R`.
fn op_gradcheck(shapes: &[&[usize]], seed: u64, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r).with_grad(true)).collect();
    let proj_seed: u64 = r.random();
    let loss_of = |tape: &mut Tape<f64>, vars: &[Var]| {
        let out = build(tape, vars);
        let proj = Tensor::<f64>::randn(tape.shape(out), 1.0, &mut rng(proj_seed));
        let pv = tape.leaf(&proj);
        let prod = tape.mul(out, pv).unwrap();
        tape.sum(prod)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = loss_of(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = numeric_gradient(
        |x| {
            let mut tape = Tape::new();
            let mut off = 0;
            let vars: Vec<Var> = inputs
                .iter()
                .map(|t| {
                    let part = x[off..off + t.len()].to_vec();
                    off += t.len();
                    tape.leaf(&Tensor::from_vec(t.shape().to_vec(), part).unwrap())
                })
                .collect();
            let l = loss_of(&mut tape, &vars);
            tape.scalar_value(l)
        },
        &flat,
        1e-5,
    );
    relative_error(&analytic, &numeric)
}

type OpCase = (&'static str, Vec<&'static [usize]>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![&[3, 4], &[4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("linear", vec![&[3, 4], &[5, 4]], Box::new(|t, v| t.linear(v[0], v[1]).unwrap())),
        ("add", vec![&[2, 3], &[2, 3]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![&[2, 3], &[2, 3]], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![&[2, 3], &[2, 3]], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("add_row", vec![&[3, 4], &[4]], Box::new(|t, v| t.add_row(v[0], v[1]).unwrap())),
        ("scale", vec![&[5]], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("gelu", vec![&[3, 3]], Box::new(|t, v| t.gelu(v[0]))),
        ("exp", vec![&[6]], Box::new(|t, v| t.exp(v[0]))),
        (
            "log_sigmoid",
            vec![&[6]],
            Box::new(|t, v| {
                let big = t.scale(v[0], 8.0);
                t.log_sigmoid(big)
            }),
        ),
        ("softmax0", vec![&[3, 2, 4]], Box::new(|t, v| t.softmax(v[0], 0).unwrap())),
        ("softmax1", vec![&[3, 2, 4]], Box::new(|t, v| t.softmax(v[0], 1).unwrap())),
        ("softmax2", vec![&[3, 2, 4]], Box::new(|t, v| t.softmax(v[0], 2).unwrap())),
        ("causal_softmax", vec![&[5, 5]], Box::new(|t, v| t.causal_softmax(v[0]).unwrap())),
        ("log_softmax", vec![&[3, 5]], Box::new(|t, v| t.log_softmax(v[0]).unwrap())),
        ("layernorm", vec![&[3, 6], &[6], &[6]], Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-5).unwrap())),
        (
            "cross_entropy",
            vec![&[4, 5]],
            Box::new(|t, v| t.cross_entropy(v[0], &[1, 4, 0, 2], &[true, false, true, true]).unwrap()),
        ),
        ("gather_rows", vec![&[4, 3]], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap())),
        ("slice_cols", vec![&[3, 6]], Box::new(|t, v| t.slice_cols(v[0], 2, 3).unwrap())),
        ("concat_cols", vec![&[3, 2], &[3, 4]], Box::new(|t, v| t.concat_cols(v).unwrap())),
        ("concat_rows", vec![&[2, 3], &[4, 3]], Box::new(|t, v| t.concat_rows(v).unwrap())),
        ("pick", vec![&[3, 4]], Box::new(|t, v| t.pick(v[0], &[3, 0, 1]).unwrap())),
        ("reshape", vec![&[2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]).unwrap())),
        ("sum", vec![&[2, 3]], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![&[2, 3]], Box::new(|t, v| t.mean(v[0]))),
        (
            "clipped_surrogate",
            vec![&[8]],
            Box::new(|t, v| {
                let small = t.scale(v[0], 0.3);
                t.clipped_surrogate(
                    small,
                    &[0.1, -0.2, 0.05, 0.0, 0.3, -0.1, 0.2, -0.3],
                    &[1.0, -0.5, 2.0, -1.0, 0.7, 1.3, -2.0, 0.4],
                    0.2,
                )
                .unwrap()
            }),
        ),
    ]
}

fn model_loss(m: &DecoderModel<f64>, toks: &[usize], mask: &[bool], backward: bool) -> (f64, Option<DecoderModel<f64>>) {
    let mut tape = Tape::new();
    let b = m.bind(&mut tape).unwrap();
    let h = m.hidden_tape(&mut tape, &b, &toks[..toks.len() - 1]).unwrap();
    let lg = m.logits_tape(&mut tape, &b, h).unwrap();
    let l = tape.cross_entropy(lg, &toks[1..], mask).unwrap();
    let value = tape.scalar_value(l);
    if !backward {
        return (value, None);
    }
    tape.backward(l).unwrap();
    let mut with_grads = m.clone();
    with_grads.collect_grads(&tape, &b).unwrap();
    (value, Some(with_grads))
}

/// Every parameter of the toy model, adapters included, against central differences.
fn model_gradcheck(seed: u64) -> f64 {
    let mut model: DecoderModel<f64> = tiny_model(7, 6, seed);
    attach_adapters(&mut model, &default_targets(2), 2, 4.0, seed).unwrap();
    let mut r = rng(seed + 50);
    for a in model.adapters_mut().iter_mut() {
        a.b = Tensor::randn(a.b.shape(), 0.1, &mut r).with_grad(true);
    }
    for name in model.params().keys().cloned().collect::<Vec<_>>() {
        model.set_trainable(&name, true).unwrap();
    }
    let toks = random_tokens(&mut r, 6, 7);
    let mask = [true, false, true, true, true];
    let graded = model_loss(&model, &toks, &mask, true).1.unwrap();
    let h = 1e-5;
    let central = |perturb: &dyn Fn(&mut DecoderModel<f64>, f64)| {
        let mut plus = model.clone();
        perturb(&mut plus, h);
        let mut minus = model.clone();
        perturb(&mut minus, -h);
        (model_loss(&plus, &toks, &mask, false).0 - model_loss(&minus, &toks, &mask, false).0) / (2.0 * h)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in model.params().keys() {
        let p = graded.param(name).unwrap();
        for i in 0..p.len() {
            analytic.push(p.grad.as_ref().unwrap()[i]);
            numeric.push(central(&|m, d| m.param_mut(name).unwrap().data_mut()[i] += d));
        }
    }
    for ad in graded.adapters().iter() {
        for (which, t) in [(0, &ad.a), (1, &ad.b)] {
            for i in 0..t.len() {
                analytic.push(t.grad.as_ref().unwrap()[i]);
                numeric.push(central(&|m, d| {
                    let a = m.adapters_mut().get_mut(&ad.target).unwrap();
                    let t = if which == 0 { &mut a.a } else { &mut a.b };
                    t.data_mut()[i] += d;
                }));
            }
        }
    }
    relative_error(&analytic, &numeric)
}

fn gradient_fidelity() -> Check {
    let seeds = 20u64;
    let mut worst = (0.0f64, String::new());
    for (name, shapes, build) in op_cases() {
        for seed in 0..seeds {
            let err = op_gradcheck(&shapes, seed, build.as_ref());
            if !(err <= 1e-4) {
                return Err(format!("{name} seed {seed}: relative error {err:.3e}"));
            }
            if err > worst.0 {
                worst = (err, name.to_string());
            }
        }
    }
    let n_ops = op_cases().len();
    for seed in 0..seeds {
        let err = model_gradcheck(seed);
        if !(err <= 1e-4) {
            return Err(format!("toy model seed {seed}: relative error {err:.3e}"));
        }
        if err > worst.0 {
            worst = (err, "toy model".into());
        }
    }
    Ok(format!("{n_ops} primitives + toy model x {seeds} seeds, worst {:.2e} ({})", worst.0, worst.1))
}

// ---------------------------------------------------------------- adapters

fn lora_identity_and_merge() -> Check {
    let base: DecoderModel<f32> = tiny_model(11, 16, 3);
    let mut adapted = base.clone();
    attach_adapters(&mut adapted, &default_targets(2), 4, 16.0, 9).map_err(e)?;
    let mut r = rng(0);
    for _ in 0..100 {
        let len = r.random_range(1..=16);
        let toks = random_tokens(&mut r, len, 11);
        ensure(base.forward(&toks).map_err(e)? == adapted.forward(&toks).map_err(e)?, || {
            format!("adapter at init changed logits for {toks:?}")
        })?;
    }

    let mut m: DecoderModel<f32> = tiny_model(13, 12, 2);
    attach_adapters(&mut m, &default_targets(2), 4, 16.0, 5).map_err(e)?;
    for a in m.adapters_mut().iter_mut() {
        a.b = Tensor::randn(a.b.shape(), 0.05, &mut r).with_grad(true);
    }
    let mut merged = m.clone();
    merged.merge_adapters().map_err(e)?;
    ensure(merged.adapters().is_empty(), || "merge left adapters attached".into())?;
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let len = r.random_range(1..=12);
        let toks = random_tokens(&mut r, len, 13);
        let (a, b) = (m.forward(&toks).map_err(e)?, merged.forward(&toks).map_err(e)?);
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("merged logits differ by {worst:.3e}"))?;
    Ok(format!("init identical on 100 prompts; merged max |diff| {worst:.2e}"))
}

// ---------------------------------------------------------------- quantization

fn quantization_bound() -> Check {
    let mut r = rng(2024);
    let mut detail = Vec::new();
    for kind in [CodebookKind::Nf4, CodebookKind::Linear4] {
        let cb = build_codebook(kind);
        let half_gap = cb.max_gap() as f64 / 2.0;
        let mut worst_ratio = 0.0f64;
        for _ in 0..1000 {
            let std = 10f64.powf(r.random_range(-3.0..3.0));
            let w = Tensor::<f32>::randn(&[DEFAULT_BLOCK_SIZE], std, &mut r);
            let q = quantize_blockwise(&w, DEFAULT_BLOCK_SIZE, &cb).map_err(e)?;
            let back: Tensor<f32> = dequantize(&q).map_err(e)?;
            let scale = q.scales()[0] as f64;
            for (&a, &b) in w.data().iter().zip(back.data()) {
                let err = (a as f64 - b as f64).abs();
                let bound = scale * half_gap;
                ensure(err <= bound + 1e-6 * scale, || {
                    format!("{}: error {err:.3e} exceeds bound {bound:.3e}", kind.as_str())
                })?;
                if bound > 0.0 {
                    worst_ratio = worst_ratio.max(err / bound);
                }
            }
        }
        // Values already on the codebook grid come back unchanged.
        let scale = 2.5f32;
        let exact: Vec<f32> = cb.values().iter().map(|v| v * scale).collect();
        let n = exact.len();
        let w = Tensor::from_vec(vec![n], exact.clone()).map_err(e)?;
        let back: Tensor<f32> = dequantize(&quantize_blockwise(&w, n, &cb).map_err(e)?).map_err(e)?;
        ensure(back.data() == exact.as_slice(), || format!("{}: codebook values did not round-trip", kind.as_str()))?;
        detail.push(format!("{} worst err/bound {worst_ratio:.3}", kind.as_str()));
    }
    Ok(format!("1000 blocks each; {}; codebook values exact", detail.join(", ")))
}

// ---------------------------------------------------------------- sft

fn dialogue(turns: &[&str]) -> Dialogue {
    Dialogue {
        id: "m".into(),
        source: "acceptance".into(),
        turns: turns
            .iter()
            .enumerate()
            .map(|(i, t)| Turn { role: if i % 2 == 0 { Role::Patient } else { Role::Doctor }, text: t.to_string() })
            .collect(),
    }
}

fn sft_memorization(work: &Path) -> Check {
    let d = vec![dialogue(&["Sharp pain in my lower back.", "Apply heat and avoid lifting for a week."])];
    let v = Vocabulary::from_texts(d[0].turns.iter().map(|t| t.text.as_str()));
    let cfg = SftConfig {
        lr: 1e-3,
        lora_rank: 0,
        batch_size: 2,
        context_length: 96,
        epochs: 1000,
        eval_every: 10,
        max_steps: Some(500),
        seed: 11,
        ..SftConfig::default()
    };
    let mut m = DecoderModel::<f32>::new(ModelConfig {
        vocab_size: v.len(),
        context_length: 96,
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        seed: 2,
    })
    .map_err(e)?;
    prepare_policy(&mut m, &cfg).map_err(e)?;
    let out = train_sft(m, &v, &d, &d, &cfg).map_err(e)?;
    ensure(out.status == SftStatus::Completed, || format!("status {:?}", out.status))?;
    let hit = out.log.val_losses().into_iter().find(|&(_, l)| l < 0.1).map(|(step, _)| step);
    let step = hit.ok_or_else(|| format!("best val loss {:?} after 500 steps", out.log.best_val_loss))?;

    let corpus = write_small_corpus(work);
    let data = work.join("data");
    run_ok(&["prepare-data", "--in", s(&corpus), "--out", s(&data), "--val-frac", "0.2"])?;
    let sft = work.join("sft");
    let (train, val) = (data.join("train.jsonl"), data.join("val.jsonl"));
    run_ok(&[
        "train-sft", "--train", s(&train), "--val", s(&val), "--out", s(&sft),
        "--d-model", "16", "--layers", "1", "--heads", "2", "--d-ff", "32",
    ])?;
    let c = read_manifest(&sft)?.config;
    let sftc = &c["sft"];
    ensure(
        sftc["lr"] == 5e-5 && sftc["batch_size"] == 16 && sftc["context_length"] == 1024 && sftc["epochs"] == 3,
        || format!("manifest defaults {sftc}"),
    )?;
    Ok(format!("val loss < 0.1 at step {step}; manifest lr 5e-5, batch 16, ctx 1024, 3 epochs"))
}

// ---------------------------------------------------------------- reward

fn reward_learnability() -> Check {
    let v = Vocabulary::from_texts([synthetic::alphabet().as_str()]);
    let backbone = |seed: u64| {
        let m = DecoderModel::new(ModelConfig {
            vocab_size: v.len(),
            context_length: 128,
            n_layers: 1,
            n_heads: 4,
            d_model: 32,
            d_ff: 128,
            seed,
        })
        .unwrap();
        PolicyCheckpoint::new(m, v.clone())
    };
    let mut untrained = Vec::new();
    for seed in 0..3 {
        let rm = RewardModel::from_policy(&backbone(seed), false, seed + 1).map_err(e)?;
        let pairs = balanced_random_labels(&length_preferences(200, 12, 50 + seed), seed);
        let acc = rm.pairwise_accuracy(&pairs).map_err(e)?;
        ensure((acc - 0.5).abs() <= 0.1, || format!("untrained accuracy {acc} for seed {seed}"))?;
        untrained.push(acc);
    }

    let mut rm = RewardModel::from_policy(&backbone(3), false, 4).map_err(e)?;
    let train = length_preferences(200, 12, 3);
    let cfg = RmConfig { lr: 2e-3, epochs: 8, batch_size: 8, holdout_fraction: 0.1, seed: 3, ..RmConfig::default() };
    train_reward(&mut rm, &train, &cfg).map_err(e)?;
    let acc = rm.pairwise_accuracy(&length_preferences(200, 12, 1003)).map_err(e)?;
    ensure(acc >= 0.95, || format!("held-out accuracy {acc}"))?;

    let ln2 = std::f64::consts::LN_2;
    for x in [0.0, 1.5, -3.0, 1e6] {
        let l = pairwise_loss(x, x);
        ensure((l - ln2).abs() <= 1e-9, || format!("loss at zero margin {l} for score {x}"))?;
    }
    Ok(format!(
        "held-out accuracy {acc:.3}; untrained {:?}; zero-margin loss = ln 2",
        untrained.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------- rlhf

fn rlhf_behavior(work: &Path) -> Check {
    let mut bandit = Vec::new();
    for seed in 0..3 {
        let start = toy::bandit_policy(seed);
        let cfg = toy::bandit_config(0.1, 200, seed);
        let out = train_ppo(&start, &toy::bandit_reward, &toy::bandit_prompts(), &cfg).map_err(e)?;
        let p = toy::bandit_probability(&out.policy.model).map_err(e)?;
        ensure(out.history.len() <= 200, || format!("{} PPO steps", out.history.len()))?;
        ensure(p > 0.9, || format!("bandit seed {seed}: p = {p:.3}"))?;
        bandit.push(p);
    }

    let path = work.join("reference.ivy");
    toy::length_policy(1).save(&path).map_err(e)?;
    let before = sha256_file(&path).map_err(e)?;
    let start = PolicyCheckpoint::load(&path).map_err(e)?;
    let prompts = toy::length_prompts();
    let eval_cfg = PpoConfig { k: 64, ..toy::length_config(0.0, 0) };
    let run = |beta: f64| -> Result<ivy_core::rlhf::PolicyEval, String> {
        let out = train_ppo(&start, &toy::length_reward, &prompts, &toy::length_config(beta, 3)).map_err(e)?;
        evaluate_policy(&out.policy.model, &start.model, &toy::length_reward, &prompts, &eval_cfg, 99).map_err(e)
    };
    let free = run(0.0)?;
    let tied = run(0.1)?;
    let anchored = run(1e3)?;
    ensure(free.mean_kl > tied.mean_kl, || format!("KL: beta 0 {:.4} vs beta 0.1 {:.4}", free.mean_kl, tied.mean_kl))?;
    ensure(free.mean_score > tied.mean_score, || {
        format!("score: beta 0 {:.4} vs beta 0.1 {:.4}", free.mean_score, tied.mean_score)
    })?;
    ensure(anchored.mean_kl < 0.05, || format!("beta 1e3 KL {:.4}", anchored.mean_kl))?;
    let after = sha256_file(&path).map_err(e)?;
    ensure(before == after, || "reference checkpoint changed on disk".into())?;
    Ok(format!(
        "bandit p {:?}; KL {:.3}/{:.3}, score {:.3}/{:.3} (beta 0/0.1); beta 1e3 KL {:.4}; reference hash unchanged",
        bandit.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>(),
        free.mean_kl,
        tied.mean_kl,
        free.mean_score,
        tied.mean_score,
        anchored.mean_kl
    ))
}

fn verbosity_direction() -> Check {
    let out = toy::verbosity_experiment(&toy::VerbosityConfig::default()).map_err(e)?;
    ensure(out.ppo_mean_words > out.sft_mean_words, || {
        format!("mean words {:.2} -> {:.2}", out.sft_mean_words, out.ppo_mean_words)
    })?;
    Ok(format!(
        "mean words {:.2} -> {:.2} over 50 prompts (reward model accuracy {:.3})",
        out.sft_mean_words, out.ppo_mean_words, out.rm_holdout_accuracy
    ))
}

// ---------------------------------------------------------------- evaluation

fn pair(reference: &str, candidate: &str) -> QueryPair {
    QueryPair { query: "q".into(), reference: reference.into(), candidate: candidate.into() }
}

fn evaluation_identities() -> Check {
    let same: Vec<QueryPair> =
        ["rest and drink fluids", "take ibuprofen after meals", "see a cardiologist soon", "apply a cold compress"]
            .iter()
            .map(|a| pair(a, a))
            .collect();
    let m = train_word2vec(&embedding_corpus(&same), &Word2VecConfig::default()).map_err(e)?;
    let r = evaluate_pairs(&m, &same).map_err(e)?;
    ensure((r.mean - 100.0).abs() <= 1e-6, || format!("identical answers scored {}", r.mean))?;

    let disjoint = vec![pair("rest and drink fluids", "qqq www"), pair("take ibuprofen after meals", "eee rrr ttt")];
    let refs: Vec<&str> = disjoint.iter().map(|p| p.reference.as_str()).collect();
    let m = train_word2vec(&refs, &Word2VecConfig::default()).map_err(e)?;
    let d = evaluate_pairs(&m, &disjoint).map_err(e)?;
    ensure(d.mean.abs() < 1e-9 && d.flagged() == 2, || format!("disjoint mean {} with {} flags", d.mean, d.flagged()))?;

    let table: Vec<(String, f64)> = [
        ("ShenNong", 77.71),
        ("HuaTuo", 71.20),
        ("ChatMed", 84.51),
        ("MedicalGPT", 83.73),
        ("ChatGPT", 89.13),
        ("IvyGPT", 93.58),
    ]
    .iter()
    .map(|(n, s)| (n.to_string(), *s))
    .collect();
    let board = render_leaderboard(&table);
    let first = board.lines().nth(1).unwrap_or_default();
    ensure(first.contains("IvyGPT") && first.contains("93.58"), || format!("first row {first:?}"))?;

    let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).map_err(e)?.value;
    ensure((c - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-12, || format!("cosine {c}"))?;
    let c2 = cosine_similarity(&[3.0, 0.0, 0.0], &[0.0, 2.0, 2.0]).map_err(e)?.value;
    ensure(c2.abs() <= 1e-12, || format!("orthogonal cosine {c2}"))?;
    Ok(format!("identical {:.6}; disjoint {:.1} with 2 flags; {first}; cosine 1/sqrt2 exact", r.mean, d.mean))
}

// ---------------------------------------------------------------- storage

fn qlora_storage(work: &Path) -> Check {
    let mut m = DecoderModel::<f32>::new(ModelConfig {
        vocab_size: 96,
        context_length: 128,
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        d_ff: 256,
        seed: 0,
    })
    .map_err(e)?;
    m.quantize_base(DEFAULT_BLOCK_SIZE, &build_codebook(CodebookKind::Nf4)).map_err(e)?;
    let ck = PolicyCheckpoint::new(m.clone(), Vocabulary::from_texts(["abc"]));
    let c = ck.to_container();
    let (mut dense, mut packed) = (0usize, 0usize);
    for (name, q) in m.quantized() {
        let numel = q.numel();
        let blocks = numel.div_ceil(DEFAULT_BLOCK_SIZE);
        let codes = c.get(&format!("quant/{name}/codes")).ok_or("missing codes section")?.payload_len();
        let scales = match c.get(&format!("quant/{name}/scales")).ok_or("missing scales section")? {
            SectionData::F32 { data, .. } => 4 * data.len(),
            _ => return Err(format!("{name}: scales are not f32")),
        };
        ensure(codes == numel.div_ceil(2) && scales == 4 * blocks, || {
            format!("{name}: {codes} code bytes + {scales} scale bytes for {numel} values")
        })?;
        dense += 4 * numel;
        packed += codes + scales;
    }
    let ratio = dense as f64 / packed as f64;
    ensure((6.5..=8.0).contains(&ratio), || format!("dense/quantized ratio {ratio:.2}"))?;

    let out = work.join("bench");
    run_ok(&["bench-finetune", "--mode", "both", "--steps", "3", "--out", s(&out)])?;
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.join("bench.json")).map_err(e)?).map_err(e)?;
    let modes: Vec<&str> = rows.iter().filter_map(|r| r["mode"].as_str()).collect();
    ensure(modes == ["lora", "qlora"], || format!("bench modes {modes:?}"))?;
    let timing = |r: &serde_json::Value| r["ms_per_step"].as_f64().unwrap_or(f64::NAN);
    ensure(rows.iter().all(|r| timing(r).is_finite()), || "bench rows lack timings".into())?;
    Ok(format!(
        "{packed} quantized bytes vs {dense} dense ({ratio:.2}x); bench ms/step lora {:.1}, qlora {:.1}",
        timing(&rows[0]),
        timing(&rows[1])
    ))
}

// ---------------------------------------------------------------- pipeline

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_ivy"))
        .env_remove("IVY_SEED")
        .args(args)
        .output()
        .map_err(e)?;
    ensure(o.status.success(), || {
        format!("ivy {} exited {:?}: {}", args[0], o.status.code(), String::from_utf8_lossy(&o.stderr).trim())
    })
}

fn read_manifest(dir: &Path) -> Result<RunManifest, String> {
    RunManifest::read(&dir.join("manifest.json")).map_err(e)
}

fn write_small_corpus(dir: &Path) -> PathBuf {
    let pairs = [
        ("I have a headache.", "Rest and drink water."),
        ("My knee hurts.", "Ice it twice a day."),
        ("I cough at night.", "Try honey tea."),
        ("Itchy rash.", "Use a mild cream."),
        ("I feel dizzy.", "Stand up slowly."),
        ("Sore throat.", "Gargle salt water."),
    ];
    let lines: Vec<String> = pairs
        .iter()
        .enumerate()
        .map(|(i, (p, d))| {
            serde_json::json!({"id": i.to_string(), "source": "t", "turns": [
                {"role": "patient", "text": p}, {"role": "doctor", "text": d}]})
            .to_string()
        })
        .collect();
    let p = dir.join("corpus.jsonl");
    fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

fn output_hash(m: &RunManifest, role: &str) -> Result<String, String> {
    Ok(m.output(role).ok_or_else(|| format!("{} has no {role} output", m.command))?.sha256.clone())
}

fn input_hash(m: &RunManifest, role: &str) -> Result<String, String> {
    Ok(m.input(role).ok_or_else(|| format!("{} has no {role} input", m.command))?.sha256.clone())
}

fn pipeline(work: &Path) -> Check {
    let data = work.join("data");
    let sft = work.join("sft");
    let rm = work.join("rm");
    let ppo = work.join("ppo");
    let eval = work.join("eval");
    let corpus = fixtures().join("corpus.jsonl");
    let prefs = fixtures().join("preferences.jsonl");
    let (train, val) = (data.join("train.jsonl"), data.join("val.jsonl"));
    let (sft_ck, rm_ck, ppo_ck) = (sft.join("sft.ivy"), rm.join("rm.ivy"), ppo.join("policy.ivy"));
    let sft_arg = format!("sft={}", s(&sft_ck));
    let ppo_arg = format!("ppo={}", s(&ppo_ck));

    run_ok(&["prepare-data", "--in", s(&corpus), "--out", s(&data)])?;
    run_ok(&[
        "train-sft", "--train", s(&train), "--val", s(&val), "--out", s(&sft),
        "--lora-rank", "0", "--lr", "2e-3", "--ctx", "256", "--batch-size", "8", "--max-steps", "150",
    ])?;
    run_ok(&["train-rm", "--sft", s(&sft_ck), "--prefs", s(&prefs), "--out", s(&rm), "--lr", "1e-3", "--epochs", "2"])?;
    run_ok(&[
        "train-ppo", "--sft", s(&sft_ck), "--rm", s(&rm_ck), "--prompts", s(&data.join("prompts.jsonl")),
        "--out", s(&ppo), "--lr", "3e-4", "--max-iters", "4", "--max-new", "48", "--separate-critic",
    ])?;
    run_ok(&[
        "eval-sim", "--queries", s(&data.join("queries.jsonl")), "--ckpt", &sft_arg, "--ckpt", &ppo_arg,
        "--max-new", "96", "--out", s(&eval),
    ])?;

    let [md, ms, mr, mp, me] = [&data, &sft, &rm, &ppo, &eval].map(|d| read_manifest(d));
    let (md, ms, mr, mp, me) = (md?, ms?, mr?, mp?, me?);
    for m in [&md, &ms, &mr, &mp, &me] {
        ensure(m.status == ivy_cli::manifest::RunStatus::Success, || format!("{} status {:?}", m.command, m.status))?;
    }
    let links = [
        ("corpus -> prepare-data", sha256_file(&corpus).map_err(e)?, input_hash(&md, "corpus")?),
        ("train split -> train-sft", output_hash(&md, "train")?, input_hash(&ms, "train")?),
        ("val split -> train-sft", output_hash(&md, "val")?, input_hash(&ms, "val")?),
        ("preferences -> train-rm", sha256_file(&prefs).map_err(e)?, input_hash(&mr, "preferences")?),
        ("sft -> train-rm", output_hash(&ms, "checkpoint")?, input_hash(&mr, "policy")?),
        ("sft -> train-ppo", output_hash(&ms, "checkpoint")?, input_hash(&mp, "policy")?),
        ("rm -> train-ppo", output_hash(&mr, "checkpoint")?, input_hash(&mp, "reward")?),
        ("prompts -> train-ppo", output_hash(&md, "prompts")?, input_hash(&mp, "prompts")?),
        ("queries -> eval-sim", output_hash(&md, "queries")?, input_hash(&me, "queries")?),
    ];
    for (name, out, inp) in &links {
        ensure(out == inp, || format!("{name}: {out} != {inp}"))?;
    }
    let eval_policies: BTreeSet<&str> =
        me.inputs.iter().filter(|f| f.role == "policy").map(|f| f.sha256.as_str()).collect();
    let expected: BTreeSet<&str> =
        [ms.output("checkpoint"), mp.output("checkpoint")].into_iter().flatten().map(|f| f.sha256.as_str()).collect();
    ensure(eval_policies == expected, || "eval-sim policies do not match the trained checkpoints".into())?;
    for (m, path) in [(&ms, &sft_ck), (&mr, &rm_ck), (&mp, &ppo_ck)] {
        let on_disk = sha256_file(path).map_err(e)?;
        ensure(on_disk == output_hash(m, "checkpoint")?, || format!("{} checkpoint changed after its run", m.command))?;
    }
    let board = fs::read_to_string(eval.join("leaderboard.txt")).map_err(e)?;
    let rows: Vec<&str> = board.lines().skip(1).map(str::trim).collect();
    Ok(format!("5 stages exit 0; {} fingerprint links verified; leaderboard {:?}", links.len() + 1, rows))
}

// ---------------------------------------------------------------- driver

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let dir = |name: &str| {
        let p = work.path().join(name);
        fs::create_dir_all(&p).unwrap();
        p
    };
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Check>)> = vec![
        ("gradient-fidelity", Box::new(gradient_fidelity)),
        ("lora-identity-merge", Box::new(lora_identity_and_merge)),
        ("quantization-bound", Box::new(quantization_bound)),
        ("sft-memorization", Box::new({
            let d = dir("sft");
            move || sft_memorization(&d)
        })),
        ("reward-learnability", Box::new(reward_learnability)),
        ("rlhf-behavior", Box::new({
            let d = dir("rlhf");
            move || rlhf_behavior(&d)
        })),
        ("verbosity-direction", Box::new(verbosity_direction)),
        ("evaluation-identities", Box::new(evaluation_identities)),
        ("qlora-storage", Box::new({
            let d = dir("storage");
            move || qlora_storage(&d)
        })),
        ("pipeline-integration", Box::new({
            let d = dir("pipeline");
            move || pipeline(&d)
        })),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("{failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
