use std::collections::BTreeSet;
use std::path::PathBuf;

use ivy_core::evalsim::{
    embedding_corpus, evaluate_pairs, length_stats, load_pairs, render_leaderboard, render_length_table,
    train_word2vec, QueryPair, Word2VecConfig,
};
use ivy_core::jsonl;
use ivy_core::model::PolicyCheckpoint;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::EvalSimArgs;
use crate::commands::data::QueryRecord;
use crate::commands::sample::{draw, encode_prompt, Sampling};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::runner::{named_path, require_file, usage, write_text, Outcome, Run};

/// A leaderboard row taken as given, e.g. a published score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedScore {
    pub system: String,
    pub score: f64,
}

#[derive(Serialize)]
struct EvalConfig {
    word2vec: Word2VecConfig,
    sampling: Sampling,
    pairs: Vec<(String, PathBuf)>,
    checkpoints: Vec<(String, PathBuf)>,
}

pub fn eval_sim(a: &EvalSimArgs) -> CliResult<RunManifest> {
    let sampling = Sampling::from_args(&a.sampling)?;
    let w2v = Word2VecConfig {
        dim: a.dim,
        window: a.window,
        negatives: a.negatives,
        epochs: a.w2v_epochs,
        seed: sampling.seed,
        ..Word2VecConfig::default()
    };
    w2v.validate().map_err(usage)?;
    let pairs: Vec<(String, PathBuf)> = a.pairs.iter().map(|s| named_path(s)).collect();
    let ckpts: Vec<(String, PathBuf)> = a.ckpt.iter().map(|s| named_path(s)).collect();
    if ckpts.is_empty() != a.queries.is_none() {
        return Err(CliError::Usage("--ckpt and --queries must be given together".into()));
    }
    if pairs.is_empty() && ckpts.is_empty() && a.scores.is_none() {
        return Err(CliError::Usage("nothing to evaluate: give --pairs, --ckpt with --queries, or --scores".into()));
    }
    let mut names = BTreeSet::new();
    for (n, _) in pairs.iter().chain(&ckpts) {
        if !names.insert(n.clone()) {
            return Err(CliError::Usage(format!("system name {n:?} is used twice")));
        }
    }
    let mut inputs: Vec<(&str, PathBuf)> = Vec::new();
    for (_, p) in &pairs {
        require_file("pairs", p)?;
        inputs.push(("pairs", p.clone()));
    }
    if let Some(q) = &a.queries {
        require_file("queries", q)?;
        inputs.push(("queries", q.clone()));
    }
    for (_, p) in &ckpts {
        require_file("checkpoint", p)?;
        inputs.push(("policy", p.clone()));
    }
    if let Some(s) = &a.scores {
        require_file("scores", s)?;
        inputs.push(("scores", s.clone()));
    }
    let cfg = EvalConfig { word2vec: w2v.clone(), sampling, pairs: pairs.clone(), checkpoints: ckpts.clone() };
    let run = Run::start(&a.out, "eval-sim", &cfg, &inputs)?;

    let result = (|| -> CliResult<Outcome> {
        let mut out = Outcome::default();
        let mut systems: Vec<(String, Vec<QueryPair>)> = Vec::new();
        for (name, path) in &pairs {
            systems.push((name.clone(), load_pairs(path)?));
        }
        if let Some(qpath) = &a.queries {
            let queries: Vec<QueryRecord> = jsonl::read(qpath)?;
            for (name, path) in &ckpts {
                let ck = PolicyCheckpoint::load(path)?;
                let answered = answer_queries(&ck, &queries, &sampling)?;
                let file = run.path(&format!("candidates-{name}.jsonl"));
                jsonl::write(&file, &answered)?;
                out.add("candidates", file);
                systems.push((name.clone(), answered));
            }
        }

        let mut board: Vec<(String, f64)> = Vec::new();
        let mut report: Vec<serde_json::Value> = Vec::new();
        if !systems.is_empty() {
            let corpus: Vec<&str> = systems.iter().flat_map(|(_, p)| embedding_corpus(p)).collect();
            let model = train_word2vec(&corpus, &w2v)?;
            model.save(&run.path("embeddings.json"))?;
            out.add("embeddings", run.path("embeddings.json"));
            for (name, ps) in &systems {
                let r = evaluate_pairs(&model, ps)?;
                if r.flagged() > 0 {
                    log::warn!("{name}: {} of {} pairs have an answer with no known token", r.flagged(), r.count);
                }
                report.push(json!({
                    "kind": "system", "system": name, "mean": r.mean, "count": r.count,
                    "flagged": r.flagged(), "embedding_fingerprint": r.embedding_fingerprint,
                }));
                for (i, p) in r.pairs.iter().enumerate() {
                    report.push(json!({
                        "kind": "pair", "system": name, "index": i, "similarity": p.similarity,
                        "reference_oov": p.reference_oov, "candidate_oov": p.candidate_oov,
                    }));
                }
                board.push((name.clone(), r.mean));
            }
            let lengths: Vec<(String, Vec<&str>)> = systems
                .iter()
                .map(|(n, ps)| (n.clone(), ps.iter().map(|p| p.candidate.as_str()).collect()))
                .collect();
            write_text(&run.path("lengths.txt"), &render_length_table(&length_stats(&lengths)))?;
            out.add("lengths", run.path("lengths.txt"));
        }
        if let Some(path) = &a.scores {
            for f in jsonl::read::<FixedScore>(path)? {
                report.push(json!({ "kind": "system", "system": f.system, "mean": f.score, "fixed": true }));
                board.push((f.system, f.score));
            }
        }
        let table = render_leaderboard(&board);
        print!("{table}");
        write_text(&run.path("leaderboard.txt"), &table)?;
        out.add("leaderboard", run.path("leaderboard.txt"));
        jsonl::write(&run.path("report.jsonl"), &report)?;
        out.add("report", run.path("report.jsonl"));
        Ok(out)
    })();
    run.finish(result)
}

/// Samples one answer per query. Queries answered with nothing are left
/// out, since an empty answer has no embedding.
fn answer_queries(ck: &PolicyCheckpoint, queries: &[QueryRecord], s: &Sampling) -> CliResult<Vec<QueryPair>> {
    let mut out = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let (prompt, _) = encode_prompt(ck, &q.query);
        let (candidate, _, _) = draw(ck, &prompt, s, i)?;
        if candidate.trim().is_empty() {
            log::warn!("query {} got an empty answer and is skipped", i + 1);
            continue;
        }
        out.push(QueryPair { query: q.query.clone(), reference: q.reference.clone(), candidate });
    }
    if out.is_empty() {
        return Err(CliError::Runtime("the checkpoint answered every query with an empty response".into()));
    }
    Ok(out)
}
