use std::path::PathBuf;

use ivy_core::data::{corpus_stats, filter_clean, load_corpus, save_corpus, split_train_val};
use ivy_core::evalsim::{length_stats, render_length_table, LengthRow};
use ivy_core::jsonl;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{PrepareDataArgs, StatsArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::runner::{named_path, require_file, resolve_seed, write_json, write_text, Outcome, Run};

/// One line of a prompts file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
}

/// One line of a queries file: a prompt with the reference answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: String,
    pub reference: String,
}

pub fn load_prompts(path: &std::path::Path) -> CliResult<Vec<String>> {
    let records: Vec<PromptRecord> = jsonl::read(path)?;
    let prompts: Vec<String> = records.into_iter().map(|r| r.prompt).collect();
    if prompts.is_empty() || prompts.iter().any(|p| p.trim().is_empty()) {
        return Err(CliError::Usage(format!("{} holds no prompts or an empty prompt", path.display())));
    }
    Ok(prompts)
}

#[derive(Serialize)]
struct PrepareConfig {
    min_len: usize,
    max_len: usize,
    val_frac: f64,
    seed: u64,
}

pub fn prepare_data(a: &PrepareDataArgs) -> CliResult<RunManifest> {
    let cfg = PrepareConfig {
        min_len: a.min_len,
        max_len: a.max_len,
        val_frac: a.val_frac,
        seed: resolve_seed(a.seed)?,
    };
    if !(cfg.val_frac > 0.0 && cfg.val_frac < 1.0) {
        return Err(CliError::Usage(format!("--val-frac {} must lie in (0, 1)", cfg.val_frac)));
    }
    if cfg.min_len > cfg.max_len {
        return Err(CliError::Usage("--min-len exceeds --max-len".into()));
    }
    require_file("corpus", &a.input)?;
    let run = Run::start(&a.out, "prepare-data", &cfg, &[("corpus", a.input.clone())])?;
    let result = (|| -> CliResult<Outcome> {
        let loaded = load_corpus(&a.input)?;
        let (clean, filter) = filter_clean(&loaded.dialogues, cfg.min_len, cfg.max_len);
        let (train, val) = split_train_val(&clean, cfg.val_frac, cfg.seed)?;

        let mut out = Outcome::default();
        let path = |n: &str| run.path(n);
        save_corpus(&path("train.jsonl"), &train)?;
        out.add("train", path("train.jsonl"));
        save_corpus(&path("val.jsonl"), &val)?;
        out.add("val", path("val.jsonl"));

        let prompts: Vec<PromptRecord> = train.iter().map(|d| PromptRecord { prompt: d.prompt_text() }).collect();
        jsonl::write(&path("prompts.jsonl"), &prompts)?;
        out.add("prompts", path("prompts.jsonl"));
        let queries: Vec<QueryRecord> = val
            .iter()
            .map(|d| QueryRecord { query: d.prompt_text(), reference: d.response_text().to_string() })
            .collect();
        jsonl::write(&path("queries.jsonl"), &queries)?;
        out.add("queries", path("queries.jsonl"));

        write_text(&path("rejects.tsv"), &loaded.rejects_report())?;
        out.add("rejects", path("rejects.tsv"));
        let stats = json!({
            "loaded": loaded.dialogues.len(),
            "rejected": loaded.rejects.len(),
            "filter": { "kept": filter.kept, "removed": filter.removed },
            "train": corpus_stats(&train),
            "val": corpus_stats(&val),
        });
        write_json(&path("stats.json"), &stats)?;
        out.add("stats", path("stats.json"));
        eprintln!(
            "loaded {} dialogues ({} rejected), kept {}, split {} train / {} val",
            loaded.dialogues.len(),
            loaded.rejects.len(),
            filter.kept,
            train.len(),
            val.len()
        );
        Ok(out)
    })();
    run.finish(result)
}

#[derive(Deserialize)]
struct ResponseRecord {
    #[serde(alias = "candidate")]
    response: String,
}

#[derive(Serialize)]
struct StatsConfig {
    responses: Vec<(String, PathBuf)>,
    reference: Vec<(String, f64)>,
}

pub fn stats(a: &StatsArgs) -> CliResult<RunManifest> {
    let responses: Vec<(String, PathBuf)> = a.responses.iter().map(|s| named_path(s)).collect();
    let reference = a
        .reference
        .iter()
        .map(|s| {
            let (name, value) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--reference {s:?} is not NAME=VALUE")))?;
            let v: f64 = value
                .parse()
                .map_err(|_| CliError::Usage(format!("--reference {s:?} has a non-numeric value")))?;
            Ok((name.to_string(), v))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if responses.is_empty() && reference.is_empty() && a.corpus.is_none() {
        return Err(CliError::Usage("give --responses, --reference or --corpus".into()));
    }
    let mut inputs: Vec<(&str, PathBuf)> = Vec::new();
    for (_, p) in &responses {
        require_file("responses", p)?;
        inputs.push(("responses", p.clone()));
    }
    if let Some(c) = &a.corpus {
        require_file("corpus", c)?;
        inputs.push(("corpus", c.clone()));
    }
    let cfg = StatsConfig { responses: responses.clone(), reference: reference.clone() };
    let run = Run::start(&a.out, "stats", &cfg, &inputs)?;
    let result = (|| -> CliResult<Outcome> {
        let mut systems = Vec::new();
        for (name, path) in &responses {
            let recs: Vec<ResponseRecord> = jsonl::read(path)?;
            systems.push((name.clone(), recs.into_iter().map(|r| r.response).collect::<Vec<_>>()));
        }
        let mut rows = length_stats(&systems);
        rows.extend(reference.iter().map(|(n, v)| LengthRow { system: n.clone(), responses: 0, mean_words: *v }));

        let mut out = Outcome::default();
        if !rows.is_empty() {
            let table = render_length_table(&rows);
            print!("{table}");
            write_text(&run.path("lengths.txt"), &table)?;
            out.add("lengths", run.path("lengths.txt"));
            jsonl::write(&run.path("lengths.jsonl"), &rows)?;
            out.add("lengths-records", run.path("lengths.jsonl"));
        }
        if let Some(c) = &a.corpus {
            let loaded = load_corpus(c)?;
            write_json(&run.path("corpus_stats.json"), &corpus_stats(&loaded.dialogues))?;
            out.add("corpus-stats", run.path("corpus_stats.json"));
        }
        Ok(out)
    })();
    run.finish(result)
}
