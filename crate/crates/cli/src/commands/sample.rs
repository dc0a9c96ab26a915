use ivy_core::model::{generate, PolicyCheckpoint, SamplerConfig};
use ivy_core::reward::RewardModel;
use ivy_core::rlhf::fit_prompt;
use ivy_core::jsonl;
use serde::{Deserialize, Serialize};

use crate::args::{SampleArgs, SamplingArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::runner::{require_file, resolve_seed, usage, Outcome, Run};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub index: usize,
    pub response: String,
    /// Summed log-probability under the sampling distribution.
    pub logprob: f64,
    pub tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Sampling {
    pub top_k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Sampling {
    pub fn from_args(a: &SamplingArgs) -> CliResult<Self> {
        let s = Sampling {
            top_k: a.top_k,
            temperature: a.temp,
            max_new_tokens: a.max_new,
            seed: resolve_seed(a.seed)?,
        };
        s.sampler(0).validate().map_err(usage)?;
        Ok(s)
    }

    /// Sampler for the `i`-th draw.
    pub fn sampler(&self, i: usize) -> SamplerConfig {
        SamplerConfig {
            top_k: self.top_k,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed.wrapping_add(i as u64),
            ..SamplerConfig::default()
        }
    }
}

/// Encodes a prompt and keeps its tail when it does not fit the context.
/// Returns the ids and, if truncated, the original length.
pub fn encode_prompt(ck: &PolicyCheckpoint, text: &str) -> (Vec<usize>, Option<usize>) {
    let ids = ck.vocab.encode_prompt(text);
    let budget = ck.model.config().context_length.saturating_sub(1).max(2);
    if ids.len() > budget {
        let n = ids.len();
        (fit_prompt(&ids, budget), Some(n))
    } else {
        (ids, None)
    }
}

/// Decoded text of draw `i`, its summed log-probability and token count.
pub fn draw(ck: &PolicyCheckpoint, prompt: &[usize], s: &Sampling, i: usize) -> CliResult<(String, f64, usize)> {
    let mut cfg = s.sampler(i);
    cfg.top_k = cfg.top_k.min(ck.model.config().vocab_size);
    let g = generate(&ck.model, prompt, &cfg)?;
    Ok((ck.vocab.decode_response(&g.tokens), g.logprobs.iter().sum(), g.tokens.len()))
}

#[derive(Serialize)]
struct SampleConfig<'a> {
    prompt: &'a str,
    k: usize,
    sampling: Sampling,
}

pub fn sample(a: &SampleArgs) -> CliResult<RunManifest> {
    let sampling = Sampling::from_args(&a.sampling)?;
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    if a.prompt.trim().is_empty() {
        return Err(CliError::Usage("--prompt is empty".into()));
    }
    require_file("checkpoint", &a.ckpt)?;
    let mut inputs = vec![("policy", a.ckpt.clone())];
    if let Some(rm) = &a.rm {
        require_file("reward checkpoint", rm)?;
        inputs.push(("reward", rm.clone()));
    }
    let cfg = SampleConfig { prompt: &a.prompt, k: a.k, sampling };
    let run = Run::start(&a.out, "sample", &cfg, &inputs)?;
    let result = (|| -> CliResult<Outcome> {
        let ck = PolicyCheckpoint::load(&a.ckpt)?;
        let (prompt, truncated) = encode_prompt(&ck, &a.prompt);
        if let Some(n) = truncated {
            eprintln!(
                "note: prompt of {n} tokens truncated to its last {} to fit the context of {}",
                prompt.len(),
                ck.model.config().context_length
            );
        }
        let mut rows = Vec::with_capacity(a.k);
        for i in 0..a.k {
            let (response, logprob, tokens) = draw(&ck, &prompt, &sampling, i)?;
            rows.push(SampledResponse { index: i, response, logprob, tokens, score: None });
        }
        if let Some(path) = &a.rm {
            rows = rank(&RewardModel::from_checkpoint(PolicyCheckpoint::load(path)?)?, &a.prompt, rows)?;
        }
        for r in &rows {
            match r.score {
                Some(s) => println!("[{}] score {s:.4}  logprob {:.3}  {}", r.index, r.logprob, r.response),
                None => println!("[{}] logprob {:.3}  {}", r.index, r.logprob, r.response),
            }
        }
        let mut out = Outcome::default();
        jsonl::write(&run.path("samples.jsonl"), &rows)?;
        out.add("samples", run.path("samples.jsonl"));
        Ok(out)
    })();
    run.finish(result)
}

/// Orders responses by reward-model score. Empty responses cannot be
/// scored and go last, unscored.
fn rank(rm: &RewardModel, prompt: &str, rows: Vec<SampledResponse>) -> CliResult<Vec<SampledResponse>> {
    let (scorable, empty): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| !r.response.trim().is_empty());
    let texts: Vec<&str> = scorable.iter().map(|r| r.response.as_str()).collect();
    let ranked = rm.rank_responses(prompt, &texts)?;
    let mut out: Vec<SampledResponse> = ranked
        .into_iter()
        .map(|r| SampledResponse { score: Some(r.score), ..scorable[r.index].clone() })
        .collect();
    out.extend(empty);
    Ok(out)
}
