use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ivy", version, about = "Desk-scale SFT, reward modelling and PPO for a dialogue model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, clean and split a dialogue corpus.
    PrepareData(PrepareDataArgs),
    /// Supervised fine-tuning of a fresh or existing policy.
    TrainSft(TrainSftArgs),
    /// Train a reward model on preference records.
    TrainRm(TrainRmArgs),
    /// KL-penalised PPO against a reward model.
    TrainPpo(TrainPpoArgs),
    /// Sample responses from a checkpoint, optionally ranked by a reward model.
    Sample(SampleArgs),
    /// Word2vec answer-similarity leaderboard.
    EvalSim(EvalSimArgs),
    /// Response length statistics.
    Stats(StatsArgs),
    /// Time identical fine-tuning workloads with dense and quantized bases.
    BenchFinetune(BenchArgs),
    /// Serve pairwise annotation tasks over HTTP.
    ServeAnnotate(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PrepareDataArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum characters of every doctor turn.
    #[arg(long, default_value_t = 2)]
    pub min_len: usize,
    /// Maximum total characters of a dialogue.
    #[arg(long, default_value_t = 4096)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    /// Model context; defaults to the training context length.
    #[arg(long)]
    pub model_ctx: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainSftArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub ctx: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// 0 trains every weight.
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    /// Store the frozen base as 4-bit NF4.
    #[arg(long)]
    pub quantize: bool,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainRmArgs {
    #[arg(long)]
    pub sft: PathBuf,
    /// Preference file; repeat to merge several annotators' files.
    #[arg(long, required = true)]
    pub prefs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Train the policy's adapters and the head instead of the whole backbone.
    #[arg(long)]
    pub use_adapters: bool,
}

#[derive(Debug, Args)]
pub struct TrainPpoArgs {
    #[arg(long)]
    pub sft: PathBuf,
    #[arg(long)]
    pub rm: PathBuf,
    /// Line-delimited `{"prompt": ...}` records.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub ctx: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub kl_coef: Option<f64>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub ppo_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub kl_ceiling: Option<f64>,
    #[arg(long)]
    pub max_new: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub temp: Option<f64>,
    /// Give the value function its own backbone copy.
    #[arg(long)]
    pub separate_critic: bool,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct SamplingArgs {
    /// Clamped to the vocabulary size.
    #[arg(long, default_value_t = 40)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temp: f64,
    #[arg(long, default_value_t = 128)]
    pub max_new: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Rank the responses with this reward model.
    #[arg(long)]
    pub rm: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalSimArgs {
    /// Query-pair file, as `NAME=PATH` or `PATH` (named after the file stem).
    #[arg(long)]
    pub pairs: Vec<String>,
    /// Line-delimited `{"query", "reference"}` records answered by `--ckpt`.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Checkpoint to evaluate on `--queries`, as `NAME=PATH` or `PATH`.
    #[arg(long)]
    pub ckpt: Vec<String>,
    /// Line-delimited `{"system", "score"}` rows added to the leaderboard as is.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    #[arg(long, default_value_t = 5)]
    pub w2v_epochs: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Responses of one system, as `NAME=PATH`; records carry `response` or `candidate`.
    #[arg(long)]
    pub responses: Vec<String>,
    /// Fixed mean word count, as `NAME=VALUE`.
    #[arg(long)]
    pub reference: Vec<String>,
    /// Dialogue corpus to summarise.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Lora,
    Qlora,
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchMode::Both)]
    pub mode: BenchMode,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Line-delimited `{"prompt": ...}` records.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Preference file to append to.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory holding the built annotation UI.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}
