//! Dialogue corpora: loading, cleaning, splitting, rendering and statistics.

pub mod corpus;
pub mod render;
pub mod stats;

pub use corpus::{
    filter_clean, load_corpus, parse_corpus, save_corpus, split_train_val, Dialogue, FilterReport,
    LoadedCorpus, Reject, RejectReason, Role, Turn,
};
pub use render::{fit_prompt_response, render_template, Rendered};
pub use stats::{corpus_stats, mean_word_count, word_count, word_tokens, CorpusStats};
