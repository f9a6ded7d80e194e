use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty partition")]
    EmptyPartition,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("prompt of {len} tokens does not fit (max_seq = {max_seq})")]
    Overlong { len: usize, max_seq: usize },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("kv cache is full ({0} positions)")]
    CacheFull(usize),

    #[error("kv cache is empty; prefill first")]
    CacheEmpty,

    #[error("token {token} out of vocabulary (size {vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("weights were released after prefill")]
    WeightsReleased,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tag rules: {0}")]
    TagRules(String),

    #[error("insufficient obfuscation: {available} virtual prompts available, {required} required")]
    InsufficientObfuscation { available: usize, required: usize },

    #[error("index {index} out of range for {len} responses")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("zero-probability prompt at position {0}")]
    ZeroProbability(usize),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("frame decode: {0}")]
    Frame(String),

    #[error("session {0} killed by controller")]
    SessionKilled(u32),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
