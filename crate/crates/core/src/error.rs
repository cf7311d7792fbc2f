use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("fact `{id}`: {msg}")]
    InvalidFact { id: String, msg: String },

    #[error("corpus level counts mismatch: expected {expected:?}, got {actual:?}")]
    CorpusShape { expected: [usize; 4], actual: [usize; 4] },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}{}", .fact.as_ref().map(|f| format!(" (fact `{f}`)")).unwrap_or_default())]
    SequenceTooLong { len: usize, max: usize, fact: Option<String> },

    #[error("zero gradient: {0}")]
    ZeroGradient(String),

    #[error("cache has no record for fact `{fact}` candidate {candidate}")]
    MissingRecord { fact: String, candidate: u8 },

    #[error("steering direction is zero (truth and distractor means coincide)")]
    ZeroDirection,

    #[error("layer {layer} out of range for {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("mode `{mode}` cannot run: {detail}")]
    IncompatibleMode { mode: String, detail: String },

    #[error("could not find {wanted} negative-margin facts after {draws} draws; try another seed")]
    SynthExhausted { wanted: usize, draws: usize },

    #[error("malformed {what} file: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("digest mismatch for `{file}`")]
    DigestMismatch { file: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
