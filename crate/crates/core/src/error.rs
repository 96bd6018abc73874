use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("unknown task id `{0}`")]
    UnknownTask(String),

    #[error("environment usage error: {0}")]
    EnvUsage(String),

    #[error("rollout protocol violation: {0}")]
    Protocol(String),

    #[error("cannot close an empty rollout buffer")]
    EmptyRollout,

    #[error("stale backfill of {deficit} steps exceeds the retained rollout ({available} steps)")]
    BackfillTooLarge { deficit: usize, available: usize },

    #[error("{steps} steps cannot be split into {minibatches} equal mini-batches")]
    IndivisibleMinibatch { steps: usize, minibatches: usize },

    #[error("cannot pack an empty sequence group")]
    EmptyGroup,

    #[error("missing bootstrap value for truncated sequence {0}")]
    MissingBootstrap(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("requested {requested} steps but at most {max} can be collected")]
    StepsOutOfRange { requested: usize, max: usize },

    #[error("no progress for {waited_ms} ms during collection: {diagnostics}")]
    Deadlock { waited_ms: u128, diagnostics: String },

    #[error("replica group aborted: {0}")]
    ReplicaAborted(String),

    #[error("worker channel closed")]
    ChannelClosed,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
