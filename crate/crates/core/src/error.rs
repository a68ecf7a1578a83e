use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("infeasible CTC target: {target_len} labels ({repeats} adjacent repeats) need {required} frames, got {frames}")]
    InfeasibleTarget {
        target_len: usize,
        repeats: usize,
        required: usize,
        frames: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("resampling not supported: expected 16000 Hz, got {0} Hz")]
    SampleRate(u32),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("utterance {utt_id}")]
    Utterance {
        utt_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches the utterance id to an error.
    pub fn for_utterance(self, utt_id: &str) -> Self {
        Error::Utterance {
            utt_id: utt_id.to_string(),
            source: Box::new(self),
        }
    }
}
