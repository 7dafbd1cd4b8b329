use std::path::PathBuf;

use tec_core::Error as CoreError;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("missing model {path} ({hint})")]
    MissingModel { path: PathBuf, hint: String },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: CoreError,
    },
}

/// Process exit codes, one per failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const TRAINING: i32 = 4;
    pub const DIVERGENCE: i32 = 5;
    pub const INFEASIBLE: i32 = 6;
}

impl SimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) => exit::CONFIG,
            SimError::Io { .. } | SimError::Parse { .. } => exit::DATA,
            SimError::MissingModel { .. } => exit::TRAINING,
            SimError::Core { source, .. } => match source.root() {
                CoreError::Divergence { .. } => exit::DIVERGENCE,
                CoreError::Infeasible { .. } => exit::INFEASIBLE,
                CoreError::TrainingDiverged { .. }
                | CoreError::IncompatibleWeights(_)
                | CoreError::Participants { .. } => exit::TRAINING,
                CoreError::DataTooShort { .. }
                | CoreError::Misaligned
                | CoreError::SpanTooShort(_)
                | CoreError::MissingInterval(_)
                | CoreError::WindowLength { .. } => exit::DATA,
                CoreError::InvalidInput(_) | CoreError::InvalidTopology(_) => exit::CONFIG,
                _ => exit::OTHER,
            },
        }
    }
}

/// Attaches a description of the failing step to core errors.
pub trait CoreContext<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> CoreContext<T> for std::result::Result<T, CoreError> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| SimError::Core {
            context: what(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let div = SimError::Core {
            context: "x".into(),
            source: CoreError::Interval {
                interval: 3,
                source: Box::new(CoreError::Divergence { iteration: 9 }),
            },
        };
        let codes = [
            SimError::Config("c".into()).exit_code(),
            SimError::io("p", std::io::Error::other("e")).exit_code(),
            SimError::MissingModel {
                path: "m".into(),
                hint: "h".into(),
            }
            .exit_code(),
            div.exit_code(),
        ];
        assert_eq!(codes, [exit::CONFIG, exit::DATA, exit::TRAINING, exit::DIVERGENCE]);
    }
}
