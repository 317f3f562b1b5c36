use std::fmt;

use serde_json::json;

/// Failure of a command, with the exit code of its class.
#[derive(Debug)]
pub struct CliError {
    pub class: &'static str,
    pub code: i32,
    pub message: String,
    pub details: serde_json::Value,
}

pub type CliResult<T> = Result<T, CliError>;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_DIGEST: i32 = 5;
pub const EXIT_CHECKPOINT: i32 = 6;
pub const EXIT_TRAINING: i32 = 7;
pub const EXIT_EMPTY_CORPUS: i32 = 8;
pub const EXIT_PRECONDITION: i32 = 9;

impl CliError {
    pub fn new(class: &'static str, code: i32, message: impl Into<String>) -> CliError {
        CliError { class, code, message: message.into(), details: serde_json::Value::Null }
    }

    pub fn usage(message: impl Into<String>) -> CliError {
        CliError::new("usage", EXIT_USAGE, message)
    }

    pub fn config(message: impl Into<String>) -> CliError {
        CliError::new("config", EXIT_CONFIG, message)
    }

    pub fn digest(message: impl Into<String>, mismatches: &[String]) -> CliError {
        CliError { details: json!({ "mismatched": mismatches }), ..CliError::new("digest_mismatch", EXIT_DIGEST, message) }
    }

    pub fn record(&self) -> String {
        let mut err = json!({ "class": self.class, "code": self.code, "message": self.message });
        if !self.details.is_null() {
            err["details"] = self.details.clone();
        }
        json!({ "error": err }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.class, self.message)
    }
}

impl From<mot_core::Error> for CliError {
    fn from(e: mot_core::Error) -> CliError {
        use mot_core::Error as E;
        let message = e.to_string();
        match e {
            E::Config(_) | E::Parse { .. } | E::Json(_) => CliError::new("config", EXIT_CONFIG, message),
            E::Io(_) => CliError::new("io", EXIT_IO, message),
            E::Integrity(_) => CliError::new("digest_mismatch", EXIT_DIGEST, message),
            E::Corruption(_) | E::Incompatible { .. } | E::Shape { .. } => CliError::new("checkpoint", EXIT_CHECKPOINT, message),
            E::Divergence { .. } | E::Branch { .. } => CliError::new("training", EXIT_TRAINING, message),
            E::EmptyCorpus { correct, total } => CliError {
                details: json!({ "correct": correct, "total": total }),
                ..CliError::new("empty_corpus", EXIT_EMPTY_CORPUS, message)
            },
            E::Length { .. } | E::Vocabulary(_) | E::InvalidBatch(_) | E::Precondition(_) | E::MissingEval { .. } => {
                CliError::new("precondition", EXIT_PRECONDITION, message)
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::new("io", EXIT_IO, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::config(e.to_string())
    }
}
