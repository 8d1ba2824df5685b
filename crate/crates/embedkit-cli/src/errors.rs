//! CLI error envelope: every domain failure leaves on stderr as one JSON
//! object and exit code 1 (usage errors exit 2 via clap).

use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct CliError {
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            error: code.into(),
            message: message.into(),
            stage: None,
        }
    }

    pub fn with_stage(mut self, stage: impl Into<String>) -> Self {
        self.stage = Some(stage.into());
        self
    }

    pub fn emit(&self) {
        // Fall back to plain text only if the serializer itself fails.
        match serde_json::to_string(self) {
            Ok(json) => eprintln!("{json}"),
            Err(_) => eprintln!("{{\"error\":\"{}\"}}", self.error),
        }
    }
}

impl From<embedkit::Error> for CliError {
    fn from(e: embedkit::Error) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("json", e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags an error with the pipeline stage that produced it.
pub fn stage_err<E: Into<CliError>>(stage: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| e.into().with_stage(stage)
}
