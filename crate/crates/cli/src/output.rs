use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::commands::CommandError;

/// Machine-readable record of one invocation. Timing is kept out so that
/// reruns produce identical bytes.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_count: Option<u64>,
    pub results: Value,
}

impl RunReport {
    pub fn new(command: &'static str, config: Value, eval_count: Option<u64>, results: Value) -> Self {
        RunReport {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            eval_count,
            results,
        }
    }
}

pub fn to_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("report values serialize")
}

/// Writes `text` to `path`, or to standard output when there is none.
pub fn write_text(path: Option<&Path>, text: &str) -> Result<(), CommandError> {
    match path {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)
                    .map_err(|e| CommandError::Input(format!("{}: {e}", parent.display())))?;
            }
            fs::write(path, text).map_err(|e| CommandError::Input(format!("{}: {e}", path.display())))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|()| stdout.flush())
                .map_err(|e| CommandError::Input(format!("standard output: {e}")))
        }
    }
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CommandError> {
    let mut text = serde_json::to_string_pretty(value).expect("report values serialize");
    text.push('\n');
    write_text(path, &text)
}
