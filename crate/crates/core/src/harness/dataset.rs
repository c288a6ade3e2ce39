//! JSONL datasets: one `{"id", "text", "text_pair"?, "label"}` object per line.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::prompting::{LabeledExample, TaskSpec};

#[derive(Deserialize)]
struct Row {
    id: Value,
    text: String,
    #[serde(default)]
    text_pair: Option<String>,
    label: Value,
}

fn scalar_to_string(v: Value, field: &str) -> std::result::Result<String, String> {
    match v {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(format!("field `{field}` must be a string or number, got {other}")),
    }
}

/// Parse JSONL from a reader; `path` is only used in error messages.
pub fn parse_dataset(reader: impl BufRead, path: &Path) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let row: Row = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let ex = LabeledExample {
            id: scalar_to_string(row.id, "id").map_err(parse_err)?,
            text: row.text,
            text_pair: row.text_pair,
            label: scalar_to_string(row.label, "label").map_err(parse_err)?,
        };
        if !ids.insert(ex.id.clone()) {
            return Err(Error::DuplicateId(ex.id));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Io(e).context(path.display().to_string()))?;
    parse_dataset(BufReader::new(file), path)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Every example's label must belong to the task's label space.
pub fn check_labels(task: &TaskSpec, examples: &[LabeledExample]) -> Result<()> {
    for ex in examples {
        task.class_index(&ex.label)
            .map_err(|e| e.context(format!("example `{}`", ex.id)))?;
    }
    Ok(())
}
