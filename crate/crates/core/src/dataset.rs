//! Multiple-choice instances and their JSONL files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GsapError, Result};

pub const MIN_CHOICES: usize = 2;
pub const MAX_CHOICES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    /// Zero-based index of the correct choice.
    pub answer: usize,
}

impl QaInstance {
    pub fn validate(&self) -> Result<()> {
        let b = self.choices.len();
        if !(MIN_CHOICES..=MAX_CHOICES).contains(&b) {
            return Err(GsapError::InvalidInstance(format!("{}: {b} choices, expected {MIN_CHOICES}..={MAX_CHOICES}", self.id)));
        }
        if self.answer >= b {
            return Err(GsapError::InvalidInstance(format!("{}: answer {} out of range for {b} choices", self.id, self.answer)));
        }
        if self.question.trim().is_empty() {
            return Err(GsapError::InvalidInstance(format!("{}: empty question", self.id)));
        }
        Ok(())
    }
}

/// Valid instances of a JSONL file plus the rejected lines as `(line, reason)`.
#[derive(Clone, Debug, Default)]
pub struct LoadedDataset {
    pub instances: Vec<QaInstance>,
    pub rejected: Vec<(usize, String)>,
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<LoadedDataset> {
    let mut out = LoadedDataset::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<QaInstance>(line)
            .map_err(|e| GsapError::InvalidInstance(e.to_string()))
            .and_then(|q| q.validate().map(|_| q));
        match parsed {
            Ok(q) => out.instances.push(q),
            Err(e) => out.rejected.push((i + 1, e.to_string())),
        }
    }
    if out.instances.is_empty() {
        return Err(GsapError::NoValidInstances { path: path.into(), rejected: out.rejected.len() });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let text = fs::read_to_string(path).map_err(|e| GsapError::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn dump_dataset(path: &Path, instances: &[QaInstance]) -> Result<()> {
    let mut text = String::new();
    for q in instances {
        text.push_str(&serde_json::to_string(q)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| GsapError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("data.jsonl")
    }

    #[test]
    fn one_valid_line() {
        let d = parse_dataset(r#"{"id":"a","question":"q?","choices":["x","y"],"answer":1}"#, p()).unwrap();
        assert_eq!(d.instances.len(), 1);
        assert_eq!(d.instances[0].answer, 1);
    }

    #[test]
    fn six_choices_rejected() {
        let text = concat!(
            r#"{"id":"a","question":"q?","choices":["1","2","3","4","5","6"],"answer":0}"#,
            "\n",
            r#"{"id":"b","question":"q?","choices":["1","2"],"answer":0}"#,
            "\nnot json\n",
        );
        let d = parse_dataset(text, p()).unwrap();
        assert_eq!(d.instances.len(), 1);
        assert_eq!(d.rejected.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn nothing_valid_is_an_error() {
        let err = parse_dataset(r#"{"id":"a","question":"q","choices":["x"],"answer":0}"#, p()).unwrap_err();
        assert!(matches!(err, GsapError::NoValidInstances { rejected: 1, .. }));
    }
}
