//! Line-oriented `key = value` settings. `#` starts a comment; keys may
//! repeat, the last one wins.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::PipelineError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(PipelineError::Config { line: i + 1, message: format!("expected key = value, got {line:?}") });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(PipelineError::Config { line: i + 1, message: "empty key".into() });
            }
            entries.insert(key.to_owned(), (v.trim().to_owned(), i + 1));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, PipelineError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| PipelineError::Config { line: *line, message: format!("bad value {v:?} for {key}") }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}
