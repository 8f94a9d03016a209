//! Caption shards: newline-delimited JSON, one [`ClipRecord`] per line.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceTag {
    #[serde(rename = "asr")]
    Asr,
    #[serde(rename = "pseudo")]
    Pseudo,
    #[serde(rename = "synthetic-gt")]
    SyntheticGt,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Asr => "asr",
            Self::Pseudo => "pseudo",
            Self::SyntheticGt => "synthetic-gt",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(Self::Asr),
            "pseudo" => Ok(Self::Pseudo),
            "synthetic-gt" => Ok(Self::SyntheticGt),
            other => Err(Error::Data(format!("unknown source tag `{other}`"))),
        }
    }
}

/// One captioned clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub video_id: String,
    pub clip_index: usize,
    pub start: f64,
    pub end: f64,
    pub center: f64,
    pub caption: String,
    pub source: SourceTag,
    pub captioner: String,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.start, self.end, self.center].iter().all(|v| v.is_finite());
        if !finite || self.start < 0.0 || self.end <= self.start {
            return Err(Error::Data(format!("bad clip span [{}, {})", self.start, self.end)));
        }
        if !(self.start..self.end).contains(&self.center) {
            return Err(Error::Data(format!(
                "center {} outside [{}, {})",
                self.center, self.start, self.end
            )));
        }
        if self.caption.trim().is_empty() {
            return Err(Error::Data("empty caption".into()));
        }
        if self.video_id.is_empty() {
            return Err(Error::Data("empty video id".into()));
        }
        Ok(())
    }

    pub fn word_count(&self) -> usize {
        self.caption.split_whitespace().count()
    }
}

/// Serializes records, one JSON object per line.
pub fn format_shard(records: &[ClipRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses shard text; errors carry the 1-based line number.
pub fn parse_shard(text: &str, source_name: &str) -> Result<Vec<ClipRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parse_err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message,
        };
        let record: ClipRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(|e| parse_err(e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_shard(records: &[ClipRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(format_shard(records).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: &Path) -> Result<Vec<ClipRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_shard(&text, &path.display().to_string())
}
