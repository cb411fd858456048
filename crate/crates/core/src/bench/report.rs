//! Line-oriented results: one `record=<kind> key=value ...` line per
//! measurement, then a `[summary]` line followed by one `key=value` per line.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::BenchError;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Record {
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl Record {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, BenchError> {
        let raw = self
            .get(key)
            .ok_or_else(|| BenchError::Parse(format!("{} record lacks {key}", self.kind)))?;
        raw.parse()
            .map_err(|_| BenchError::Parse(format!("{} record: bad {key}={raw}", self.kind)))
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record={}", self.kind)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// Anything a benchmark reports.
pub trait ToRecord: Sized {
    const KIND: &'static str;
    fn to_record(&self) -> Record;
    fn from_record(record: &Record) -> Result<Self, BenchError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Report {
    pub records: Vec<Record>,
    pub summary: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, r: &impl ToRecord) {
        self.records.push(r.to_record());
    }

    pub fn summarize(&mut self, key: &str, value: impl fmt::Display) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn summary_value(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Records of one kind, decoded.
    pub fn decode<T: ToRecord>(&self) -> Result<Vec<T>, BenchError> {
        self.records
            .iter()
            .filter(|r| r.kind == T::KIND)
            .map(T::from_record)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{r}");
        }
        out.push_str("[summary]\n");
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut report = Self::default();
        let mut in_summary = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[summary]" {
                in_summary = true;
                continue;
            }
            let bad = || BenchError::Parse(format!("line {}: {line:?}", i + 1));
            if in_summary {
                let (k, v) = line.split_once('=').ok_or_else(bad)?;
                report.summary.push((k.to_string(), v.to_string()));
                continue;
            }
            let mut parts = line.split(' ').filter(|p| !p.is_empty());
            let kind = parts
                .next()
                .and_then(|p| p.strip_prefix("record="))
                .ok_or_else(bad)?;
            let mut record = Record::new(kind);
            for p in parts {
                let (k, v) = p.split_once('=').ok_or_else(bad)?;
                record.fields.push((k.to_string(), v.to_string()));
            }
            report.records.push(record);
        }
        Ok(report)
    }
}
