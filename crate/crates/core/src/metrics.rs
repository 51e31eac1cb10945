//! Line-delimited metrics stream.
//!
//! Each line is a flat JSON object whose `tag` field names the record kind.
//! Reals are written with 17 significant digits so a replay reproduces the
//! in-memory values exactly; non-finite reals are written as the strings
//! `"inf"`, `"-inf"` and `"nan"`.

use std::io::Write;

use serde_json::{Map, Value as Json};

use crate::error::{Error, Result};
use crate::ledger::{summarize, LedgerEntry, LedgerTotals};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Real(f64),
    Str(String),
    Bool(bool),
    Null,
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v as i64)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl From<Option<f64>> for Value {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Value::Null, Value::Real)
    }
}

pub fn format_real(x: f64) -> String {
    if x.is_nan() {
        "\"nan\"".into()
    } else if x.is_infinite() {
        if x > 0.0 { "\"inf\"" } else { "\"-inf\"" }.into()
    } else {
        format!("{x:.16e}")
    }
}

/// One tagged record with ordered fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub tag: String,
    pub fields: Vec<(String, Value)>,
}

impl Record {
    pub fn new(tag: &str) -> Self {
        Self {
            tag: tag.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.fields.push((key.to_string(), value.into()));
        self
    }

    pub fn to_line(&self) -> String {
        let mut s = String::with_capacity(64 + 24 * self.fields.len());
        s.push_str("{\"tag\":");
        s.push_str(&Json::String(self.tag.clone()).to_string());
        for (k, v) in &self.fields {
            s.push(',');
            s.push_str(&Json::String(k.clone()).to_string());
            s.push(':');
            match v {
                Value::Int(i) => s.push_str(&i.to_string()),
                Value::Real(x) => s.push_str(&format_real(*x)),
                Value::Str(t) => s.push_str(&Json::String(t.clone()).to_string()),
                Value::Bool(b) => s.push_str(if *b { "true" } else { "false" }),
                Value::Null => s.push_str("null"),
            }
        }
        s.push('}');
        s
    }
}

/// Append-only record sink.
pub struct MetricsWriter<W: Write> {
    inner: W,
    written: usize,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, written: 0 }
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        let index = self.written;
        writeln!(self.inner, "{}", record.to_line())
            .map_err(|source| Error::MetricsIo { index, source })?;
        self.written += 1;
        Ok(())
    }

    /// Flushes at a step boundary.
    pub fn flush(&mut self) -> Result<()> {
        let index = self.written;
        self.inner
            .flush()
            .map_err(|source| Error::MetricsIo { index, source })
    }

    pub fn records_written(&self) -> usize {
        self.written
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Parsed record: the flat JSON object.
pub type ParsedRecord = Map<String, Json>;

pub fn parse_stream(text: &str) -> Result<Vec<ParsedRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match serde_json::from_str::<Json>(l) {
            Ok(Json::Object(m)) if m.get("tag").is_some_and(Json::is_string) => Ok(m),
            Ok(_) => Err(Error::ConfigParse {
                line: i + 1,
                message: "record is not a tagged object".into(),
            }),
            Err(e) => Err(Error::ConfigParse {
                line: i + 1,
                message: e.to_string(),
            }),
        })
        .collect()
}

pub fn tag_of(r: &ParsedRecord) -> &str {
    r.get("tag").and_then(Json::as_str).unwrap_or("")
}

/// Reads a real field, accepting the non-finite string encodings.
pub fn real_field(r: &ParsedRecord, key: &str) -> Option<f64> {
    match r.get(key)? {
        Json::Number(n) => n.as_f64(),
        Json::String(s) => match s.as_str() {
            "inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            "nan" => Some(f64::NAN),
            _ => None,
        },
        _ => None,
    }
}

pub fn int_field(r: &ParsedRecord, key: &str) -> Option<i64> {
    r.get(key)?.as_i64()
}

pub fn ledger_record(e: &LedgerEntry) -> Record {
    Record::new("ledger")
        .with("step", e.step)
        .with("sync_cost", e.sync_cost)
        .with("probe_cost", e.probe_cost)
        .with("audit_cost", e.audit_cost)
        .with("cumulative", e.cumulative)
}

/// Rebuilds ledger entries from the `ledger` records of a stream.
pub fn replay_ledger(records: &[ParsedRecord]) -> Vec<LedgerEntry> {
    records
        .iter()
        .filter(|r| tag_of(r) == "ledger")
        .map(|r| LedgerEntry {
            step: int_field(r, "step").unwrap_or(0) as usize,
            sync_cost: real_field(r, "sync_cost").unwrap_or(f64::NAN),
            probe_cost: real_field(r, "probe_cost").unwrap_or(f64::NAN),
            audit_cost: real_field(r, "audit_cost").unwrap_or(f64::NAN),
            cumulative: real_field(r, "cumulative").unwrap_or(f64::NAN),
        })
        .collect()
}

pub fn replay_totals(text: &str) -> Result<LedgerTotals> {
    Ok(summarize(&replay_ledger(&parse_stream(text)?)))
}
