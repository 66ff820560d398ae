//! Output conventions: machine output is one JSON value per line on stdout,
//! `--human` renders tables instead; errors are a JSON object on stderr.

use std::fmt;

use serde::Serialize;
use serde_json::{json, Map, Value};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INFRA: u8 = 2;
pub const EXIT_PROTOCOL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub exit: u8,
    pub code: String,
    pub detail: String,
    pub extra: Map<String, Value>,
}

impl CliError {
    pub fn new(exit: u8, code: &str, detail: impl fmt::Display) -> Self {
        Self {
            exit,
            code: code.to_string(),
            detail: detail.to_string(),
            extra: Map::new(),
        }
    }

    pub fn usage(detail: impl fmt::Display) -> Self {
        Self::new(EXIT_USAGE, "USAGE", detail)
    }

    pub fn infra(code: &str, detail: impl fmt::Display) -> Self {
        Self::new(EXIT_INFRA, code, detail)
    }

    pub fn protocol(code: &str, detail: impl fmt::Display) -> Self {
        Self::new(EXIT_PROTOCOL, code, detail)
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("error".into(), json!(self.code));
        obj.insert("detail".into(), json!(self.detail));
        obj.extend(self.extra.clone());
        Value::Object(obj)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::infra("IO", e)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Output {
    pub human: bool,
}

impl Output {
    /// One record: an LDJSON line, or `key: value` lines.
    pub fn record<T: Serialize>(&self, value: &T) {
        let value = serde_json::to_value(value).unwrap_or(Value::Null);
        if !self.human {
            println!("{value}");
            return;
        }
        match &value {
            Value::Object(map) => {
                let width = map.keys().map(String::len).max().unwrap_or(0);
                for (k, v) in map {
                    println!("{k:width$}  {}", cell(v));
                }
            }
            Value::Array(rows) => self.table(rows),
            other => println!("{}", cell(other)),
        }
    }

    /// A list: one LDJSON line holding the array, or a table.
    pub fn list<T: Serialize>(&self, items: &[T]) {
        let rows: Vec<Value> = items
            .iter()
            .map(|i| serde_json::to_value(i).unwrap_or(Value::Null))
            .collect();
        if self.human {
            self.table(&rows);
        } else {
            println!("{}", Value::Array(rows));
        }
    }

    /// Several records streamed one per line (or one table row each).
    pub fn lines<T: Serialize>(&self, items: &[T]) {
        if self.human {
            self.list(items);
        } else {
            for i in items {
                self.record(i);
            }
        }
    }

    fn table(&self, rows: &[Value]) {
        if rows.is_empty() {
            println!("(none)");
            return;
        }
        let mut columns: Vec<String> = Vec::new();
        for row in rows {
            if let Value::Object(map) = row {
                for k in map.keys() {
                    if !columns.contains(k) {
                        columns.push(k.clone());
                    }
                }
            }
        }
        if columns.is_empty() {
            for row in rows {
                println!("{}", cell(row));
            }
            return;
        }
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|row| columns.iter().map(|c| row.get(c).map(cell).unwrap_or_default()).collect())
            .collect();
        let widths: Vec<usize> = columns
            .iter()
            .enumerate()
            .map(|(i, c)| cells.iter().map(|r| r[i].chars().count()).chain([c.len()]).max().unwrap_or(0))
            .collect();
        let line = |values: Vec<&str>| {
            let padded: Vec<String> = values.iter().zip(&widths).map(|(v, w)| format!("{v:w$}")).collect();
            println!("{}", padded.join("  ").trim_end());
        };
        line(columns.iter().map(|c| c.to_uppercase()).collect::<Vec<_>>().iter().map(String::as_str).collect());
        for row in &cells {
            line(row.iter().map(String::as_str).collect());
        }
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            items.iter().map(cell).collect::<Vec<_>>().join(",")
        }
        other => other.to_string(),
    }
}

pub fn report_error(e: &CliError) {
    eprintln!("{}", e.to_json());
}
