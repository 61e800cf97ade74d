//! JSONL records plus an aligned text table.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Map, Value};

pub struct Report {
    command: &'static str,
    config: Value,
    columns: Vec<&'static str>,
    records: Vec<Map<String, Value>>,
}

impl Report {
    pub fn new(command: &'static str, config: &impl Serialize, columns: &[&'static str]) -> Self {
        Report {
            command,
            config: serde_json::to_value(config).expect("config serializes"),
            columns: columns.to_vec(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: &impl Serialize) {
        match serde_json::to_value(record).expect("record serializes") {
            Value::Object(m) => self.records.push(m),
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                self.records.push(m);
            }
        }
    }

    /// Writes the JSONL file (if requested) and prints the table to stdout.
    pub fn finish(&self, jsonl: Option<&Path>) -> io::Result<()> {
        if let Some(path) = jsonl {
            let mut out = BufWriter::new(File::create(path)?);
            self.write_jsonl(&mut out)?;
            out.flush()?;
        }
        let stdout = io::stdout();
        let mut out = stdout.lock();
        match self.write_table(&mut out).and_then(|_| out.flush()) {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
            r => r,
        }
    }

    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let header = json!({"kind": "config", "command": self.command, "config": self.config});
        writeln!(out, "{header}")?;
        for r in &self.records {
            let mut line = Map::new();
            line.insert("kind".into(), Value::from("record"));
            line.extend(r.clone());
            writeln!(out, "{}", Value::Object(line))?;
        }
        Ok(())
    }

    pub fn write_table<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "# {}", self.command)?;
        writeln!(out, "# config {}", self.config)?;
        let cells: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| self.columns.iter().map(|c| cell(r.get(*c))).collect())
            .collect();
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| {
                cells
                    .iter()
                    .map(|row| row[i].len())
                    .max()
                    .unwrap_or(0)
                    .max(c.len())
            })
            .collect();
        let line = |vals: &[String]| {
            vals.iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let header: Vec<String> = self.columns.iter().map(|c| c.to_string()).collect();
        writeln!(out, "{}", line(&header))?;
        for row in &cells {
            writeln!(out, "{}", line(row))?;
        }
        Ok(())
    }
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => "-".into(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:.4}"),
            _ => n.to_string(),
        },
        Some(Value::Array(a)) => a
            .iter()
            .map(|x| cell(Some(x)))
            .collect::<Vec<_>>()
            .join(","),
        Some(other) => other.to_string(),
    }
}
