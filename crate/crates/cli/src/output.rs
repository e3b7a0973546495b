use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

pub const SCHEMA: u32 = 1;

pub type Error = Box<dyn std::error::Error>;

#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub schema: u32,
    pub command: &'a str,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(command: &str, body: T, out: Option<&Path>) -> Result<(), Error> {
    let env = Envelope {
        schema: SCHEMA,
        command,
        body,
    };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| format!("{}: {e}", p.display()))?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Fixed 17-significant-digit form so that output is reproducible byte for byte.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn floats(values: impl IntoIterator<Item = f64>) -> Vec<String> {
    values.into_iter().map(fmt_f64).collect()
}
