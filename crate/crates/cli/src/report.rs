// SPDX-License-Identifier: MIT OR Apache-2.0

//! TSV output helpers and the run summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use kneuron::Result;

/// Fixed-precision float text; NaN and infinities print as `nan`, `inf`,
/// `-inf`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        // Adding 0.0 turns -0.0 into 0.0; values that round to zero print
        // unsigned.
        let s = format!("{:.6}", x + 0.0);
        if s == "-0.000000" { "0.000000".into() } else { s }
    }
}

/// Writes a header and rows, tab separated.
pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header.join("\t"))?;
    for r in rows {
        debug_assert_eq!(r.len(), header.len());
        writeln!(out, "{}", r.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

/// `section metric value` rows in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    rows: Vec<[String; 3]>,
}

impl Summary {
    pub fn add(&mut self, section: &str, metric: impl Into<String>, value: impl ToString) {
        self.rows.push([section.to_owned(), metric.into(), value.to_string()]);
    }

    pub fn add_num(&mut self, section: &str, metric: impl Into<String>, value: f64) {
        self.add(section, metric, num(value));
    }

    pub fn extend(&mut self, other: Summary) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, section: &str, metric: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r[0] == section && r[1] == metric)
            .map(|r| r[2].as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self.rows.iter().map(|r| r.to_vec()).collect();
        write_tsv(path, &["section", "metric", "value"], &rows)
    }

    /// Prints the rows to standard output.
    pub fn print(&self) {
        for [s, m, v] in &self.rows {
            println!("{s}\t{m}\t{v}");
        }
    }
}
