//! Deterministic CSV artifacts.
//!
//! Every file is assembled fully in memory and lands via a same-directory
//! rename, so a run never leaves a partially written artifact behind.
//! Floats use Rust's shortest round-trip formatting with `.` as the decimal
//! separator and lowercase `nan`/`inf`, which makes reruns byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub struct Csv {
    name: &'static str,
    comments: Vec<String>,
    header: &'static str,
    columns: usize,
    body: String,
    rows: usize,
}

impl Csv {
    pub fn new(name: &'static str, header: &'static str) -> Self {
        Csv {
            name,
            comments: Vec::new(),
            header,
            columns: header.split(',').count(),
            body: String::new(),
            rows: 0,
        }
    }

    /// Adds a `# ...` line above the header. Readers that honor comment
    /// lines (including `--self-check`) skip them.
    pub fn comment(mut self, text: &str) -> Self {
        self.comments.push(format!("# {text}"));
        self
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(
            fields.len(),
            self.columns,
            "{}.csv row arity does not match its header",
            self.name
        );
        let _ = writeln!(self.body, "{}", fields.join(","));
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Writes `<dir>/<name>.csv` in one shot and returns the path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut text = String::new();
        for line in &self.comments {
            let _ = writeln!(text, "{line}");
        }
        let _ = writeln!(text, "{}", self.header);
        text.push_str(&self.body);
        let path = dir.join(format!("{}.csv", self.name));
        let tmp = dir.join(format!("{}.csv.tmp", self.name));
        std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path)
            .with_context(|| format!("moving {} into place", path.display()))?;
        Ok(path)
    }
}

/// Shortest round-trip decimal with CSV spellings for the specials.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

/// Re-parses written artifacts: header present, every record matching the
/// header's arity, and every column except the named categorical ones
/// parsing as a float. Returns the number of files checked.
pub fn self_check(paths: &[PathBuf]) -> Result<usize> {
    for path in paths {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .with_context(|| format!("reopening {}", path.display()))?;
        let headers = reader.headers()?.clone();
        if headers.is_empty() || headers.iter().any(|h| h.trim().is_empty()) {
            bail!("{}: missing or blank header", path.display());
        }
        let mut rows = 0usize;
        for record in reader.records() {
            let record = record.with_context(|| format!("reading {}", path.display()))?;
            if record.len() != headers.len() {
                bail!(
                    "{}: row {} has {} fields, header has {}",
                    path.display(),
                    rows + 1,
                    record.len(),
                    headers.len()
                );
            }
            for (name, field) in headers.iter().zip(record.iter()) {
                if numeric_column(name) && field.parse::<f64>().is_err() {
                    bail!(
                        "{}: column {name} holds non-numeric value {field:?}",
                        path.display()
                    );
                }
            }
            rows += 1;
        }
        if rows == 0 {
            bail!("{}: no data rows", path.display());
        }
    }
    Ok(paths.len())
}

fn numeric_column(name: &str) -> bool {
    !matches!(name, "init" | "quantity" | "kind")
}
