//! Artifact staging: everything is written to temporary files in the output
//! directory first and only renamed into place once all of them succeeded.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use enkf_mc::linalg::DenseMatrix;
use tempfile::NamedTempFile;

#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        self.files.push((name.into(), contents.into()));
    }

    pub fn add_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).context("serializing JSON summary")?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }

    /// Writes every artifact into `dir`, or none of them.
    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let mut tmp = NamedTempFile::new_in(dir)
                .with_context(|| format!("cannot write to output directory {}", dir.display()))?;
            tmp.write_all(bytes)
                .and_then(|_| tmp.as_file().sync_all())
                .with_context(|| format!("writing {name}"))?;
            staged.push((tmp, dir.join(name)));
        }
        let mut written = Vec::with_capacity(staged.len());
        for (tmp, target) in staged {
            tmp.persist(&target)
                .with_context(|| format!("moving {} into place", target.display()))?;
            written.push(target);
        }
        Ok(written)
    }
}

/// One CSV row per matrix row, no header.
pub fn matrix_to_csv(m: &DenseMatrix) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    Ok(w.into_inner().context("flushing CSV")?)
}

pub fn read_matrix_csv(path: &Path) -> Result<DenseMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, field)| {
                field.parse::<f64>().with_context(|| {
                    format!("{}: row {}, column {}: `{field}` is not a number", path.display(), i + 1, j + 1)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        anyhow::bail!("{}: empty matrix", path.display());
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        anyhow::bail!("{}: row {} has {} columns, expected {ncols}", path.display(), i + 1, rows[i].len());
    }
    Ok(DenseMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}
