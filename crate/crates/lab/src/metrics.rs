//! Append-only metrics log.
//!
//! The file starts with one `#` comment line naming the run (algorithm,
//! variant, seed), then a CSV header:
//!
//! `actor_update,ratio_loss,critic_loss,entropy,grad_norm,z_w,mc_eval_mean,mc_eval_std`
//!
//! Row 0 is the warm start. Missing values are empty fields. Reals are
//! written as shortest round-trip decimals.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use opposd_core::actor::MetricsRow;

use crate::error::{LabError, LabResult};

pub const COLUMNS: [&str; 8] = [
    "actor_update",
    "ratio_loss",
    "critic_loss",
    "entropy",
    "grad_norm",
    "z_w",
    "mc_eval_mean",
    "mc_eval_std",
];

pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsWriter {
    /// Creates a new file; an existing one is an error.
    pub fn create(path: &Path, comment: &str) -> LabResult<Self> {
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(LabError::io(path))?;
        writeln!(file, "# {comment}").map_err(LabError::io(path))?;
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(COLUMNS).map_err(|e| csv_err(path, e))?;
        inner.flush().map_err(LabError::io(path))?;
        Ok(MetricsWriter { path: path.into(), inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> LabResult<()> {
        let fields = [
            row.actor_update.to_string(),
            opt(row.ratio_loss),
            opt(row.critic_loss),
            opt(row.entropy),
            opt(row.grad_norm),
            opt(row.z_w),
            opt(row.eval_mean),
            opt(row.eval_std),
        ];
        self.inner.write_record(&fields).map_err(|e| csv_err(&self.path, e))?;
        self.inner.flush().map_err(LabError::io(&self.path))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    LabError::format(path, e.to_string())
}

fn parse_opt(path: &Path, field: &str) -> LabResult<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| LabError::format(path, format!("bad number `{field}`")))
}

/// Reads a metrics file back; returns the comment line and the rows.
pub fn read_metrics(path: &Path) -> LabResult<(String, Vec<MetricsRow>)> {
    let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let comment = first
        .strip_prefix("# ")
        .ok_or_else(|| LabError::format(path, "missing run comment line"))?
        .to_string();
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let header = reader.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(COLUMNS) {
        return Err(LabError::format(path, "unexpected metrics header"));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let f = |i: usize| parse_opt(path, &rec[i]);
        rows.push(MetricsRow {
            actor_update: rec[0]
                .parse()
                .map_err(|_| LabError::format(path, format!("bad update index `{}`", &rec[0])))?,
            ratio_loss: f(1)?,
            critic_loss: f(2)?,
            entropy: f(3)?,
            grad_norm: f(4)?,
            z_w: f(5)?,
            eval_mean: f(6)?,
            eval_std: f(7)?,
        });
    }
    Ok((comment, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_no_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricsRow::default(),
            MetricsRow {
                actor_update: 1,
                ratio_loss: Some(0.1 + 0.2),
                critic_loss: Some(-1e-300),
                entropy: Some(0.6931471805599453),
                grad_norm: Some(3.0),
                z_w: Some(1.0),
                eval_mean: None,
                eval_std: None,
            },
        ];
        let mut w = MetricsWriter::create(&path, "algorithm=off_pac").unwrap();
        for r in &rows {
            w.write(r).unwrap();
        }
        drop(w);
        let (comment, back) = read_metrics(&path).unwrap();
        assert_eq!(comment, "algorithm=off_pac");
        assert_eq!(back, rows);
        assert!(MetricsWriter::create(&path, "x").is_err());
    }
}
