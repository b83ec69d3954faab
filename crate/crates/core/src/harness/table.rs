//! CSV output: header row, `.` decimal point, LF line endings.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use csv::{Terminator, WriterBuilder};

use crate::error::{Error, Result};
use crate::trainer::CycleRecord;

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("csv: {other:?}")),
    }
}

/// A header and string rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
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

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut out = WriterBuilder::new().terminator(Terminator::Any(b'\n')).from_writer(w);
        out.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            out.write_record(row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(csv_err))
            .collect::<Result<Vec<_>>>()?;
        Ok(Table { header, rows })
    }
}

/// Metrics table of a training run: losses, EMA-generator metrics,
/// annotated class fractions and the effective class distribution per cycle.
pub fn metrics_table(history: &[CycleRecord], classes: usize) -> Table {
    let mut header: Vec<String> = ["cycle", "iter", "loss_d", "loss_g", "loss_reg", "kl_uniform", "frechet"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..classes).map(|k| format!("frac_{k}")));
    header.extend((0..classes).map(|k| format!("N_{k}")));
    let mut t = Table::new(header);
    for r in history {
        let mut row = vec![
            r.cycle.to_string(),
            r.iter.to_string(),
            fmt_f64(r.loss_d),
            fmt_f64(r.loss_g),
            fmt_f64(r.loss_reg),
            fmt_f64(r.metrics.kl_uniform),
            fmt_f64(r.metrics.frechet),
        ];
        row.extend(r.metrics.class_fracs.iter().map(|v| fmt_f64(*v)));
        row.extend(r.n_dist.iter().map(|v| fmt_f64(*v)));
        t.push(row);
    }
    t
}
