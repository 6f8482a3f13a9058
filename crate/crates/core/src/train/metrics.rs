use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HsicVariant;
use crate::dataset::Split;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,split,accuracy,ce_loss,hsic_value,beta,lr,variant,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub ce_loss: f64,
    pub hsic_value: f64,
    pub beta: f64,
    pub lr: f64,
    pub variant: HsicVariant,
    pub seed: u64,
}

/// Append-only CSV sink; each [`MetricsWriter::append`] is flushed.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(format!("{}: {other:?}", path.display())),
    }
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        let inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(Self { inner, path })
    }

    pub fn append(&mut self, records: &[MetricsRecord]) -> Result<()> {
        for r in records {
            self.inner.serialize(r).map_err(|e| csv_err(&self.path, e))?;
        }
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
        return Err(Error::format(format!("{}: unexpected metrics header", path.display())));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}
