//! Edge-list rows and their CSV files.
//!
//! CSV schema: header `ts,src,sink,rssi`; `ts` in UNIX seconds, ids as
//! lowercase hyphenated UUIDs, `rssi` in signed dBm.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeRow {
    pub ts: u64,
    pub src: DeviceId,
    pub sink: DeviceId,
    pub rssi: i8,
}

#[derive(Debug, Error)]
pub enum EdgeFileError {
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn write_csv<W: Write>(out: W, rows: &[EdgeRow]) -> Result<(), EdgeFileError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<EdgeRow>, EdgeFileError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

pub fn read_csv_file(path: &Path) -> Result<Vec<EdgeRow>, EdgeFileError> {
    let file = fs::File::open(path).map_err(|source| EdgeFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(std::io::BufReader::new(file))
}

/// Anything that can hand out the edge rows falling in `[start, end)`.
pub trait EdgeSource: Send + Sync {
    fn rows_in(&self, start: u64, end: u64) -> Result<Vec<EdgeRow>, EdgeFileError>;
}

impl EdgeSource for Vec<EdgeRow> {
    fn rows_in(&self, start: u64, end: u64) -> Result<Vec<EdgeRow>, EdgeFileError> {
        Ok(self.iter().filter(|r| r.ts >= start && r.ts < end).copied().collect())
    }
}

/// Every `*.csv` file in a directory (the preprocessing output directory).
#[derive(Debug, Clone)]
pub struct CsvEdgeDir(pub PathBuf);

impl EdgeSource for CsvEdgeDir {
    fn rows_in(&self, start: u64, end: u64) -> Result<Vec<EdgeRow>, EdgeFileError> {
        let entries = match fs::read_dir(&self.0) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => {
                return Err(EdgeFileError::Io {
                    path: self.0.clone(),
                    source,
                })
            }
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        let mut rows = Vec::new();
        for p in paths {
            rows.extend(read_csv_file(&p)?.into_iter().filter(|r| r.ts >= start && r.ts < end));
        }
        rows.sort();
        rows.dedup();
        Ok(rows)
    }
}
