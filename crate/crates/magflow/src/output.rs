//! JSON records and CSV writers.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use magflow_core::flow::OrbitReport;
use magflow_core::loop_space::{FreePeriodLoop, LiftedLoop};
use magflow_core::Vec3;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Nonconvergence,
    Error,
}

#[derive(Clone, Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

/// Top-level JSON document printed by every command.
#[derive(Clone, Debug, Serialize)]
pub struct Envelope {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
    /// CSV files written, relative to the output directory.
    pub artifacts: Vec<String>,
}

/// A discrete loop; `flux` is present for lifted loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub nodes: Vec<[f64; 3]>,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flux: Option<f64>,
}

impl LoopRecord {
    pub fn plain(fpl: &FreePeriodLoop) -> Self {
        LoopRecord { nodes: fpl.nodes().iter().map(|x| x.to_array()).collect(), p: fpl.period(), flux: None }
    }

    pub fn lifted(ll: &LiftedLoop) -> Self {
        LoopRecord { flux: Some(ll.flux), ..Self::plain(&ll.fpl) }
    }

    pub fn to_loop(&self) -> magflow_core::Result<FreePeriodLoop> {
        FreePeriodLoop::new(self.nodes.iter().map(|a| Vec3::from_array(*a)).collect(), self.p)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReportRecord {
    pub gradient_norm: f64,
    pub mean_energy_residual: f64,
    pub closure_residual: f64,
    pub self_intersections: usize,
    pub certified: bool,
}

impl From<&OrbitReport> for ReportRecord {
    fn from(r: &OrbitReport) -> Self {
        ReportRecord {
            gradient_norm: r.gradient_norm,
            mean_energy_residual: r.mean_energy_residual,
            closure_residual: r.closure_residual,
            self_intersections: r.self_intersections,
            certified: r.is_certified(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Collects CSV artifacts under an optional output directory. Without a
/// directory every write is a no-op.
#[derive(Debug)]
pub struct Artifacts {
    dir: Option<PathBuf>,
    written: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: Option<&Path>) -> Result<Self, OutputError> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d).map_err(|source| OutputError::Io { path: d.to_path_buf(), source })?;
        }
        Ok(Artifacts { dir: dir.map(Path::to_path_buf), written: Vec::new() })
    }

    pub fn write<R: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = R>) -> Result<(), OutputError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(name);
        let csv_err = |source| OutputError::Csv { path: path.clone(), source };
        let file = File::create(&path).map_err(|source| OutputError::Io { path: path.clone(), source })?;
        let mut w = csv::Writer::from_writer(file);
        for r in rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|source| OutputError::Io { path: path.clone(), source })?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn into_names(self) -> Vec<String> {
        self.written
    }
}

/// Row of `loops.csv`: one node of a named loop.
#[derive(Serialize)]
pub struct LoopRow<'a> {
    pub name: &'a str,
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub period: f64,
}

pub fn loop_rows<'a>(name: &'a str, fpl: &'a FreePeriodLoop) -> impl Iterator<Item = LoopRow<'a>> + 'a {
    fpl.nodes().iter().enumerate().map(move |(index, x)| LoopRow { name, index, x: x.x, y: x.y, z: x.z, period: fpl.period() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loop_record_round_trip() {
        let c = FreePeriodLoop::latitude(0.3, true, 16, 2.5).unwrap();
        let rec = LoopRecord::plain(&c);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(!json.contains("flux"));
        let back: LoopRecord = serde_json::from_str(&json).unwrap();
        let back = back.to_loop().unwrap();
        assert_eq!(back.period(), 2.5);
        assert!(back.max_displacement(&c) < 1e-15);
    }

    #[test]
    fn artifacts_without_dir_write_nothing() {
        let mut a = Artifacts::new(None).unwrap();
        a.write("x.csv", [(1, 2)]).unwrap();
        assert!(a.into_names().is_empty());
    }
}
