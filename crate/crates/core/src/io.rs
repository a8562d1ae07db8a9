//! On-disk formats: raw little-endian `f64` arrays with a JSON sidecar, and
//! CSV time series.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micro::{MicroState, NoiseLog, Record, WaveSystem};

/// Writes `data` to `path` and `header` to `path` with `.json` appended.
pub fn write_raw<H: Serialize>(path: &Path, data: &[f64], header: &H) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    std::fs::write(sidecar(path), serde_json::to_vec_pretty(header)?)?;
    Ok(())
}

pub fn read_raw<H: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Vec<f64>, H)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Validation(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let header = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
    Ok((data, header))
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub t: f64,
    pub dim: usize,
    pub h: f64,
    pub origin: Vec<f64>,
    /// Nodes per axis of the background grid.
    pub shape: Vec<usize>,
    pub eps: f64,
    /// Node ids of the unknowns, in storage order.
    pub unknown_nodes: Vec<usize>,
    /// Node id carrying each boundary degree of freedom.
    pub boundary_nodes: Vec<usize>,
    /// Field order and lengths: u, v, delta, theta.
    pub fields: Vec<(String, usize)>,
}

pub fn snapshot_name(index: usize) -> String {
    format!("state_{index:04}.bin")
}

pub fn write_snapshot(path: &Path, system: &WaveSystem, state: &MicroState) -> Result<()> {
    let grid = system.grid();
    let header = SnapshotHeader {
        t: state.t,
        dim: grid.dim(),
        h: grid.h(),
        origin: grid.origin()[..grid.dim()].to_vec(),
        shape: grid.shape()[..grid.dim()].to_vec(),
        eps: system.eps(),
        unknown_nodes: grid.unknown_nodes().to_vec(),
        boundary_nodes: system.dofs().dofs().iter().map(|d| d.node).collect(),
        fields: vec![
            ("u".into(), state.u.len()),
            ("v".into(), state.v.len()),
            ("delta".into(), state.delta.len()),
            ("theta".into(), state.theta.len()),
        ],
    };
    let data: Vec<f64> = [&state.u, &state.v, &state.delta, &state.theta]
        .into_iter()
        .flat_map(|f| f.iter().copied())
        .collect();
    write_raw(path, &data, &header)
}

pub fn read_snapshot(path: &Path) -> Result<(MicroState, SnapshotHeader)> {
    let (data, header): (Vec<f64>, SnapshotHeader) = read_raw(path)?;
    let total: usize = header.fields.iter().map(|f| f.1).sum();
    if total != data.len() || header.fields.len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: total,
            actual: data.len(),
        });
    }
    let mut parts = Vec::with_capacity(4);
    let mut at = 0;
    for (_, n) in &header.fields {
        parts.push(data[at..at + n].to_vec());
        at += n;
    }
    let theta = parts.pop().unwrap();
    let delta = parts.pop().unwrap();
    let v = parts.pop().unwrap();
    let u = parts.pop().unwrap();
    Ok((
        MicroState {
            t: header.t,
            u,
            v,
            delta,
            theta,
        },
        header,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLogHeader {
    pub dt: f64,
    pub steps: usize,
    pub modes1: usize,
    pub modes2: usize,
    pub seed: u64,
    /// Per step: `modes1` coefficients of W1, then `modes2` of W2.
    pub layout: String,
}

pub fn write_noise_log(path: &Path, log: &NoiseLog, dt: f64, seed: u64) -> Result<()> {
    let header = NoiseLogHeader {
        dt,
        steps: log.steps(),
        modes1: log.modes1,
        modes2: log.modes2,
        seed,
        layout: "step-major; W1 modes then W2 modes".into(),
    };
    write_raw(path, &log.coefficients, &header)
}

pub fn read_noise_log(path: &Path) -> Result<(NoiseLog, NoiseLogHeader)> {
    let (coefficients, header): (Vec<f64>, NoiseLogHeader) = read_raw(path)?;
    let expected = header.steps * (header.modes1 + header.modes2);
    if coefficients.len() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: coefficients.len(),
        });
    }
    Ok((
        NoiseLog {
            modes1: header.modes1,
            modes2: header.modes2,
            coefficients,
        },
        header,
    ))
}

pub fn write_trajectory_csv(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,energy,pseudo_energy,norm2,u_l2")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.t, r.energy, r.pseudo_energy, r.norm2, r.u_l2
        )?;
    }
    w.flush()?;
    Ok(())
}
