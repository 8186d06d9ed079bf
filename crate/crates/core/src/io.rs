//! Output files: raw little-endian `f64` arrays with JSON sidecars, and CSV
//! tables that open with a provenance comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::TimeGrid;

pub const TOOL: &str = "spde-control";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Run identity stamped into every output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub name: String,
    pub dtype: String,
    /// Always `row-major`: the last axis varies fastest.
    pub layout: String,
    pub shape: Vec<usize>,
    pub axes: Vec<String>,
    pub seed: u64,
    pub horizon: f64,
    pub n_steps: usize,
    pub dt: f64,
}

fn bin_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

fn json_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

/// Writes `name.bin` and `name.json` into `dir`.
pub fn write_array(
    dir: &Path,
    name: &str,
    data: &ArrayD<f64>,
    axes: &[&str],
    grid: &TimeGrid,
    prov: &Provenance,
) -> Result<()> {
    if axes.len() != data.ndim() {
        return Err(Error::DimensionMismatch {
            what: "axis labels",
            expected: data.ndim(),
            got: axes.len(),
        });
    }
    let mut bytes = Vec::with_capacity(8 * data.len());
    // `iter` visits elements in logical row-major order for any strides.
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin_path(dir, name), bytes)?;
    let side = Sidecar {
        tool: TOOL.into(),
        version: VERSION.into(),
        config_hash: prov.config_hash.clone(),
        name: name.into(),
        dtype: "f64-le".into(),
        layout: "row-major".into(),
        shape: data.shape().to_vec(),
        axes: axes.iter().map(|s| s.to_string()).collect(),
        seed: prov.seed,
        horizon: grid.horizon,
        n_steps: grid.n_steps,
        dt: grid.dt(),
    };
    write_json(&json_path(dir, name), &side)
}

pub fn read_array(dir: &Path, name: &str) -> Result<(ArrayD<f64>, Sidecar)> {
    let side: Sidecar = serde_json::from_slice(&fs::read(json_path(dir, name))?)
        .map_err(|e| Error::Io(format!("{name}.json: {e}")))?;
    let bytes = fs::read(bin_path(dir, name))?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != 8 * n {
        return Err(Error::Io(format!(
            "{name}.bin holds {} bytes, sidecar shape needs {}",
            bytes.len(),
            8 * n
        )));
    }
    let vals = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&side.shape), vals)
        .map_err(|e| Error::Io(e.to_string()))?;
    Ok((arr, side))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Accumulates a CSV table in memory.
pub struct Csv {
    buf: String,
    width: usize,
}

impl Csv {
    pub fn new(columns: &[&str], prov: &Provenance) -> Self {
        let mut buf = format!(
            "# tool={TOOL} version={VERSION} config_hash={} seed={}\n",
            prov.config_hash, prov.seed
        );
        buf.push_str(&columns.join(","));
        buf.push('\n');
        Self {
            buf,
            width: columns.len(),
        }
    }

    /// `lead` holds integer columns written before the float columns.
    pub fn row(&mut self, lead: &[usize], vals: &[f64]) {
        debug_assert_eq!(lead.len() + vals.len(), self.width);
        let mut first = true;
        for i in lead {
            if !first {
                self.buf.push(',');
            }
            first = false;
            write!(self.buf, "{i}").expect("string write");
        }
        for v in vals {
            if !first {
                self.buf.push(',');
            }
            first = false;
            write!(self.buf, "{v:e}").expect("string write");
        }
        self.buf.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.buf)?;
        Ok(())
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }
}
