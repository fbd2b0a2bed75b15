//! On-disk map dumps.
//!
//! Raw dumps are little-endian f32 in row-major order with a one-line JSON
//! sidecar `{"shape":[..],"method":".."}`. PGM dumps are 16-bit, min-max
//! scaled, and meant for viewing only.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Method;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub method: Method,
}

pub fn raw_f32_bytes<F: Element>(t: &Tensor<F>) -> Vec<u8> {
    t.data()
        .iter()
        .flat_map(|&v| (v.as_f64() as f32).to_le_bytes())
        .collect()
}

/// Writes `path` (raw f32) and `path` with a `.json` extension (sidecar).
pub fn write_raw<F: Element>(path: impl AsRef<Path>, t: &Tensor<F>, method: Method) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, raw_f32_bytes(t))?;
    let sidecar = Sidecar {
        shape: t.shape().to_vec(),
        method,
    };
    let mut line =
        serde_json::to_string(&sidecar).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    line.push('\n');
    std::fs::write(path.with_extension("json"), line)?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<(Tensor<f32>, Method)> {
    let path = path.as_ref();
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)
        .map_err(|e| Error::InvalidArgument(format!("bad sidecar: {e}")))?;
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} is not a whole number of f32",
            path.display()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((Tensor::new(sidecar.shape, data)?, sidecar.method))
}

/// Binary 16-bit PGM of a 2-D map, min-max scaled to 0..=65535. A constant
/// map encodes as all zeros.
pub fn pgm16_bytes<F: Element>(t: &Tensor<F>) -> Result<Vec<u8>> {
    if t.rank() != 2 {
        return Err(Error::invalid(
            "pgm",
            format!("expected a 2-D map, got {:?}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let vals: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut out = Vec::with_capacity(32 + 2 * vals.len());
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for v in vals {
        let level = if range > 0.0 {
            ((v - min) / range * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm16<F: Element>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    std::fs::write(path, pgm16_bytes(t)?)?;
    Ok(())
}
