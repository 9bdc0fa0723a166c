//! File formats: run-length bit masks, JSON helpers, the parameter blob and
//! 16-bit PGM heatmap dumps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major bit matrix stored as alternating run lengths, starting with a
/// (possibly empty) run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub rows: usize,
    pub cols: usize,
    pub runs: Vec<usize>,
}

pub fn rle_encode(rows: usize, cols: usize, bits: impl IntoIterator<Item = bool>) -> Rle {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for bit in bits {
        if bit != current {
            runs.push(len);
            current = bit;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    Rle { rows, cols, runs }
}

pub fn rle_decode(rle: &Rle) -> Result<Vec<bool>> {
    let total = rle
        .rows
        .checked_mul(rle.cols)
        .ok_or_else(|| Error::Format("RLE shape overflows".into()))?;
    let sum: usize = rle.runs.iter().sum();
    if sum != total {
        return Err(Error::Format(format!(
            "RLE runs cover {sum} bits, shape needs {total}"
        )));
    }
    let mut out = Vec::with_capacity(total);
    for (i, &len) in rle.runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, len));
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Magic prefix of a parameter blob.
pub const PARAMS_MAGIC: &[u8; 8] = b"WSPPNET1";

/// Writes `magic | u32 n_dims | u32 dims... | u64 n_values | f64 values...`,
/// all little-endian.
pub fn write_param_blob(path: &Path, dims: &[u32], values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_param_blob(path: &Path) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Format("parameter file is truncated".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != PARAMS_MAGIC {
        return Err(Error::Format("not a parameter file".into()));
    }
    let n_dims = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if n_dims > 64 {
        return Err(Error::Format(format!(
            "implausible header with {n_dims} dims"
        )));
    }
    let dims = (0..n_dims)
        .map(|_| Ok(u32::from_le_bytes(take(4)?.try_into().unwrap())))
        .collect::<Result<Vec<_>>>()?;
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let body = take(
        n.checked_mul(8)
            .ok_or_else(|| Error::Format("parameter count overflows".into()))?,
    )?;
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !take(1).is_err() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok((dims, values))
}

/// Binary 16-bit PGM (big-endian samples), values in `[0, 1]` mapped onto
/// `0..=65535`.
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n65535\n")?;
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}
