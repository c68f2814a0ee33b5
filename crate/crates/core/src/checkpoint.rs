//! Binary checkpoint container: a JSON header followed by a flat blob of
//! little-endian `f64` values.
//!
//! Layout:
//!
//! ```text
//! [0..4)   magic  b"FXC1"
//! [4..12)  header length (u64 LE)
//! [..]     header JSON (UTF-8)
//! [..+8)   value count (u64 LE)
//! [..]     values (f64 LE each)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FXC1";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Write a header + f64 blob checkpoint.
pub fn write_checkpoint<H: Serialize>(path: &Path, header: &H, values: &[f64]) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| bad(path, format!("header serialization failed: {e}")))?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    w.write_all(&(values.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(bad(path, "bad magic"));
    }

    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| io_err(path, e))?;
    let header: H = serde_json::from_slice(&header_bytes)
        .map_err(|e| bad(path, format!("header parse failed: {e}")))?;

    r.read_exact(&mut len8).map_err(|e| io_err(path, e))?;
    let count = u64::from_le_bytes(len8) as usize;
    let mut values = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok((header, values))
}
