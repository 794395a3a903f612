//! Binary tensor block format and checksum helpers.
//!
//! A block is `"RKTN"`, a little-endian u32 rank, one u64 extent per axis,
//! then the row-major payload as little-endian f64. Round-trips are
//! bit-exact; NaN and infinity are rejected on both write and read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RKTN";

/// Writes one tensor block into `w`.
pub fn write_block(w: &mut impl Write, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    debug_assert!(data.iter().all(|v| v.is_finite()));
    w.write_all(MAGIC)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor block from `r`. `path` is only used for error messages.
pub fn read_block(r: &mut impl Read, path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(path, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
        let e = u64::from_le_bytes(u64buf);
        if e == 0 || e > (1 << 32) {
            return Err(Error::format(path, format!("implausible extent {e}")));
        }
        shape.push(e as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
        let v = f64::from_le_bytes(u64buf);
        if !v.is_finite() {
            return Err(Error::format(path, "non-finite value in payload"));
        }
        data.push(v);
    }
    Ok((shape, data))
}

/// Writes a tensor block as its own file.
pub fn write_tensor(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_block(&mut w, shape, data).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a tensor block file, requiring the file to end with the block.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let out = read_block(&mut r, path)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(out),
        Ok(_) => Err(Error::format(path, "trailing bytes after tensor block")),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write as _;
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut file, &mut h).map_err(|e| Error::io(path, e))?;
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write as _;
        let _ = write!(out, "{b:02x}");
    }
    Ok(out)
}
