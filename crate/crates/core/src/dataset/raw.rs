//! `SMP1` raw binary pair files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"SMP1" | u32 count | u32 height | u32 width
//! count x ( height*width f32 (patch a) | height*width f32 (patch b) | u8 label )
//! ```
//!
//! Labels on disk are always match-is-one.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LabelOrientation, PairDataset, Patch, PatchPair};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"SMP1";

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_patch(r: &mut impl Read, height: usize, width: usize, buf: &mut Vec<u8>) -> std::io::Result<Vec<f32>> {
    buf.resize(height * width * 4, 0);
    r.read_exact(buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_raw_binary(path: &Path) -> Result<PairDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = |e: std::io::Error| Error::Format(format!("{}: truncated or unreadable ({e})", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != RAW_MAGIC {
        return Err(Error::Format(format!("{}: bad magic {:?}", path.display(), magic)));
    }
    let count = read_u32(&mut r).map_err(truncated)? as usize;
    let height = read_u32(&mut r).map_err(truncated)? as usize;
    let width = read_u32(&mut r).map_err(truncated)? as usize;
    if height == 0 || width == 0 {
        return Err(Error::Format(format!("{}: zero patch dimension in header", path.display())));
    }

    let mut buf = Vec::new();
    let mut pairs = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let a = read_patch(&mut r, height, width, &mut buf).map_err(truncated)?;
        let b = read_patch(&mut r, height, width, &mut buf).map_err(truncated)?;
        let mut label = [0u8; 1];
        r.read_exact(&mut label).map_err(truncated)?;
        pairs.push(PatchPair::new(Patch::new(height, width, a)?, Patch::new(height, width, b)?, label[0], index)?);
    }
    if r.read(&mut [0u8; 1]).map_err(truncated)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes after {count} pairs", path.display())));
    }
    let split = path.file_stem().and_then(|s| s.to_str()).unwrap_or("raw");
    PairDataset::new(pairs, split, LabelOrientation::MatchIsOne)
}

/// Writes `d` with match-is-one labels, whatever its in-memory orientation.
pub fn write_raw_binary(d: &PairDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (height, width) = d.patch_dims().unwrap_or((0, 0));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(RAW_MAGIC).map_err(io)?;
    for v in [d.len(), height, width] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit the u32 header field")))?;
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for pair in d.pairs() {
        for patch in [&pair.a, &pair.b] {
            for v in patch.pixels() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.write_all(&[d.orientation().to_canonical(pair.label)]).map_err(io)?;
    }
    w.flush().map_err(io)
}
