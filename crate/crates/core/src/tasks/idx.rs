use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

const MAGIC_LABELS: u32 = 0x0000_0801;
const MAGIC_IMAGES: u32 = 0x0000_0803;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    /// `u8`, one dimension.
    Labels,
    /// `u8`, three dimensions: count x rows x cols.
    Images,
}

/// Decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxData {
    pub kind: IdxKind,
    pub dims: Vec<usize>,
    pub raw: Vec<u8>,
}

impl IdxData {
    pub fn labels(&self) -> Vec<usize> {
        self.raw.iter().map(|&b| b as usize).collect()
    }

    /// Pixel intensities rescaled to `[0, 1]`.
    pub fn pixels(&self) -> Vec<f64> {
        self.raw.iter().map(|&b| b as f64 / 255.0).collect()
    }

    /// Number of items along the first dimension.
    pub fn count(&self) -> usize {
        self.dims[0]
    }

    /// Bytes per item (product of the trailing dimensions).
    pub fn item_len(&self) -> usize {
        self.dims[1..].iter().product()
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or_else(|| Error::Idx {
        offset,
        msg: format!("header truncated: need 4 bytes, {} available", bytes.len().saturating_sub(offset)),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

/// Decodes an uncompressed IDX byte stream.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    let (kind, ndims) = match magic {
        MAGIC_LABELS => (IdxKind::Labels, 1),
        MAGIC_IMAGES => (IdxKind::Images, 3),
        other => {
            return Err(Error::Idx {
                offset: 0,
                msg: format!("bad magic 0x{other:08x}, expected 0x{MAGIC_LABELS:08x} or 0x{MAGIC_IMAGES:08x}"),
            })
        }
    };
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        dims.push(read_u32(bytes, 4 + 4 * i)? as usize);
    }
    let header = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - header;
    if actual != expected {
        let what = if actual < expected { "truncated payload" } else { "trailing bytes after payload" };
        return Err(Error::Idx {
            offset: header,
            msg: format!("{what}: expected {expected} bytes, found {actual}"),
        });
    }
    Ok(IdxData {
        kind,
        dims,
        raw: bytes[header..].to_vec(),
    })
}

/// Reads an IDX file, transparently decompressing gzip input.
pub fn load_idx_file(path: &Path) -> Result<IdxData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        parse_idx(&out)
    } else {
        parse_idx(&bytes)
    }
}
