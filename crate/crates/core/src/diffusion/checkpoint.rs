//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PIUCKPT1"
//! u32 block count
//! u32 matrix count
//! per matrix: u32 name length, name bytes (UTF-8), u32 rows, u32 cols
//! per matrix, in manifest order: rows * cols f64 values, row-major
//! ```

use crate::error::{PiuError, Result};
use crate::linalg::Mat;

use super::denoiser::DenoiserParams;

pub const MAGIC: &[u8; 8] = b"PIUCKPT1";

pub fn to_bytes(params: &DenoiserParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.dims().blocks as u32).to_le_bytes());
    out.extend_from_slice(&(params.mats().len() as u32).to_le_bytes());
    for (name, m) in params.names().iter().zip(params.mats()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    }
    for m in params.mats() {
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| PiuError::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<DenoiserParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(PiuError::Format("bad checkpoint magic".into()));
    }
    let blocks = r.u32()?;
    let count = r.u32()?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| PiuError::Format("matrix name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()?;
        let cols = r.u32()?;
        manifest.push((name, rows, cols));
    }
    let mut named = Vec::with_capacity(count);
    for (name, rows, cols) in manifest {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| PiuError::Format("matrix too large".into()))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| PiuError::Format("matrix too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.push((name, Mat::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(PiuError::Format("trailing bytes after checkpoint".into()));
    }
    let params = DenoiserParams::from_named(named).map_err(|e| PiuError::Format(e.to_string()))?;
    if params.dims().blocks != blocks {
        return Err(PiuError::Format(
            "block count disagrees with manifest".into(),
        ));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserSpec;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = DenoiserParams::init(
            &DenoiserSpec {
                tokens: 2,
                width: 4,
                blocks: 3,
                ff_hidden: 5,
                init_seed: 8,
            },
            6,
            3,
        )
        .unwrap();
        p.mats_mut()[0].data[0] = -0.0;
        p.mats_mut()[1].data[0] = f64::MIN_POSITIVE / 3.0;
        let bytes = to_bytes(&p);
        assert_eq!(&bytes[..8], MAGIC);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(
            back.flatten()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = DenoiserParams::init(
            &DenoiserSpec {
                tokens: 1,
                width: 2,
                blocks: 1,
                ff_hidden: 2,
                init_seed: 0,
            },
            2,
            2,
        )
        .unwrap();
        let bytes = to_bytes(&p);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }
}
