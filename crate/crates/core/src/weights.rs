//! CMAF tensor container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    b"CMAF"
//! version  u32 (= 1)
//! count    u32
//! count x { ndim u32, dims u32 x ndim, data f32 x product(dims) }
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMAF";
pub const VERSION: u32 = 1;

/// Upper bound on tensor rank accepted by the decoder.
const MAX_NDIM: u32 = 8;

pub fn encode(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_from(tensors.len())?.to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&u32_from(t.shape().len())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_from(d)?.to_le_bytes());
        }
        for &v in t.data() {
            let narrowed = v as f32;
            if !narrowed.is_finite() {
                return Err(Error::Format(format!("value {v} does not fit in f32")));
            }
            out.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_from(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic, expected \"CMAF\"".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    // Each tensor needs at least ndim + one dim + one value.
    if count > r.remaining() / 12 {
        return Err(Error::Format(format!(
            "tensor count {count} exceeds file size"
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for index in 0..count {
        let ndim = r.u32()?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::Format(format!(
                "tensor {index}: rank {ndim} outside 1..={MAX_NDIM}"
            )));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::Format(format!("tensor {index}: zero dimension")));
            }
            dims.push(d);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= r.remaining() / 4)
            .ok_or_else(|| Error::Format(format!("tensor {index}: data truncated")))?;
        let raw = r.take(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| Error::Format(format!("tensor {index}: {e}")))?;
        tensors.push(tensor);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            r.remaining()
        )));
    }
    Ok(tensors)
}

/// Rounds every entry through `f32`, matching what a save/load cycle does.
pub fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("quantizing keeps shape and finiteness")
}
