//! Raw tensor files: magic `CVTN`, `u32` version, `u8` rank, `u32` dims,
//! `u8` dtype (0 = f32, 1 = u8), then the little-endian payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVTN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum CvtnData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cvtn {
    pub shape: Vec<usize>,
    pub data: CvtnData,
}

impl Cvtn {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Cvtn {
            shape,
            data: CvtnData::F32(data),
        }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Cvtn {
            shape,
            data: CvtnData::U8(data),
        }
    }

    /// Values widened to `f64`.
    pub fn values(&self) -> Vec<f64> {
        match &self.data {
            CvtnData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            CvtnData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

pub fn encode(t: &Cvtn) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &t.data {
        CvtnData::F32(v) => {
            out.push(0);
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        CvtnData::U8(v) => {
            out.push(1);
            out.extend_from_slice(v);
        }
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Cvtn> {
    let bad = |msg: String| Error::format(path, msg);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(&MAGIC[..]) {
        return Err(bad("missing CVTN magic".into()));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported CVTN version {version}")));
    }
    let rank = r.take(1).ok_or_else(|| bad("truncated header".into()))?[0] as usize;
    let shape = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("truncated dims".into()))?;
    let n: usize = shape.iter().product();
    let dtype = r.take(1).ok_or_else(|| bad("truncated header".into()))?[0];
    let data = match dtype {
        0 => {
            let raw = r.take(4 * n).ok_or_else(|| bad(format!("truncated payload: need {n} f32 values")))?;
            CvtnData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        1 => CvtnData::U8(r.take(n).ok_or_else(|| bad(format!("truncated payload: need {n} bytes")))?.to_vec()),
        d => return Err(bad(format!("unknown dtype code {d}"))),
    };
    Ok(Cvtn { shape, data })
}

pub fn read(path: &Path) -> Result<Cvtn> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

pub fn write(path: &Path, t: &Cvtn) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
