//! Binary 8-bit PPM (`P6`) and PGM (`P5`).

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 3 for PPM, 1 for PGM.
    pub channels: usize,
    /// Interleaved, row-major.
    pub data: Vec<u8>,
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Pnm> {
    let bad = |msg: &str| Error::format(path, msg);
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad("not a binary PPM/PGM (expected P6 or P5)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("only 8-bit files are supported, maxval is {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header"));
    }
    pos += 1;
    let need = width * height * channels;
    let data = bytes.get(pos..pos + need).ok_or_else(|| {
        bad(&format!("truncated pixel data: need {need} bytes, have {}", bytes.len().saturating_sub(pos)))
    })?;
    Ok(Pnm {
        width,
        height,
        channels,
        data: data.to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write(path: &Path, img: &Pnm) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment() {
        let p = Path::new("x.ppm");
        let img = decode(p, b"P6\n# made by hand\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 3));
        assert_eq!(decode(p, &encode(&img)).unwrap(), img);
    }

    #[test]
    fn malformed_inputs_are_errors() {
        let p = Path::new("x.pgm");
        for bytes in [&b"P3\n1 1\n255\n0"[..], b"P5\n2 2\n255\n\x00", b"P5\n2", b"P5\n1 1\n65535\n\x00\x00", b""] {
            assert!(matches!(decode(p, bytes), Err(Error::Format { .. })), "{bytes:?}");
        }
    }
}
