//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `1×H×W` tensor as P5 or a `3×H×W` tensor as P6. Values are
/// clamped to `[0, 1]` and rounded to the nearest of 256 levels.
pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3("encode_pnm")?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape("encode_pnm", format!("need 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = t.data();
    let plane = h * w;
    out.reserve(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Decode P5/P6 into a `1×H×W` or `3×H×W` tensor with values in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.err("expected magic P5 or P6")),
    };
    cur.pos = 2;
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    cur.skip_separators();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("maxval {maxval} unsupported, need 255"),
        });
    }
    if w == 0 || h == 0 {
        return Err(cur.err("zero image dimension"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace before pixel data")),
    }
    let plane = h * w;
    let need = channels * plane;
    let body = &bytes[cur.pos..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated body: {} of {need} bytes", body.len()),
        });
    }
    if body.len() > need {
        return Err(Error::Parse {
            offset: cur.pos + need,
            msg: format!("{} trailing bytes after pixel data", body.len() - need),
        });
    }
    let mut data = vec![0.0; need];
    for i in 0..plane {
        for ch in 0..channels {
            data[ch * plane + i] = f64::from(body[i * channels + ch]) / 255.0;
        }
    }
    Tensor::new(&[channels, h, w], data)
}

pub fn write_pnm(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_pnm(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}
