//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("malformed header at byte {offset}: {detail}")]
    Header { offset: usize, detail: String },
    #[error("unsupported maxval {value} at byte {offset} (only 255)")]
    Maxval { offset: usize, value: u64 },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// A decoded 8-bit raster, interleaved channels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn header(&self, detail: impl Into<String>) -> NetpbmError {
        NetpbmError::Header {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<(usize, u64), NetpbmError> {
        self.skip_space();
        let start = self.pos;
        let mut v: u64 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add(u64::from(b - b'0')))
                .ok_or_else(|| self.header(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.header(format!("expected {what}")));
        }
        Ok((start, v))
    }
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Raster, NetpbmError> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(c.header(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    c.pos = 2;
    let (_, width) = c.number("width")?;
    let (_, height) = c.number("height")?;
    let (at, maxval) = c.number("maxval")?;
    if maxval != 255 {
        return Err(NetpbmError::Maxval {
            offset: at,
            value: maxval,
        });
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.header("expected a single whitespace byte before the payload")),
    }
    if width == 0 || height == 0 {
        return Err(c.header("zero image dimension"));
    }
    let expected = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| c.header("image dimensions overflow"))?;
    let found = bytes.len() - c.pos;
    if found < expected {
        return Err(NetpbmError::Truncated {
            offset: bytes.len(),
            expected,
            found,
        });
    }
    Ok(Raster {
        width: width as usize,
        height: height as usize,
        channels,
        data: bytes[c.pos..c.pos + expected].to_vec(),
    })
}

fn encode(magic: &str, r: &Raster) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Raster, NetpbmError> {
    decode(bytes, b"P6", 3)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Raster, NetpbmError> {
    decode(bytes, b"P5", 1)
}

pub fn encode_ppm(r: &Raster) -> Vec<u8> {
    encode("P6", r)
}

pub fn encode_pgm(r: &Raster) -> Vec<u8> {
    encode("P5", r)
}

/// `[3, H, W]` image in `[0, 1]` from interleaved RGB bytes.
pub fn raster_to_image(r: &Raster) -> Tensor<f32> {
    let hw = r.width * r.height;
    let mut data = vec![0f32; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = f32::from(r.data[p * 3 + ch]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, r.height, r.width], data).expect("shape matches")
}

/// Inverse of [`raster_to_image`]; values are clamped and rounded.
pub fn image_to_raster(image: &Tensor<f32>) -> Result<Raster, NetpbmError> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => {
            return Err(NetpbmError::Invalid(format!(
                "expected a [3, H, W] image, got {s:?}"
            )))
        }
    };
    let hw = h * w;
    let src = image.data();
    let mut data = vec![0u8; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[p * 3 + ch] = to_byte(src[ch * hw + p]);
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: 3,
        data,
    })
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>, NetpbmError> {
    Ok(raster_to_image(&decode_ppm(&fs::read(path)?)?))
}

pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<(), NetpbmError> {
    fs::write(path, encode_ppm(&image_to_raster(image)?))?;
    Ok(())
}

/// Label map and its `(height, width)`.
pub fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize), NetpbmError> {
    let r = decode_pgm(&fs::read(path)?)?;
    Ok((r.data, r.height, r.width))
}

pub fn save_mask(path: &Path, mask: &[u8], height: usize, width: usize) -> Result<(), NetpbmError> {
    if mask.len() != height * width {
        return Err(NetpbmError::Invalid(format!(
            "mask has {} values for {height}x{width}",
            mask.len()
        )));
    }
    let r = Raster {
        width,
        height,
        channels: 1,
        data: mask.to_vec(),
    };
    fs::write(path, encode_pgm(&r))?;
    Ok(())
}
