//! Binary PPM (P6, maxval 255).

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

/// Encode with round-to-nearest quantization; values are clamped to `[0, 1]`.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { offset: self.pos, msg: msg.into() })
    }

    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse() {
            Ok(v) => Ok(v),
            Err(_) => Err(Error::Parse { offset: start, msg: format!("{what} out of range") }),
        }
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return cur.err("missing P6 magic");
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return cur.err("zero image extent");
    }
    if maxval != 255 {
        return cur.err(format!("unsupported maxval {maxval}"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return cur.err("expected single whitespace before raster"),
    }
    let need = width * height * 3;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        cur.pos = bytes.len();
        return cur.err(format!("truncated raster: need {need} bytes, have {}", raster.len()));
    }
    let data = raster[..need].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, data)
}
