//! Binary PPM (P6) and PGM (P5) reading and writing.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ImageError {
    fn bad(path: &Path, reason: impl Into<String>) -> Self {
        ImageError::Malformed {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        ImageError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// 8-bit image, interleaved row-major; `channels` is 1 (gray) or 3 (RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Option<Self> {
        if width == 0
            || height == 0
            || pixels.len() != width * height * channels
            || !(channels == 1 || channels == 3)
        {
            return None;
        }
        Some(RasterImage {
            width,
            height,
            channels,
            pixels,
        })
    }
}

/// Parse a binary netpbm file; accepts P5 (gray) and P6 (RGB) with maxval 255.
pub fn read_netpbm(path: &Path) -> Result<RasterImage, ImageError> {
    let bytes = fs::read(path).map_err(|e| ImageError::io(path, e))?;
    parse_netpbm(&bytes).map_err(|reason| ImageError::bad(path, reason))
}

fn parse_netpbm(bytes: &[u8]) -> Result<RasterImage, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary P5/P6 netpbm file".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = next_header_int(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(format!(
            "payload holds {} bytes, {expected} expected",
            payload.len()
        ));
    }
    RasterImage::new(width, height, channels, payload[..expected].to_vec())
        .ok_or_else(|| "zero-sized image".into())
}

fn next_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize, String> {
    // skip whitespace and `#` comments
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err("expected integer in header".into());
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| "bad integer in header".into())
}

/// Write a binary PGM (P5); the header is exactly `P5\n{w} {h}\n255\n`.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<(), ImageError> {
    if gray.len() != width * height {
        return Err(ImageError::bad(
            path,
            format!("{} bytes for {width}x{height}", gray.len()),
        ));
    }
    write_binary(path, b"P5", width, height, gray)
}

/// Write a binary PPM (P6); the header is exactly `P6\n{w} {h}\n255\n`.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), ImageError> {
    if rgb.len() != width * height * 3 {
        return Err(ImageError::bad(
            path,
            format!("{} bytes for {width}x{height} RGB", rgb.len()),
        ));
    }
    write_binary(path, b"P6", width, height, rgb)
}

fn write_binary(
    path: &Path,
    magic: &[u8],
    width: usize,
    height: usize,
    payload: &[u8],
) -> Result<(), ImageError> {
    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend_from_slice(magic);
    write!(out, "\n{width} {height}\n255\n").expect("write to vec");
    out.extend_from_slice(payload);
    fs::write(path, out).map_err(|e| ImageError::io(path, e))
}
