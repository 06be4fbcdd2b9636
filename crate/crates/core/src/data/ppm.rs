//! Binary PPM (`P6`, 8-bit) encoding and decoding.

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "ppm", detail: detail.into() }
}

/// Magic number of a netpbm file, if it looks like one.
pub fn magic(bytes: &[u8]) -> Option<&[u8]> {
    (bytes.len() >= 2 && bytes[0] == b'P').then(|| &bytes[..2])
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    if magic(bytes) != Some(b"P6") {
        return Err(bad("not a binary RGB (P6) file"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad header field at byte {start}")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    if maxval != 255 {
        return Err(bad(format!("only maxval 255 is supported, got {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header"));
    }
    pos += 1;
    let len = width * height * 3;
    let data = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(RgbImage { width, height, pixels: data.to_vec() })
}

pub fn encode(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}
