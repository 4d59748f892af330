//! Binary portable pixmaps (P6, 8-bit RGB).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub fn encode(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::Input(format!(
            "a pixmap holds 3 channels, the image has {}",
            image.channels
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    Ok(out)
}

/// Next whitespace-separated header field, skipping `#` comments.
fn field(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let bad = |m: &str| Error::Input(format!("malformed pixmap: {m}"));
    if field(bytes, &mut pos).as_deref() != Some("P6") {
        return Err(bad("missing P6 magic"));
    }
    let mut num = |what: &str| -> Result<usize> {
        field(bytes, &mut pos)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maximum value")?;
    if maxval != 255 {
        return Err(bad("only 8-bit pixmaps are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width * height * 3;
    if bytes.len() < start + len {
        return Err(bad("truncated raster"));
    }
    Image::from_pixels(height, width, 3, bytes[start..start + len].to_vec())
}

pub fn write(image: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Image> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
