//! Image loading: binary PPM (P6, maxval 255) and 8-bit RGB PNG.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use attnmap_core::vit::Raster;

pub fn read_image(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"P6") {
        parse_ppm(&bytes).with_context(|| format!("decoding {}", path.display()))
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes).with_context(|| format!("decoding {}", path.display()))
    } else {
        bail!("{}: not a binary PPM (P6) or PNG file", path.display())
    }
}

fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            Ok(Raster::rgb(w as usize, h as usize, rgb.into_raw())?)
        }
        other => bail!("expected 8-bit RGB PNG, got {:?}", other.color()),
    }
}

/// Reads the next header token, skipping whitespace and `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        bail!("truncated PPM header");
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| anyhow!("bad PPM {what}: {:?}", String::from_utf8_lossy(tok)))
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != b"P6" {
        bail!("missing P6 magic");
    }
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        bail!("only 8-bit PPM is supported (maxval {maxval})");
    }
    if width == 0 || height == 0 {
        bail!("PPM has zero extent {width}x{height}");
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        bail!("truncated PPM header");
    }
    pos += 1;
    let need = width * height * 3;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| anyhow!("PPM raster needs {need} bytes, found {}", bytes.len() - pos))?;
    Ok(Raster::rgb(width, height, data.to_vec())?)
}

pub fn ppm_bytes(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.data);
    out
}

pub fn write_ppm(path: &Path, raster: &Raster) -> Result<()> {
    std::fs::write(path, ppm_bytes(raster)).with_context(|| format!("writing {}", path.display()))
}
