//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::path::Path;

use crate::error::{read_file, write_file, Error, Result};

/// Interleaved 8-bit pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(img: &Image8) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image8, String> {
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("not a binary PPM/PGM".into()),
    };
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        next_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format!("bad {what}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(format!("only 8-bit samples supported, maxval {maxval}"));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let len = width * height * channels;
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| format!("raster truncated: want {len} bytes"))?
        .to_vec();
    Ok(Image8 {
        width,
        height,
        channels,
        data,
    })
}

pub fn write(path: &Path, img: &Image8) -> Result<()> {
    write_file(path, &encode(img))
}

pub fn read(path: &Path) -> Result<Image8> {
    decode(&read_file(path)?).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// Grayscale image of `values` min-max normalised to 0..=255. A constant
/// field maps to all zeros.
pub fn heatmap(values: &[f64], width: usize, height: usize) -> Image8 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = values
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    Image8 {
        width,
        height,
        channels: 1,
        data,
    }
}
