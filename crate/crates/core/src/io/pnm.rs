//! Binary PGM (P5) and PPM (P6) heatmap rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Image;
use crate::error::{Error, Result};
use crate::interpret::Heatmap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportMode {
    /// Per-image min-max scaled grayscale.
    Gray,
    /// Blue-white-red over the symmetric range `[-max|v|, max|v|]`.
    Diverging,
}

impl ExportMode {
    pub fn extension(self) -> &'static str {
        match self {
            ExportMode::Gray => "pgm",
            ExportMode::Diverging => "ppm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub bytes: Vec<u8>,
    /// The map had zero range, so no scaling was possible.
    pub degenerate: bool,
}

fn to_byte(x: f64) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn render_gray(map: &Heatmap) -> Rendered {
    let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let degenerate = !(range > 0.0);
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &v in &map.values {
        bytes.push(if degenerate { 0 } else { to_byte((v - min) / range) });
    }
    Rendered { bytes, degenerate }
}

pub fn render_diverging(map: &Heatmap) -> Rendered {
    let m = map.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let degenerate = !(m > 0.0);
    let mut bytes = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &v in &map.values {
        let t = if degenerate { 0.0 } else { v / m };
        let rgb = if t >= 0.0 {
            let fade = to_byte(1.0 - t);
            [255, fade, fade]
        } else {
            let fade = to_byte(1.0 + t);
            [fade, fade, 255]
        };
        bytes.extend_from_slice(&rgb);
    }
    Rendered { bytes, degenerate }
}

pub fn render(map: &Heatmap, mode: ExportMode) -> Rendered {
    match mode {
        ExportMode::Gray => render_gray(map),
        ExportMode::Diverging => render_diverging(map),
    }
}

/// Writes `map` to `path`; returns whether the map was degenerate.
pub fn export_heatmap(map: &Heatmap, path: &Path, mode: ExportMode) -> Result<bool> {
    let r = render(map, mode);
    std::fs::write(path, &r.bytes).map_err(|e| Error::io(path, e))?;
    Ok(r.degenerate)
}

/// Input image as P6, or P5 for single-channel images.
pub fn render_image(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    for px in image.data.chunks(image.channels) {
        if image.channels == 1 {
            bytes.push(to_byte(px[0]));
        } else {
            bytes.extend(px[..3].iter().map(|&v| to_byte(v)));
        }
    }
    bytes
}

/// Parsed binary PNM with maxval 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Reads the header layout written by this module (P5 or P6, maxval 255).
pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                reason: "truncated header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    // Exactly one whitespace byte separates maxval from the raster.
    pos += 1;
    let channels = match fields[0].1.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => {
            return Err(Error::Format {
                offset: 0,
                reason: format!("unsupported magic {}", fields[0].1),
            })
        }
    };
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| Error::Format {
            offset: fields[i].0 as u64,
            reason: format!("bad header number {}", fields[i].1),
        })
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Format {
            offset: fields[3].0 as u64,
            reason: format!("maxval {maxval} is not 255"),
        });
    }
    let n = width * height * channels;
    if bytes.len() < pos || bytes.len() - pos != n {
        return Err(Error::Format {
            offset: pos as u64,
            reason: format!("raster has {} bytes, expected {n}", bytes.len().saturating_sub(pos)),
        });
    }
    Ok(Pnm {
        channels,
        width,
        height,
        pixels: bytes[pos..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::Resolution;

    fn map(h: usize, w: usize, v: Vec<f64>) -> Heatmap {
        Heatmap::new(h, w, v, Resolution::InputSpace).unwrap()
    }

    #[test]
    fn gray_min_max_example() {
        let r = render_gray(&map(2, 2, vec![0.0, 1.0, 2.0, 3.0]));
        assert!(!r.degenerate);
        let mut expect = b"P5\n2 2\n255\n".to_vec();
        expect.extend_from_slice(&[0, 85, 170, 255]);
        assert_eq!(r.bytes, expect);
    }

    #[test]
    fn constant_map_is_degenerate_zero() {
        let r = render_gray(&map(2, 3, vec![0.7; 6]));
        assert!(r.degenerate);
        assert_eq!(parse_pnm(&r.bytes).unwrap().pixels, vec![0; 6]);
        assert!(render_diverging(&map(1, 2, vec![0.0; 2])).degenerate);
    }

    #[test]
    fn diverging_palette_ends() {
        let r = render_diverging(&map(1, 3, vec![-2.0, 0.0, 2.0]));
        let p = parse_pnm(&r.bytes).unwrap();
        assert_eq!((p.channels, p.width, p.height), (3, 3, 1));
        assert_eq!(p.pixels, vec![0, 0, 255, 255, 255, 255, 255, 0, 0]);
    }

    #[test]
    fn parse_rejects_short_raster() {
        let mut r = render_gray(&map(2, 2, vec![0.0, 1.0, 2.0, 3.0])).bytes;
        r.pop();
        assert!(matches!(parse_pnm(&r), Err(Error::Format { .. })));
    }
}
