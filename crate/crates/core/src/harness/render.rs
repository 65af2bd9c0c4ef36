//! PGM/PPM output for saliency maps and region boxes.

use std::fs;
use std::path::Path;

use crate::crops::PixelBox;
use crate::error::{Error, Result};
use crate::featmap::ImageTensor;
use crate::ncut::SaliencyMap;

/// Scales `[0, 1]` to `0..=255`, rounding halves up.
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm(s: &SaliencyMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", s.width(), s.height()).into_bytes();
    out.extend(s.values().iter().map(|&v| to_byte(v)));
    out
}

pub fn render_pgm(s: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(s))?;
    Ok(())
}

/// Binary PPM of an RGB image with one-pixel red box outlines.
pub fn encode_ppm(img: &ImageTensor, boxes: &[PixelBox]) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::Argument(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let mut pixels: Vec<u8> = img.data().iter().map(|&v| to_byte(v as f64)).collect();
    let mut paint = |row: usize, col: usize| {
        if row < h && col < w {
            let i = (row * w + col) * 3;
            pixels[i..i + 3].copy_from_slice(&[255, 0, 0]);
        }
    };
    for b in boxes {
        for col in b.left..=b.right {
            paint(b.top, col);
            paint(b.bottom, col);
        }
        for row in b.top..=b.bottom {
            paint(row, b.left);
            paint(row, b.right);
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn render_ppm(img: &ImageTensor, boxes: &[PixelBox], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(img, boxes)?)?;
    Ok(())
}
