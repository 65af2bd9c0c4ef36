//! Dense H×W×C tensors, the SGFM exchange format, resampling, and cosine
//! similarity.
//!
//! SGFM layout (all little-endian):
//!
//! ```text
//! bytes 0..4    b"SGFM"
//! bytes 4..16   dim0 (height), dim1 (width), channels as u32
//! bytes 16..    dim0 * dim1 * channels f32 values, row-major, channel-fastest
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGFM";
const HEADER_LEN: usize = 16;

/// Row-major, channel-fastest grid of single-precision values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// An RGB image with values in `[0, 1]`.
pub type ImageTensor = Tensor;

/// A grid of spatial feature vectors.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let len = checked_len(height, width, channels)?;
        if data.len() != len {
            return Err(Error::Argument(format!(
                "tensor {height}x{width}x{channels} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite value at index {i}")));
        }
        Ok(Tensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    /// The channel vector stored at one grid cell.
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = self.index(row, col, 0);
        &self.data[start..start + self.channels]
    }

    /// Checks the extra invariant of image tensors: every value in `[0, 1]`.
    pub fn check_unit_range(&self) -> Result<()> {
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(i) => Err(Error::Argument(format!(
                "image value {} at index {i} outside [0, 1]",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}

fn checked_len(height: usize, width: usize, channels: usize) -> Result<usize> {
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format(format!("dimensions {height}x{width}x{channels} overflow")))
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.height == 0 || t.width == 0 || t.channels == 0 {
        return Err(Error::Argument(format!(
            "cannot write empty tensor {}x{}x{}",
            t.height, t.width, t.channels
        )));
    }
    let dims = [t.height, t.width, t.channels]
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::Argument(format!("dimension {d} exceeds u32"))))
        .collect::<Result<Vec<u32>>>()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected SGFM".into()));
    }
    let dim = |i: usize| {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!("empty dimension {h}x{w}x{c}")));
    }
    let len = checked_len(h, w, c)?;
    let payload_len = len
        .checked_mul(4)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < payload_len {
        return Err(Error::Format(format!(
            "truncated payload: expected {len} floats, found {} bytes",
            payload.len()
        )));
    }
    if payload.len() > payload_len {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - payload_len
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect::<Vec<_>>();
    Tensor::new(h, w, c, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode_tensor(&bytes)
}

/// Bilinear resampling with pixel-center alignment: output pixel `y` samples
/// the source at `(y + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!("target size {out_h}x{out_w} has a zero side")));
    }
    if img.is_empty() {
        return Err(Error::Argument("cannot resize an empty image".into()));
    }
    let (in_h, in_w, ch) = (img.height, img.width, img.channels);
    let ys = sample_axis(in_h, out_h);
    let xs = sample_axis(in_w, out_w);
    let mut out = Tensor::zeros(out_h, out_w, ch);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..ch {
                let a = img.get(y0, x0, c) as f64;
                let b = img.get(y0, x1, c) as f64;
                let d = img.get(y1, x0, c) as f64;
                let e = img.get(y1, x1, c) as f64;
                let top = a + (b - a) * fx;
                let bottom = d + (e - d) * fx;
                let v = top + (bottom - top) * fy;
                let lo = a.min(b).min(d).min(e);
                let hi = a.max(b).max(d).max(e);
                out.set(oy, ox, c, v.clamp(lo, hi) as f32);
            }
        }
    }
    Ok(out)
}

fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Cosine similarity accumulated in double precision and clamped to `[-1, 1]`.
/// A zero-norm argument yields `0.0`.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity: length mismatch");
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}
