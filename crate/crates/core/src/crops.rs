//! Positive crop pairs around region boxes, and view extraction.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::featmap::{bilinear_resize, ImageTensor, Tensor};
use crate::regions::{GridBox, Region};

pub const MIN_AREA_FRACTION: f64 = 0.08;
pub const MAX_AREA_FRACTION: f64 = 1.0;
pub const MIN_ASPECT: f64 = 3.0 / 4.0;
pub const MAX_ASPECT: f64 = 4.0 / 3.0;
pub const VIEW_SIZE: usize = 96;
pub const NOISE_SIGMA: f32 = 0.02;

/// Draws of (area, aspect) before falling back to the largest fitting crop.
const MAX_ATTEMPTS: usize = 10;

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl PixelBox {
    pub fn full(height: usize, width: usize) -> Self {
        PixelBox {
            top: 0,
            left: 0,
            bottom: height - 1,
            right: width - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        other.top >= self.top && other.left >= self.left && other.bottom <= self.bottom && other.right <= self.right
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropSpec {
    /// Left column.
    pub x: usize,
    /// Top row.
    pub y: usize,
    pub h: usize,
    pub w: usize,
    pub flip: bool,
    pub noise_seed: u64,
}

impl CropSpec {
    pub fn rect(&self) -> PixelBox {
        PixelBox {
            top: self.y,
            left: self.x,
            bottom: self.y + self.h - 1,
            right: self.x + self.w - 1,
        }
    }
}

impl fmt::Display for CropSpec {
    /// `x y h w flip seed`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {} {}", self.x, self.y, self.h, self.w, self.flip as u8, self.noise_seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropPair {
    pub first: CropSpec,
    pub second: CropSpec,
    pub score: f64,
    pub source_region: usize,
}

/// Maps an inclusive grid box to pixels, clipped to the image.
pub fn grid_box_to_pixels(bbox: &GridBox, stride: usize, img_h: usize, img_w: usize) -> PixelBox {
    let clip_r = |v: usize| v.min(img_h - 1);
    let clip_c = |v: usize| v.min(img_w - 1);
    PixelBox {
        top: clip_r(bbox.row_min * stride),
        left: clip_c(bbox.col_min * stride),
        bottom: clip_r((bbox.row_max + 1) * stride - 1),
        right: clip_c((bbox.col_max + 1) * stride - 1),
    }
}

/// Samples a crop inside `bbox`: area fraction `u ~ U[0.08, 1]`, aspect
/// `r = w/h ~ U[3/4, 4/3]`, `h = round(√(u·A/r))`, `w = round(√(u·A·r))`,
/// placed uniformly among the positions whose rectangle stays in the box.
/// Draws that do not fit are retried; after [`MAX_ATTEMPTS`] the largest
/// rectangle of the last aspect that fits is used.
pub fn random_crop_in_box<R: Rng + ?Sized>(bbox: &PixelBox, rng: &mut R) -> CropSpec {
    let (bh, bw) = (bbox.height(), bbox.width());
    let area = (bh * bw) as f64;
    let mut size = None;
    let mut aspect = 1.0;
    for _ in 0..MAX_ATTEMPTS {
        let u = rng.random_range(MIN_AREA_FRACTION..=MAX_AREA_FRACTION);
        aspect = rng.random_range(MIN_ASPECT..=MAX_ASPECT);
        let h = round_px((u * area / aspect).sqrt());
        let w = round_px((u * area * aspect).sqrt());
        if h <= bh && w <= bw {
            size = Some((h, w));
            break;
        }
    }
    let (h, w) = size.unwrap_or_else(|| {
        // Largest rectangle of this aspect inside the box.
        let h = (bh as f64).min(bw as f64 / aspect);
        (round_px(h).min(bh), round_px(h * aspect).min(bw))
    });
    let y = bbox.top + rng.random_range(0..=bh - h);
    let x = bbox.left + rng.random_range(0..=bw - w);
    let flip = rng.random_bool(0.5);
    let noise_seed = rng.random();
    CropSpec {
        x,
        y,
        h,
        w,
        flip,
        noise_seed,
    }
}

/// Round half away from zero, at least one pixel.
fn round_px(v: f64) -> usize {
    (v.round() as usize).max(1)
}

/// Two independent crops of the same region box; the pair inherits the
/// region's score.
pub fn make_pair<R: Rng + ?Sized>(region: &Region, stride: usize, img: &ImageTensor, rng: &mut R) -> Result<CropPair> {
    if stride == 0 {
        return Err(Error::Argument("stride must be at least 1".into()));
    }
    if region.bbox.row_max * stride >= img.height() || region.bbox.col_max * stride >= img.width() {
        return Err(Error::Argument(format!(
            "region {} lies outside the {}x{} image at stride {stride}",
            region.id,
            img.height(),
            img.width()
        )));
    }
    let bbox = grid_box_to_pixels(&region.bbox, stride, img.height(), img.width());
    Ok(pair_in_box(&bbox, region.score, region.id, rng))
}

pub fn pair_in_box<R: Rng + ?Sized>(bbox: &PixelBox, score: f64, source_region: usize, rng: &mut R) -> CropPair {
    let first = random_crop_in_box(bbox, rng);
    let second = random_crop_in_box(bbox, rng);
    CropPair {
        first,
        second,
        score,
        source_region,
    }
}

/// Crop, optionally mirror horizontally, resize to `out`×`out`, then add
/// Gaussian noise of standard deviation `noise_sigma` seeded by the spec and
/// clamp to `[0, 1]`.
pub fn extract_view(img: &ImageTensor, spec: &CropSpec, out: usize, noise_sigma: f32) -> Result<ImageTensor> {
    if spec.h == 0 || spec.w == 0 || spec.y + spec.h > img.height() || spec.x + spec.w > img.width() {
        return Err(Error::Argument(format!(
            "crop {spec} outside {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let ch = img.channels();
    let mut patch = Tensor::zeros(spec.h, spec.w, ch);
    for r in 0..spec.h {
        for c in 0..spec.w {
            let src_c = if spec.flip { spec.x + spec.w - 1 - c } else { spec.x + c };
            for k in 0..ch {
                patch.set(r, c, k, img.get(spec.y + r, src_c, k));
            }
        }
    }
    let mut view = bilinear_resize(&patch, out, out)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, noise_sigma)
            .map_err(|e| Error::Argument(format!("bad noise sigma: {e}")))?;
        let mut rng = crate::rng::stream(spec.noise_seed);
        for v in view.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(view)
}

/// CropSpecs of a pair list, one `x y h w flip seed` line per view.
pub fn format_pairs(pairs: &[CropPair]) -> String {
    pairs
        .iter()
        .flat_map(|p| [p.first, p.second])
        .map(|s| format!("{s}\n"))
        .collect()
}
