//! Synthetic scene images with ground-truth object masks.

use rand::Rng;

use crate::featmap::{ImageTensor, Tensor};
use crate::regions::BiPartitionMask;
use crate::rng;

pub const MIN_COVERAGE: f64 = 0.05;
pub const MAX_COVERAGE: f64 = 0.40;
pub const MIN_CONTRAST: f64 = 0.4;
pub const BACKGROUND_NOISE: f32 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub max_objects: usize,
    /// Minimum RGB distance between every object colour and the background.
    pub min_contrast: f64,
    pub noise: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 128,
            max_objects: 4,
            min_contrast: MIN_CONTRAST,
            noise: BACKGROUND_NOISE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: ImageTensor,
    pub gt_mask: BiPartitionMask,
    pub object_count: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    top: f64,
    left: f64,
    h: f64,
    w: f64,
    color: [f32; 3],
}

impl Object {
    fn covers(&self, row: usize, col: usize) -> bool {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        match self.shape {
            Shape::Rect => y >= self.top && y < self.top + self.h && x >= self.left && x < self.left + self.w,
            Shape::Ellipse => {
                let (cy, cx) = (self.top + self.h / 2.0, self.left + self.w / 2.0);
                let (dy, dx) = ((y - cy) / (self.h / 2.0), (x - cx) / (self.w / 2.0));
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

fn distance(a: [f32; 3], b: [f32; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Generates one scene: a noisy flat background and 1 to `max_objects`
/// axis-aligned rectangles or ellipses whose union covers 5–40% of the image.
/// Layouts outside the coverage band are redrawn from the same stream.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> SyntheticScene {
    let size = cfg.size;
    let mut rng = rng::derive(seed, &[0x5CE7E]);
    let background = [
        rng.random_range(0.1f32..0.9),
        rng.random_range(0.1f32..0.9),
        rng.random_range(0.1f32..0.9),
    ];
    let (objects, mask) = loop {
        let count = rng.random_range(1..=cfg.max_objects.max(1));
        let objects: Vec<Object> = (0..count)
            .map(|_| {
                let side = size as f64;
                let h = rng.random_range(side / 8.0..side / 2.2);
                let w = rng.random_range(side / 8.0..side / 2.2);
                let top = rng.random_range(0.0..side - h);
                let left = rng.random_range(0.0..side - w);
                let color = loop {
                    let c = random_color(&mut rng);
                    if distance(c, background) >= cfg.min_contrast {
                        break c;
                    }
                };
                let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
                Object {
                    shape,
                    top,
                    left,
                    h,
                    w,
                    color,
                }
            })
            .collect();
        let bits: Vec<bool> = (0..size * size)
            .map(|i| objects.iter().any(|o| o.covers(i / size, i % size)))
            .collect();
        let coverage = bits.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&coverage) {
            break (objects, bits);
        }
    };

    let mut image = Tensor::zeros(size, size, 3);
    for row in 0..size {
        for col in 0..size {
            // Later objects paint over earlier ones.
            let base = objects
                .iter()
                .rev()
                .find(|o| o.covers(row, col))
                .map_or(background, |o| o.color);
            for (c, &b) in base.iter().enumerate() {
                let n = rng.random_range(-cfg.noise..=cfg.noise);
                image.set(row, col, c, (b + n).clamp(0.0, 1.0));
            }
        }
    }

    SyntheticScene {
        image,
        gt_mask: BiPartitionMask::new(size, size, mask).expect("mask matches image size"),
        object_count: objects.len(),
        seed,
    }
}

/// Scene `i` of a dataset uses seed `derive_seed(dataset_seed, [i])`.
pub fn gen_dataset(count: usize, dataset_seed: u64, cfg: &SceneConfig) -> Vec<SyntheticScene> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| gen_scene(rng::derive_seed(dataset_seed, &[i as u64]), cfg))
        .collect()
}
