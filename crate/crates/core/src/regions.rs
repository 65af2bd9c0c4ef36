//! Discriminative regions: mean thresholding, connected components, relative
//! peak scores, and score-weighted sampling with replacement.

use std::collections::VecDeque;
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ncut::SaliencyMap;

pub const DEFAULT_MIN_AREA: usize = 4;
pub const DEFAULT_T: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Neighbourhood used to group foreground cells into regions.
pub const CONNECTIVITY: Connectivity = Connectivity::Four;

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiPartitionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BiPartitionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Argument(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(BiPartitionMask {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Inclusive bounding box in grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl GridBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: usize,
    /// Member cells as `(row, col)`, in row-major order.
    pub cells: Vec<(usize, usize)>,
    pub bbox: GridBox,
    /// Relative peak saliency; zero until [`score_regions`] runs.
    pub score: f64,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.id, self.bbox.row_min, self.bbox.col_min, self.bbox.row_max, self.bbox.col_max, self.score
        )
    }
}

/// One region per line: `id row_min col_min row_max col_max score`.
pub fn format_regions(regions: &[Region]) -> String {
    regions.iter().map(|r| format!("{r}\n")).collect()
}

/// Cells strictly above the map's mean saliency.
pub fn threshold_mask(s: &SaliencyMap) -> BiPartitionMask {
    let mean = s.mean();
    BiPartitionMask {
        height: s.height(),
        width: s.width(),
        bits: s.values().iter().map(|&v| v > mean).collect(),
    }
}

pub fn connected_regions(m: &BiPartitionMask, min_area: usize) -> Vec<Region> {
    connected_regions_with(m, min_area, CONNECTIVITY)
}

/// Maximal connected foreground components with at least `min_area` cells,
/// ordered by `(row_min, col_min)` and numbered in that order.
pub fn connected_regions_with(m: &BiPartitionMask, min_area: usize, conn: Connectivity) -> Vec<Region> {
    let (h, w) = (m.height, m.width);
    let mut seen = vec![false; h * w];
    let mut found: Vec<(GridBox, usize, Vec<(usize, usize)>)> = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..h * w {
        if !m.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut cells = Vec::new();
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            cells.push((r, c));
            for &(dr, dc) in conn.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if m.bits[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        if cells.len() < min_area.max(1) {
            continue;
        }
        cells.sort_unstable();
        let bbox = GridBox {
            row_min: cells.iter().map(|c| c.0).min().unwrap(),
            col_min: cells.iter().map(|c| c.1).min().unwrap(),
            row_max: cells.iter().map(|c| c.0).max().unwrap(),
            col_max: cells.iter().map(|c| c.1).max().unwrap(),
        };
        found.push((bbox, start, cells));
    }

    found.sort_by_key(|(b, start, _)| (b.row_min, b.col_min, *start));
    found
        .into_iter()
        .enumerate()
        .map(|(id, (bbox, _, cells))| Region {
            id,
            cells,
            bbox,
            score: 0.0,
        })
        .collect()
}

/// Scores each region by its peak saliency relative to the global peak and
/// sorts descending by score, ties by id.
pub fn score_regions(regions: Vec<Region>, s: &SaliencyMap) -> Result<Vec<Region>> {
    let global = s.max();
    if !(global > 0.0) {
        return Err(Error::Numeric(format!("saliency maximum is {global}; cannot score regions")));
    }
    let mut scored = regions
        .into_iter()
        .map(|mut r| {
            let local = r
                .cells
                .iter()
                .map(|&(row, col)| {
                    if row >= s.height() || col >= s.width() {
                        Err(Error::Argument(format!(
                            "region {} cell ({row},{col}) outside {}x{} map",
                            r.id,
                            s.height(),
                            s.width()
                        )))
                    } else {
                        Ok(s.get(row, col))
                    }
                })
                .try_fold(f64::NEG_INFINITY, |acc, v| v.map(|v| acc.max(v)))?;
            r.score = (local / global).clamp(0.0, 1.0);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    Ok(scored)
}

/// Draws `t` indices with replacement, index `i` with probability
/// `scores[i] / Σ scores`.
pub fn weighted_draws<R: Rng + ?Sized>(scores: &[f64], t: usize, rng: &mut R) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::NoRegions);
    }
    if t == 0 {
        return Err(Error::Argument("t must be at least 1".into()));
    }
    let dist = WeightedIndex::new(scores)
        .map_err(|e| Error::Argument(format!("invalid sampling weights: {e}")))?;
    Ok((0..t).map(|_| dist.sample(rng)).collect())
}

pub fn sample_regions<R: Rng + ?Sized>(regions: &[Region], t: usize, rng: &mut R) -> Result<Vec<Region>> {
    let scores: Vec<f64> = regions.iter().map(|r| r.score).collect();
    Ok(weighted_draws(&scores, t, rng)?
        .into_iter()
        .map(|i| regions[i].clone())
        .collect())
}

/// Threshold, group, filter, and score in one pass.
pub fn extract_regions(s: &SaliencyMap, min_area: usize) -> Result<Vec<Region>> {
    let regions = connected_regions(&threshold_mask(s), min_area);
    if regions.is_empty() {
        return Ok(regions);
    }
    score_regions(regions, s)
}
