//! Normalized-cut saliency from feature self-similarity.
//!
//! A [`FeatureMap`] becomes a complete graph whose edge weights are clamped
//! cosine similarities between cell features. The relaxed two-way normalized
//! cut is solved by the second-smallest generalized eigenvector of
//! `(D - E) y = λ D y`, computed through the symmetric substitution
//! `z = D^{1/2} y` and a dense eigendecomposition of `D^{-1/2} (D - E) D^{-1/2}`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::featmap::FeatureMap;

pub const DEFAULT_EPS_CLAMP: f64 = 1e-5;
pub const DEFAULT_EIGEN_TOL: f64 = 1e-8;

/// Relative residual every returned eigenvector must satisfy.
pub const RESIDUAL_BOUND: f64 = 1e-6;

const MAX_EIGEN_ITERS: usize = 10_000;

/// Dense symmetric affinity graph with positive weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    n: usize,
    weights: Vec<f64>,
    degrees: Vec<f64>,
}

impl AffinityGraph {
    /// Builds a graph from an explicit row-major weight matrix.
    pub fn from_weights(n: usize, weights: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Argument(format!("graph needs at least 2 nodes, got {n}")));
        }
        if weights.len() != n * n {
            return Err(Error::Argument(format!(
                "weight matrix has {} entries, expected {}",
                weights.len(),
                n * n
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let w = weights[i * n + j];
                if !(w.is_finite() && w > 0.0) {
                    return Err(Error::Argument(format!("weight ({i},{j}) = {w} is not positive")));
                }
                if w != weights[j * n + i] {
                    return Err(Error::Argument(format!("weights not symmetric at ({i},{j})")));
                }
            }
        }
        let degrees = weights.chunks_exact(n).map(|row| row.iter().sum()).collect();
        Ok(AffinityGraph { n, weights, degrees })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// Relative residual `‖(D − E) y − λ D y‖ / ‖D y‖`.
    pub fn residual(&self, lambda: f64, y: &[f64]) -> f64 {
        let n = self.n;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            let row = &self.weights[i * n..(i + 1) * n];
            let ey: f64 = row.iter().zip(y).map(|(w, v)| w * v).sum();
            let dy = self.degrees[i] * y[i];
            let r = dy - ey - lambda * dy;
            num += r * r;
            den += dy * dy;
        }
        if den == 0.0 {
            return f64::INFINITY;
        }
        (num / den).sqrt()
    }
}

/// Builds the self-similarity graph of a feature map. Edge weights are
/// `max(cos(f_i, f_j), eps_clamp)`.
pub fn build_graph(fm: &FeatureMap, eps_clamp: f64) -> Result<AffinityGraph> {
    if !(eps_clamp > 0.0) {
        return Err(Error::Argument(format!("eps_clamp must be positive, got {eps_clamp}")));
    }
    let n = fm.height() * fm.width();
    if n < 2 {
        return Err(Error::Argument(format!("feature map has {n} cells; no partition exists")));
    }
    let c = fm.channels();
    // Unit-normalize once; zero vectors stay zero so their similarities are 0.
    let mut unit = vec![0.0f64; n * c];
    for (cell, out) in fm.data().chunks_exact(c).zip(unit.chunks_exact_mut(c)) {
        let norm = cell.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (o, &v) in out.iter_mut().zip(cell) {
                *o = v as f64 / norm;
            }
        }
    }
    let mut weights = vec![0.0f64; n * n];
    for i in 0..n {
        let fi = &unit[i * c..(i + 1) * c];
        for j in i..n {
            let fj = &unit[j * c..(j + 1) * c];
            let cos = fi.iter().zip(fj).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
            let w = cos.max(eps_clamp);
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    let degrees = weights.chunks_exact(n).map(|row| row.iter().sum()).collect();
    Ok(AffinityGraph { n, weights, degrees })
}

/// Second-smallest generalized eigenpair of `(D - E) y = λ D y`.
#[derive(Clone, Debug)]
pub struct Fiedler {
    pub value: f64,
    /// Unit `D`-norm eigenvector.
    pub vector: Vec<f64>,
    pub residual: f64,
}

pub fn second_eigvec(g: &AffinityGraph, tol: f64) -> Result<Fiedler> {
    if !(tol > 0.0) {
        return Err(Error::Argument(format!("tolerance must be positive, got {tol}")));
    }
    let n = g.n;
    let inv_sqrt: Vec<f64> = g.degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    // D^{-1/2} (D - E) D^{-1/2} = I - D^{-1/2} E D^{-1/2}
    let m = DMatrix::from_fn(n, n, |i, j| {
        let s = g.weight(i, j) * inv_sqrt[i] * inv_sqrt[j];
        if i == j {
            1.0 - s
        } else {
            -s
        }
    });
    let eig = SymmetricEigen::try_new(m, tol, MAX_EIGEN_ITERS)
        .ok_or(Error::NoConvergence { residual: f64::INFINITY })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let k = order[1];
    let value = eig.eigenvalues[k];
    let z = eig.eigenvectors.column(k);
    let z_norm = z.norm();
    let vector: Vec<f64> = (0..n).map(|i| z[i] * inv_sqrt[i] / z_norm).collect();

    let residual = g.residual(value, &vector);
    if !(residual <= RESIDUAL_BOUND) {
        return Err(Error::NoConvergence { residual });
    }
    Ok(Fiedler {
        value,
        vector,
        residual,
    })
}

/// Normalized-cut energy `cut(A,B)/assoc(A,V) + cut(A,B)/assoc(B,V)` of the
/// bipartition where `foreground[i]` marks membership of node `i` in `A`.
pub fn ncut_energy(g: &AffinityGraph, foreground: &[bool]) -> Result<f64> {
    if foreground.len() != g.n {
        return Err(Error::Argument(format!(
            "partition has {} entries for {} nodes",
            foreground.len(),
            g.n
        )));
    }
    let fg_count = foreground.iter().filter(|&&f| f).count();
    if fg_count == 0 || fg_count == g.n {
        return Err(Error::Argument("both sides of the partition must be nonempty".into()));
    }
    let (mut cut, mut assoc_fg, mut assoc_bg) = (0.0, 0.0, 0.0);
    for i in 0..g.n {
        if foreground[i] {
            assoc_fg += g.degrees[i];
            for j in 0..g.n {
                if !foreground[j] {
                    cut += g.weight(i, j);
                }
            }
        } else {
            assoc_bg += g.degrees[i];
        }
    }
    Ok(cut / assoc_fg + cut / assoc_bg)
}

/// Per-cell foreground saliency in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Argument(format!(
                "saliency map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(SaliencyMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_tensor(&self) -> crate::featmap::Tensor {
        let data = self.values.iter().map(|&v| v as f32).collect();
        crate::featmap::Tensor::new(self.height, self.width, 1, data)
            .expect("saliency values are finite")
    }

    pub fn from_tensor(t: &crate::featmap::Tensor) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::Argument(format!(
                "saliency tensor must have 1 channel, got {}",
                t.channels()
            )));
        }
        SaliencyMap::new(
            t.height(),
            t.width(),
            t.data().iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Orients `y` so its largest-magnitude entry (first on ties) is positive,
/// then min-max normalizes to `[0, 1]`. A constant vector maps to 0.5.
pub fn saliency_from_eigvec(y: &[f64], height: usize, width: usize) -> Result<SaliencyMap> {
    if y.len() != height * width || y.is_empty() {
        return Err(Error::Argument(format!(
            "vector of length {} does not fit a {height}x{width} map",
            y.len()
        )));
    }
    let pivot = y
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if v.abs() > y[best].abs() { i } else { best });
    let sign = if y[pivot] < 0.0 { -1.0 } else { 1.0 };
    let oriented: Vec<f64> = y.iter().map(|v| sign * v).collect();
    let lo = oriented.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = oriented.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        let span = hi - lo;
        oriented.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; y.len()]
    };
    SaliencyMap::new(height, width, values)
}

/// Feature map → graph → Fiedler vector → oriented saliency.
pub fn saliency_map(fm: &FeatureMap, eps_clamp: f64, tol: f64) -> Result<SaliencyMap> {
    let g = build_graph(fm, eps_clamp)?;
    let f = second_eigvec(&g, tol)?;
    saliency_from_eigvec(&f.vector, fm.height(), fm.width())
}
