//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgcl::featmap::Tensor;
use sgcl::loss::MemoryQueue;
use sgcl::model::{ModelDims, ModelParams};
use sgcl::ncut::AffinityGraph;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normalized-cut energy straight from the edge weights.
pub fn ncut_energy_oracle(w: &[Vec<f64>], side: &[bool]) -> f64 {
    let n = w.len();
    let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if side[i] {
                assoc_a += w[i][j];
                if !side[j] {
                    cut += w[i][j];
                }
            } else {
                assoc_b += w[i][j];
            }
        }
    }
    cut / assoc_a + cut / assoc_b
}

/// Minimum energy over all 2ⁿ − 2 proper bipartitions.
pub fn brute_force_min_ncut(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    (1..(1u32 << n) - 1)
        .map(|mask| {
            let side: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            ncut_energy_oracle(w, &side)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Two planted clusters: intra weights in [0.5, 1], inter weights in
/// [0, 0.1], unit diagonal.
pub fn planted_graph<R: Rng>(n: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<bool>) {
    let k = rng.random_range(2..=n - 2);
    let mut labels: Vec<bool> = (0..n).map(|i| i < k).collect();
    labels.shuffle(rng);
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        w[i][i] = 1.0;
        for j in i + 1..n {
            let v = if labels[i] == labels[j] {
                rng.random_range(0.5..=1.0)
            } else {
                rng.random_range(0.0..=0.1)
            };
            w[i][j] = v;
            w[j][i] = v;
        }
    }
    (w, labels)
}

pub fn to_graph(w: &[Vec<f64>]) -> AffinityGraph {
    AffinityGraph::from_weights(w.len(), w.concat()).unwrap()
}

pub fn random_image<R: Rng>(h: usize, w: usize, rng: &mut R) -> Tensor {
    Tensor::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

pub fn random_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dense(w: &[f32], b: &[f32], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, &bo)| {
            let mut s = bo as f64;
            for (i, xi) in x.iter().enumerate() {
                s += w[o * x.len() + i] as f64 * xi;
            }
            s
        })
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect()
}

fn active(v: &[f64]) -> Vec<bool> {
    v.iter().map(|&x| x > 0.0).collect()
}

/// Straight-line forward: encode every patch, average the features, then the
/// two MLPs. Returns `(z, p)`.
pub fn reference_forward(params: &ModelParams, view: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (z, p, _) = reference_forward_pattern(params, view);
    (z, p)
}

/// [`reference_forward`] plus the ReLU activation pattern.
pub fn reference_forward_pattern(params: &ModelParams, view: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let d = params.dims;
    let p = d.patch_px;
    let (gh, gw) = (view.height() / p, view.width() / p);
    let mut pooled = vec![0.0; d.channels];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut patch = Vec::with_capacity(d.patch_len());
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        patch.push(view.get(gy * p + y, gx * p + x, c) as f64);
                    }
                }
            }
            let f = dense(&params.encoder.weight, &params.encoder.bias, &patch);
            for (s, v) in pooled.iter_mut().zip(f) {
                *s += v / (gh * gw) as f64;
            }
        }
    }
    let pre1 = dense(&params.proj_hidden.weight, &params.proj_hidden.bias, &pooled);
    let mut pattern = active(&pre1);
    let z = dense(&params.proj_out.weight, &params.proj_out.bias, &relu(pre1));
    let pre2 = dense(&params.pred_hidden.weight, &params.pred_hidden.bias, &z);
    pattern.extend(active(&pre2));
    let out = dense(&params.pred_out.weight, &params.pred_out.bias, &relu(pre2));
    (z, out, pattern)
}

fn neg_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    -dot / (na * nb)
}

/// A small training batch: online views with fixed targets and scores, plus
/// a queue of fixed neighbours.
pub struct GradInstance {
    pub params: ModelParams,
    pub views: Vec<Tensor>,
    pub targets: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub queue: MemoryQueue,
    pub gamma: f64,
    pub l: usize,
}

pub fn random_dims<R: Rng>(rng: &mut R) -> ModelDims {
    ModelDims {
        patch_px: rng.random_range(1..=4),
        channels: rng.random_range(2..=8),
        proj_hidden: rng.random_range(2..=10),
        proj_dim: rng.random_range(2..=6),
        pred_hidden: rng.random_range(2..=8),
    }
}

pub fn grad_instance<R: Rng>(dims: ModelDims, pairs: usize, rng: &mut R) -> GradInstance {
    let params = ModelParams::init(dims, rng);
    let side = dims.patch_px * rng.random_range(1..=3);
    let views = (0..pairs).map(|_| random_image(side, side, rng)).collect();
    let targets = (0..pairs).map(|_| random_vec(dims.proj_dim, rng)).collect();
    let scores = (0..pairs).map(|_| rng.random_range(0.05..=1.0)).collect();
    let mut queue = MemoryQueue::new(6, dims.proj_dim).unwrap();
    for _ in 0..6 {
        queue.push(random_vec(dims.proj_dim, rng)).unwrap();
    }
    GradInstance {
        params,
        views,
        targets,
        scores,
        queue,
        gamma: 0.5,
        l: 3,
    }
}

/// Intra plus inter loss computed with the reference forward pass and a
/// from-scratch neighbour search.
pub fn reference_objective(inst: &GradInstance, params: &ModelParams) -> f64 {
    reference_objective_pattern(inst, params).0
}

/// The objective together with its ReLU patterns and neighbour choices; the
/// objective is smooth wherever these stay fixed.
pub fn reference_objective_pattern(inst: &GradInstance, params: &ModelParams) -> (f64, Vec<bool>, Vec<usize>) {
    let t = inst.views.len() as f64;
    let entries: Vec<&[f64]> = inst.queue.iter().collect();
    let mut total = 0.0;
    let mut patterns = Vec::new();
    let mut chosen = Vec::new();
    for ((view, z), &score) in inst.views.iter().zip(&inst.targets).zip(&inst.scores) {
        let (_, p, pattern) = reference_forward_pattern(params, view);
        patterns.extend(pattern);
        let w = score.powf(inst.gamma);
        total += w * neg_cos(&p, z);
        let mut sims: Vec<(f64, usize)> = entries.iter().enumerate().map(|(k, e)| (-neg_cos(&p, e), k)).collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let l = inst.l.min(sims.len());
        for &(s, k) in &sims[..l] {
            total += w * -s / (t * l as f64);
            chosen.push(k);
        }
    }
    (total, patterns, chosen)
}

/// Analytic gradients from the library's forward/backward path.
pub fn analytic_grads(inst: &GradInstance) -> sgcl::model::Gradients {
    use sgcl::loss::{inter_loss_with_grads, loss_grad, pair_weight, Probe};
    use sgcl::model::{backward, forward, Gradients};
    let caches: Vec<_> = inst.views.iter().map(|v| forward(&inst.params, v).unwrap()).collect();
    let probes: Vec<Probe<'_>> = caches
        .iter()
        .zip(&inst.scores)
        .map(|(c, &score)| Probe { online: &c.p, score })
        .collect();
    let (_, inter) = inter_loss_with_grads(&probes, &inst.queue, inst.l, inst.gamma).unwrap();
    let mut grads = Gradients::zeros(inst.params.dims);
    for (((c, z), &score), ig) in caches.iter().zip(&inst.targets).zip(&inst.scores).zip(&inter) {
        let w = pair_weight(score, inst.gamma).unwrap();
        let g: Vec<f64> = loss_grad(&c.p, z).iter().zip(ig).map(|(a, b)| w * a + b).collect();
        backward(&inst.params, c, &g, &mut grads).unwrap();
    }
    grads
}

pub struct FdReport {
    /// Per-tensor relative error ‖g_fd − g‖ / max(‖g_fd‖, ‖g‖).
    pub errors: Vec<f64>,
    pub probed: usize,
    /// Entries whose ±h perturbation crossed a ReLU kink or changed the
    /// neighbour set, where central differences are meaningless.
    pub skipped: usize,
}

/// Central differences against the analytic gradient. `entries` limits how
/// many entries of each tensor are probed (all when `None`).
pub fn fd_relative_errors<R: Rng>(inst: &GradInstance, h: f32, entries: Option<usize>, rng: &mut R) -> FdReport {
    let (mut probed, mut skipped) = (0, 0);
    let analytic = analytic_grads(inst);
    let analytic_tensors = analytic.tensors();
    let sizes: Vec<usize> = inst.params.tensors().iter().map(|t| t.len()).collect();
    let mut errors = Vec::with_capacity(sizes.len());
    for (k, &len) in sizes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..len).collect();
        if let Some(m) = entries {
            idx.shuffle(rng);
            idx.truncate(m);
        }
        let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &idx {
            let mut plus = inst.params.clone();
            let mut minus = inst.params.clone();
            let v = inst.params.tensors()[k][i];
            plus.tensors_mut()[k][i] = v + h;
            minus.tensors_mut()[k][i] = v - h;
            let step = plus.tensors()[k][i] as f64 - minus.tensors()[k][i] as f64;
            let (lp, pp, np) = reference_objective_pattern(inst, &plus);
            let (lm, pm, nm) = reference_objective_pattern(inst, &minus);
            probed += 1;
            if pp != pm || np != nm {
                skipped += 1;
                continue;
            }
            let fd = (lp - lm) / step;
            let a = analytic_tensors[k][i];
            diff += (fd - a).powi(2);
            na += a * a;
            nf += fd * fd;
        }
        let scale = na.sqrt().max(nf.sqrt());
        errors.push(if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale });
    }
    FdReport { errors, probed, skipped }
}

/// Central-difference gradient of a scalar function of a vector.
pub fn fd_vector(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}
