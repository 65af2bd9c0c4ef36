//! Saliency-weighted BYOL-style objective.
//!
//! The pairwise term is the negated cosine similarity between the online
//! prediction and a target embedding, so minimizing it pulls positives
//! together. Pairs are weighted by `P^γ`. The inter-image term compares each
//! online prediction with its nearest neighbours in a FIFO memory queue of
//! past target embeddings. Targets and queue entries are constants for the
//! gradient.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};
use crate::featmap::cosine_similarity;

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_NEIGHBORS: usize = 5;
pub const DEFAULT_QUEUE_CAPACITY: usize = 512;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `−cos(p, z)`; zero when either norm vanishes.
pub fn pair_loss(p: &[f64], z: &[f64]) -> f64 {
    -cosine_similarity(p, z)
}

/// Gradient of [`pair_loss`] with respect to `p`:
/// `−(z / (‖p‖‖z‖) − cos(p, z) · p / ‖p‖²)`.
pub fn loss_grad(p: &[f64], z: &[f64]) -> Vec<f64> {
    let (np, nz) = (norm(p), norm(z));
    if np == 0.0 || nz == 0.0 {
        return vec![0.0; p.len()];
    }
    let cos = p.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (np * nz);
    p.iter()
        .zip(z)
        .map(|(&pi, &zi)| -(zi / (np * nz) - cos * pi / (np * np)))
        .collect()
}

/// `P^γ` with `0^0 = 1`.
pub fn pair_weight(score: f64, gamma: f64) -> Result<f64> {
    if !(score >= 0.0) || !(gamma >= 0.0) {
        return Err(Error::Argument(format!(
            "score {score} and gamma {gamma} must be nonnegative"
        )));
    }
    Ok(score.powf(gamma))
}

/// One weighted positive pair: online prediction, target embedding, score.
#[derive(Clone, Copy, Debug)]
pub struct WeightedPair<'a> {
    pub online: &'a [f64],
    pub target: &'a [f64],
    pub score: f64,
}

/// `Σ P_i^γ · L(p_i, z_i)`.
pub fn intra_loss(pairs: &[WeightedPair<'_>], gamma: f64) -> Result<f64> {
    pairs.iter().try_fold(0.0, |acc, pair| {
        Ok(acc + pair_weight(pair.score, gamma)? * pair_loss(pair.online, pair.target))
    })
}

#[derive(Clone, Debug)]
struct QueueEntry {
    seq: u64,
    embedding: Vec<f64>,
}

/// Fixed-capacity FIFO of past target embeddings.
#[derive(Clone, Debug)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<QueueEntry>,
    pushed: u64,
}

/// Neighbour returned by [`nn_search`].
#[derive(Clone, Copy, Debug)]
pub struct Neighbor<'a> {
    pub similarity: f64,
    pub seq: u64,
    pub embedding: &'a [f64],
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Argument("queue capacity and dimension must be positive".into()));
        }
        Ok(MemoryQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of embeddings ever pushed.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    /// Entries oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(|e| e.embedding.as_slice())
    }

    /// Insertion sequence numbers, oldest first.
    pub fn sequence_numbers(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.seq)
    }

    pub fn push(&mut self, embedding: Vec<f64>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Argument(format!(
                "embedding of length {} pushed into queue of dimension {}",
                embedding.len(),
                self.dim
            )));
        }
        if !embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding pushed into queue".into()));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(QueueEntry {
            seq: self.pushed,
            embedding,
        });
        self.pushed += 1;
        Ok(())
    }
}

/// Appends `batch` in order, evicting the oldest entries beyond capacity.
pub fn queue_push(q: &mut MemoryQueue, batch: Vec<Vec<f64>>) -> Result<()> {
    if let Some(bad) = batch.iter().find(|e| e.len() != q.dim) {
        return Err(Error::Argument(format!(
            "embedding of length {} pushed into queue of dimension {}",
            bad.len(),
            q.dim
        )));
    }
    batch.into_iter().try_for_each(|e| q.push(e))
}

/// The `l` entries most cosine-similar to `probe`, descending; ties keep
/// insertion order (older first).
pub fn nn_search<'a>(q: &'a MemoryQueue, probe: &[f64], l: usize) -> Vec<Neighbor<'a>> {
    let mut all: Vec<Neighbor<'a>> = q
        .entries
        .iter()
        .map(|e| Neighbor {
            similarity: cosine_similarity(probe, &e.embedding),
            seq: e.seq,
            embedding: &e.embedding,
        })
        .collect();
    all.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    all.truncate(l);
    all
}

/// Online prediction and score of one probe for the inter-image term.
#[derive(Clone, Copy, Debug)]
pub struct Probe<'a> {
    pub online: &'a [f64],
    pub score: f64,
}

/// `(1/t)(1/l) Σ_i Σ_j P_i^γ · L(p_i, N_j(p_i))`. When the queue holds fewer
/// than `l` entries the average runs over the neighbours actually found.
pub fn inter_loss(probes: &[Probe<'_>], q: &MemoryQueue, l: usize, gamma: f64) -> Result<f64> {
    inter_loss_with_grads(probes, q, l, gamma).map(|(loss, _)| loss)
}

/// [`inter_loss`] plus its gradient with respect to every probe.
pub fn inter_loss_with_grads(
    probes: &[Probe<'_>],
    q: &MemoryQueue,
    l: usize,
    gamma: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if l == 0 {
        return Err(Error::Argument("neighbour count must be at least 1".into()));
    }
    let t = probes.len();
    let mut grads = Vec::with_capacity(t);
    let mut total = 0.0;
    for probe in probes {
        let w = pair_weight(probe.score, gamma)?;
        let mut g = vec![0.0; probe.online.len()];
        let neighbors = nn_search(q, probe.online, l);
        if !neighbors.is_empty() {
            let scale = w / (t as f64 * neighbors.len() as f64);
            for n in &neighbors {
                total += scale * pair_loss(probe.online, n.embedding);
                for (gi, d) in g.iter_mut().zip(loss_grad(probe.online, n.embedding)) {
                    *gi += scale * d;
                }
            }
        }
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn total_loss(intra: f64, inter: f64) -> f64 {
    intra + inter
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerm {
    pub weight: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_all: f64,
    pub terms: Vec<PairTerm>,
}

impl LossReport {
    pub fn new(l_intra: f64, l_inter: f64, terms: Vec<PairTerm>) -> Self {
        LossReport {
            l_intra,
            l_inter,
            l_all: total_loss(l_intra, l_inter),
            terms,
        }
    }

    /// Training log line `step l_intra l_inter l_all`.
    pub fn log_line(&self, step: u64) -> String {
        format!("{step} {} {} {}", self.l_intra, self.l_inter, self.l_all)
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.l_intra, self.l_inter, self.l_all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn queue(entries: &[&[f64]]) -> MemoryQueue {
        let mut q = MemoryQueue::new(16, entries[0].len()).unwrap();
        for e in entries {
            q.push(e.to_vec()).unwrap();
        }
        q
    }

    #[test]
    fn pair_loss_examples() {
        assert!((pair_loss(&[1.0, 2.0], &[1.0, 2.0]) + 1.0).abs() < 1e-15);
        assert_eq!(pair_loss(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((pair_loss(&[1.0, 2.0], &[2.0, 1.0]) + 0.8).abs() < 1e-15);
        assert_eq!(pair_loss(&[0.0, 0.0], &[2.0, 1.0]), 0.0);
    }

    #[test]
    fn intra_loss_examples() {
        let (p, z) = ([1.0, 2.0], [1.0, 2.0]);
        let (a, b) = ([1.0, 0.0], [1.0, 1.0]);
        let unit = [
            WeightedPair { online: &p, target: &z, score: 1.0 },
            WeightedPair { online: &a, target: &b, score: 1.0 },
        ];
        let expected = pair_loss(&p, &z) + pair_loss(&a, &b);
        assert_eq!(intra_loss(&unit, 0.5).unwrap(), expected);

        let quarter = [WeightedPair { online: &p, target: &z, score: 0.25 }];
        assert!((intra_loss(&quarter, 0.5).unwrap() + 0.5).abs() < 1e-15);

        let zero = [WeightedPair { online: &p, target: &z, score: 0.0 }];
        assert_eq!(intra_loss(&zero, 0.5).unwrap(), 0.0);
        assert_eq!(intra_loss(&zero, 0.0).unwrap(), pair_loss(&p, &z));

        let negative = [WeightedPair { online: &p, target: &z, score: -0.1 }];
        assert!(matches!(intra_loss(&negative, 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn nn_search_examples() {
        let probe = [1.0, 0.0];
        let q = queue(&[&probe]);
        let n = nn_search(&q, &probe, 5);
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].embedding, &probe);

        // cosines 0.5, 0.9, -0.2 against the probe (1, 0)
        let e_half = [0.5, 0.75f64.sqrt()];
        let e_09 = [0.9, 0.19f64.sqrt()];
        let e_neg = [-0.2, 0.96f64.sqrt()];
        let q = queue(&[&e_half, &e_09, &e_neg]);
        let n = nn_search(&q, &probe, 2);
        assert_eq!(n.len(), 2);
        assert_eq!(n[0].embedding, &e_09);
        assert_eq!(n[1].embedding, &e_half);
        assert!((n[0].similarity - 0.9).abs() < 1e-12);

        let n = nn_search(&q, &probe, 10);
        assert_eq!(n.iter().map(|x| x.seq).collect::<Vec<_>>(), vec![1, 0, 2]);
    }

    #[test]
    fn nn_search_ties_prefer_older() {
        let q = queue(&[&[1.0, 1.0], &[2.0, 2.0], &[1.0, 0.0]]);
        let n = nn_search(&q, &[3.0, 3.0], 2);
        assert_eq!((n[0].seq, n[1].seq), (0, 1));
    }

    #[test]
    fn nn_search_on_empty_queue() {
        let q = MemoryQueue::new(4, 2).unwrap();
        assert!(nn_search(&q, &[1.0, 0.0], 3).is_empty());
    }

    #[test]
    fn inter_loss_examples() {
        let empty = MemoryQueue::new(4, 2).unwrap();
        let p = [1.0, 0.0];
        assert_eq!(inter_loss(&[Probe { online: &p, score: 1.0 }], &empty, 5, 0.5).unwrap(), 0.0);

        let q = queue(&[&p]);
        assert!((inter_loss(&[Probe { online: &p, score: 1.0 }], &q, 1, 0.5).unwrap() + 1.0).abs() < 1e-15);

        // neighbour cosines 1 and 0: (1/1)(1/2) * 0.5 * (-1 + 0) = -0.25
        let q = queue(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let v = inter_loss(&[Probe { online: &p, score: 0.25 }], &q, 2, 0.5).unwrap();
        assert!((v + 0.25).abs() < 1e-15);
    }

    #[test]
    fn total_loss_adds() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(-1.5, -0.25), -1.75);
        let r = LossReport::new(-1.5, -0.25, vec![]);
        assert_eq!(r.l_all, -1.75);
        assert_eq!(r.log_line(7), "7 -1.5 -0.25 -1.75");
    }

    #[test]
    fn aligned_gradient_vanishes() {
        let p = [0.3, -1.2, 2.0];
        assert!(loss_grad(&p, &p).iter().all(|g| g.abs() < 1e-15));
        assert!(loss_grad(&[0.0; 3], &p).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn queue_is_fifo() {
        let mut q = MemoryQueue::new(2, 1).unwrap();
        queue_push(&mut q, vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(q.iter().map(|e| e[0]).collect::<Vec<_>>(), vec![2.0, 3.0]);
        queue_push(&mut q, vec![]).unwrap();
        assert_eq!(q.len(), 2);

        let mut q = MemoryQueue::new(3, 1).unwrap();
        queue_push(&mut q, vec![vec![5.0], vec![6.0], vec![7.0]]).unwrap();
        assert_eq!(q.iter().map(|e| e[0]).collect::<Vec<_>>(), vec![5.0, 6.0, 7.0]);
        assert!(matches!(queue_push(&mut q, vec![vec![1.0, 2.0]]), Err(Error::Argument(_))));
        assert_eq!(q.len(), 3);
    }

    fn fd_grad(p: &[f64], z: &[f64], h: f64) -> Vec<f64> {
        (0..p.len())
            .map(|i| {
                let mut a = p.to_vec();
                let mut b = p.to_vec();
                a[i] += h;
                b[i] -= h;
                (pair_loss(&a, z) - pair_loss(&b, z)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            p in prop::collection::vec(-2.0f64..2.0, 6),
            z in prop::collection::vec(-2.0f64..2.0, 6),
        ) {
            prop_assume!(norm(&p) > 0.1 && norm(&z) > 0.1);
            let g = loss_grad(&p, &z);
            let fd = fd_grad(&p, &z, 1e-6);
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-5 * norm(&g).max(1e-3), "{err}");
            let dot: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() < 1e-9);
        }

        #[test]
        fn losses_are_scale_invariant(
            p in prop::collection::vec(-2.0f64..2.0, 4),
            z in prop::collection::vec(-2.0f64..2.0, 4),
            a in 0.01f64..50.0, b in 0.01f64..50.0,
        ) {
            prop_assume!(norm(&p) > 1e-3 && norm(&z) > 1e-3);
            let ps: Vec<f64> = p.iter().map(|v| v * a).collect();
            let zs: Vec<f64> = z.iter().map(|v| v * b).collect();
            prop_assert!((pair_loss(&ps, &zs) - pair_loss(&p, &z)).abs() < 1e-12);
            let q = queue(&[&z]);
            let qs = queue(&[&zs]);
            let x = inter_loss(&[Probe { online: &p, score: 0.5 }], &q, 1, 0.5).unwrap();
            let y = inter_loss(&[Probe { online: &ps, score: 0.5 }], &qs, 1, 0.5).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }

        #[test]
        fn intra_loss_weighting(scores in prop::collection::vec(0.0f64..1.0, 3), bump in 0.0f64..1.0) {
            let (p, z) = ([1.0, 0.5], [0.8, 0.7]);
            let pairs: Vec<WeightedPair<'_>> = scores.iter().map(|&s| WeightedPair { online: &p, target: &z, score: s }).collect();
            let base = intra_loss(&pairs, DEFAULT_GAMMA).unwrap();
            let mut higher = pairs.clone();
            higher[0].score = (higher[0].score + bump).min(1.0);
            prop_assert!(intra_loss(&higher, DEFAULT_GAMMA).unwrap() <= base);
            prop_assert_eq!(intra_loss(&pairs, 0.0).unwrap(), 3.0 * pair_loss(&p, &z));
            let ones: Vec<WeightedPair<'_>> = pairs.iter().map(|w| WeightedPair { score: 1.0, ..*w }).collect();
            prop_assert_eq!(intra_loss(&ones, 0.5).unwrap(), intra_loss(&ones, 2.0).unwrap());
        }

        #[test]
        fn nn_search_separates_kept_from_excluded(
            entries in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..20),
            probe in prop::collection::vec(-1.0f64..1.0, 3),
            l in 1usize..8,
        ) {
            let mut q = MemoryQueue::new(32, 3).unwrap();
            for e in &entries { q.push(e.clone()).unwrap(); }
            let kept = nn_search(&q, &probe, l);
            prop_assert_eq!(kept.len(), l.min(entries.len()));
            prop_assert!(kept.windows(2).all(|w| w[0].similarity >= w[1].similarity));
            let kept_seqs: Vec<u64> = kept.iter().map(|n| n.seq).collect();
            let min_kept = kept.last().unwrap().similarity;
            for (seq, e) in q.sequence_numbers().zip(q.iter()) {
                if !kept_seqs.contains(&seq) {
                    prop_assert!(cosine_similarity(&probe, e) <= min_kept);
                }
            }
        }
    }
}
