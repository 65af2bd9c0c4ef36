//! The alternating training loop.
//!
//! Every epoch each image contributes `t` positive pairs sampled from its
//! current candidate boxes. Candidates start as random crops with score 1.
//! At every epoch `k * refine_interval` (`k ≥ 1`) the full images are encoded
//! by the current online encoder, saliency maps are recomputed, and the
//! scored regions replace the candidates. Images whose saliency yields no
//! region keep their initial random crops.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::crops::{extract_view, pair_in_box, random_crop_in_box, CropPair, PixelBox};
use crate::error::{Error, Result};
use crate::featmap::{self, Tensor};
use crate::loss::{
    inter_loss_with_grads, loss_grad, pair_loss, pair_weight, queue_push, LossReport, MemoryQueue, PairTerm,
    Probe,
};
use crate::model::{self, ema_update, sgd_step, EmaState, Gradients, ModelParams, OptimState};
use crate::ncut::{self, SaliencyMap};
use crate::regions::{extract_regions, weighted_draws};
use crate::rng;

use super::config::TrainConfig;
use super::eval::{constant_baseline_iou, eval_iou};
use super::scene::{gen_dataset, SceneConfig, SyntheticScene};

const TAG_PARAMS: u64 = 1;
const TAG_QUEUE: u64 = 2;
const TAG_INIT_CROPS: u64 = 3;
const TAG_ORDER: u64 = 4;
const TAG_STEP: u64 = 5;

/// A crop region in pixels with its sampling weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: PixelBox,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCandidates {
    pub boxes: Vec<ScoredBox>,
    /// False while the image uses its initial random crops.
    pub from_saliency: bool,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub online: ModelParams,
    pub target: ModelParams,
    pub opt: OptimState,
    pub ema: EmaState,
    pub queue: MemoryQueue,
    pub initial: Vec<Vec<ScoredBox>>,
    pub candidates: Vec<ImageCandidates>,
}

pub fn scene_config(cfg: &TrainConfig) -> SceneConfig {
    SceneConfig {
        size: cfg.image_size,
        max_objects: cfg.max_objects,
        ..SceneConfig::default()
    }
}

pub fn dataset(cfg: &TrainConfig) -> Vec<SyntheticScene> {
    gen_dataset(cfg.num_scenes, cfg.dataset_seed, &scene_config(cfg))
}

/// Random online parameters with an identical target copy, a queue full of
/// unit-normalized Gaussian vectors, and `t` random crops (8–100% of the
/// image, aspect 3/4–4/3) with score 1.0 per image.
pub fn initialize_state(cfg: &TrainConfig, num_images: usize) -> Result<TrainState> {
    cfg.validate()?;
    let dims = cfg.model_dims();
    let online = ModelParams::init(dims, &mut rng::derive(cfg.master_seed, &[TAG_PARAMS]));
    let target = online.clone();

    let mut queue = MemoryQueue::new(cfg.queue_capacity, cfg.proj_dim)?;
    let mut qrng = rng::derive(cfg.master_seed, &[TAG_QUEUE]);
    for _ in 0..cfg.queue_capacity {
        let v: Vec<f64> = (0..cfg.proj_dim)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut qrng))
            .collect();
        let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        queue.push(v.into_iter().map(|x| x / n).collect())?;
    }

    let full = PixelBox::full(cfg.image_size, cfg.image_size);
    let initial: Vec<Vec<ScoredBox>> = (0..num_images)
        .map(|i| {
            let mut r = rng::derive(cfg.master_seed, &[TAG_INIT_CROPS, i as u64]);
            (0..cfg.t_regions)
                .map(|_| ScoredBox {
                    bbox: random_crop_in_box(&full, &mut r).rect(),
                    score: 1.0,
                })
                .collect()
        })
        .collect();
    let candidates = initial
        .iter()
        .map(|b| ImageCandidates {
            boxes: b.clone(),
            from_saliency: false,
        })
        .collect();

    Ok(TrainState {
        opt: OptimState {
            weight_decay: cfg.weight_decay,
            sgd_momentum: cfg.sgd_momentum,
            ..OptimState::new(dims, cfg.base_lr, cfg.total_steps(), cfg.warmup_steps())
        },
        ema: EmaState::new(cfg.ema_tau0, cfg.total_steps()),
        config: cfg.clone(),
        online,
        target,
        queue,
        initial,
        candidates,
    })
}

/// Saliency of a full scene under the given encoder.
pub fn compute_saliency(params: &ModelParams, scene: &SyntheticScene, cfg: &TrainConfig) -> Result<SaliencyMap> {
    let fm = model::encode(params, &scene.image)?;
    ncut::saliency_map(&fm, cfg.eps_clamp, cfg.eigen_tol)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyEval {
    pub mean_iou: f64,
    pub per_image: Vec<f64>,
    /// Images whose eigensolve failed; they score 0.
    pub failures: usize,
}

fn saliency_all(params: &ModelParams, scenes: &[SyntheticScene], cfg: &TrainConfig) -> Vec<Result<SaliencyMap>> {
    scenes
        .par_iter()
        .map(|s| compute_saliency(params, s, cfg))
        .collect()
}

fn summarize(maps: &[Result<SaliencyMap>], scenes: &[SyntheticScene], stride: usize) -> Result<SaliencyEval> {
    let mut per_image = Vec::with_capacity(scenes.len());
    let mut failures = 0;
    for (m, scene) in maps.iter().zip(scenes) {
        per_image.push(match m {
            Ok(s) => eval_iou(s, scene, stride)?,
            Err(Error::NoConvergence { .. }) | Err(Error::Numeric(_)) => {
                failures += 1;
                0.0
            }
            Err(e) => return Err(Error::Argument(e.to_string())),
        });
    }
    let mean_iou = per_image.iter().sum::<f64>() / per_image.len().max(1) as f64;
    Ok(SaliencyEval {
        mean_iou,
        per_image,
        failures,
    })
}

/// Mean saliency IoU of `params` over `scenes`.
pub fn evaluate(params: &ModelParams, scenes: &[SyntheticScene], cfg: &TrainConfig) -> Result<SaliencyEval> {
    summarize(&saliency_all(params, scenes, cfg), scenes, cfg.patch_px)
}

pub fn constant_baseline(scenes: &[SyntheticScene]) -> f64 {
    scenes.iter().map(constant_baseline_iou).sum::<f64>() / scenes.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineReport {
    pub eval: SaliencyEval,
    /// Images that fell back to their initial random crops.
    pub fallbacks: usize,
    pub region_counts: Vec<usize>,
}

/// Recomputes every image's saliency with the current online encoder and
/// replaces its candidate boxes with the scored regions.
pub fn refine_saliency(state: &mut TrainState, scenes: &[SyntheticScene]) -> Result<RefineReport> {
    let cfg = state.config.clone();
    let maps = saliency_all(&state.online, scenes, &cfg);
    let eval = summarize(&maps, scenes, cfg.patch_px)?;
    let mut fallbacks = 0;
    let mut region_counts = Vec::with_capacity(scenes.len());
    for (i, map) in maps.iter().enumerate() {
        let regions = match map {
            Ok(s) => extract_regions(s, cfg.min_area).unwrap_or_default(),
            Err(_) => Vec::new(),
        };
        region_counts.push(regions.len());
        state.candidates[i] = if regions.is_empty() {
            fallbacks += 1;
            ImageCandidates {
                boxes: state.initial[i].clone(),
                from_saliency: false,
            }
        } else {
            ImageCandidates {
                boxes: regions
                    .iter()
                    .map(|r| ScoredBox {
                        bbox: crate::crops::grid_box_to_pixels(&r.bbox, cfg.patch_px, cfg.image_size, cfg.image_size),
                        score: r.score,
                    })
                    .collect(),
                from_saliency: true,
            }
        };
    }
    Ok(RefineReport {
        eval,
        fallbacks,
        region_counts,
    })
}

/// Per-epoch bookkeeping used to audit the loop.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub refined: bool,
    pub steps: usize,
    /// Fewest pairs any image produced this epoch.
    pub min_pairs: usize,
    /// Oldest queue sequence number and total pushes at epoch end.
    pub oldest_seq: u64,
    pub pushed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub mean_iou: f64,
    pub fallbacks: usize,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// `step l_intra l_inter l_all` per optimizer step.
    pub loss_log: Vec<String>,
    /// Random-encoder evaluation at epoch 0 followed by one record per
    /// refinement.
    pub evals: Vec<EvalRecord>,
    pub refine_epochs: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    /// Mean IoU of the all-foreground mask.
    pub baseline_iou: f64,
}

impl TrainOutcome {
    pub fn eval_log(&self) -> String {
        self.evals
            .iter()
            .map(|e| format!("{} {} {} {}\n", e.epoch, e.mean_iou, e.fallbacks, e.failures))
            .collect()
    }

    /// Writes checkpoints, the queue, the config and both logs into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        model::save_params(&self.state.online, dir.join("online.sgfm"), dir.join("online.manifest"))?;
        model::save_params(&self.state.target, dir.join("target.sgfm"), dir.join("target.manifest"))?;
        let q = &self.state.queue;
        let data: Vec<f32> = q.iter().flat_map(|e| e.iter().map(|&v| v as f32)).collect();
        featmap::save_tensor(&Tensor::new(q.len(), q.dim(), 1, data)?, dir.join("queue.sgfm"))?;
        fs::write(dir.join("config.txt"), self.state.config.to_text())?;
        let mut log: String = self.loss_log.iter().map(|l| format!("{l}\n")).collect();
        if log.is_empty() {
            log.push('\n');
        }
        fs::write(dir.join("train.log"), log)?;
        fs::write(dir.join("eval.log"), self.eval_log())?;
        Ok(())
    }
}

/// Runs the alternating loop for `config.epochs` epochs.
pub fn train(cfg: &TrainConfig, scenes: &[SyntheticScene]) -> Result<TrainOutcome> {
    train_with(cfg, scenes, |_, _| {})
}

/// [`train`] with a callback invoked after each epoch.
pub fn train_with<F>(cfg: &TrainConfig, scenes: &[SyntheticScene], mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&TrainState, &EpochRecord),
{
    if scenes.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    if let Some(s) = scenes
        .iter()
        .find(|s| s.image.height() != cfg.image_size || s.image.width() != cfg.image_size)
    {
        return Err(Error::Argument(format!(
            "scene {} is {}x{}, config expects {}",
            s.seed,
            s.image.height(),
            s.image.width(),
            cfg.image_size
        )));
    }
    let mut state = initialize_state(cfg, scenes.len())?;
    let initial_eval = evaluate(&state.online, scenes, cfg)?;
    let mut evals = vec![EvalRecord {
        epoch: 0,
        mean_iou: initial_eval.mean_iou,
        fallbacks: scenes.len(),
        failures: initial_eval.failures,
    }];
    let mut loss_log = Vec::new();
    let mut refine_epochs = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let refined = epoch != 0 && epoch % cfg.refine_interval == 0;
        if refined {
            let report = refine_saliency(&mut state, scenes)?;
            refine_epochs.push(epoch);
            evals.push(EvalRecord {
                epoch,
                mean_iou: report.eval.mean_iou,
                fallbacks: report.fallbacks,
                failures: report.eval.failures,
            });
        }

        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng::derive(cfg.master_seed, &[TAG_ORDER, epoch as u64]));
        let mut min_pairs = usize::MAX;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (report, pairs) = train_step(&mut state, scenes, batch, epoch)?;
            min_pairs = min_pairs.min(pairs);
            loss_log.push(report.log_line(state.opt.step - 1));
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            refined,
            steps,
            min_pairs,
            oldest_seq: state.queue.sequence_numbers().next().unwrap_or(0),
            pushed: state.queue.pushed(),
        };
        on_epoch(&state, &record);
        epochs.push(record);
    }

    Ok(TrainOutcome {
        state,
        loss_log,
        evals,
        refine_epochs,
        epochs,
        baseline_iou: constant_baseline(scenes),
    })
}

/// Pairs for one image in one epoch: `t` draws from the candidate boxes,
/// each turned into two crops.
pub fn image_pairs(state: &TrainState, image: usize, epoch: usize) -> Result<Vec<CropPair>> {
    let cfg = &state.config;
    let mut r = rng::derive(cfg.master_seed, &[TAG_STEP, epoch as u64, image as u64]);
    let boxes = &state.candidates[image].boxes;
    let scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    let draws = weighted_draws(&scores, cfg.t_regions, &mut r)?;
    Ok(draws
        .into_iter()
        .map(|k| pair_in_box(&boxes[k].bbox, boxes[k].score, k, &mut r))
        .collect())
}

/// One optimizer step over a batch of images. Returns the batch-mean loss
/// and the fewest pairs any image contributed.
pub fn train_step(
    state: &mut TrainState,
    scenes: &[SyntheticScene],
    batch: &[usize],
    epoch: usize,
) -> Result<(LossReport, usize)> {
    let cfg = state.config.clone();
    let mut grads = Gradients::zeros(cfg.model_dims());
    let mut pushes = Vec::new();
    let (mut intra_sum, mut inter_sum) = (0.0, 0.0);
    let mut terms = Vec::new();
    let mut min_pairs = usize::MAX;
    let batch_scale = 1.0 / batch.len() as f64;
    let directions = if cfg.symmetric_loss { 2.0 } else { 1.0 };

    for &image in batch {
        let pairs = image_pairs(state, image, epoch)?;
        min_pairs = min_pairs.min(pairs.len());
        let img = &scenes[image].image;

        // (online view, target view, score) per loss direction
        let mut caches = Vec::new();
        let mut targets = Vec::new();
        let mut scores = Vec::new();
        for pair in &pairs {
            let first = extract_view(img, &pair.first, cfg.view_size, cfg.noise_sigma as f32)?;
            let second = extract_view(img, &pair.second, cfg.view_size, cfg.noise_sigma as f32)?;
            caches.push(model::forward(&state.online, &first)?);
            targets.push(model::project(&state.target, &second)?);
            scores.push(pair.score);
            if cfg.symmetric_loss {
                caches.push(model::forward(&state.online, &second)?);
                targets.push(model::project(&state.target, &first)?);
                scores.push(pair.score);
            }
        }

        let mut upstream: Vec<Vec<f64>> = Vec::with_capacity(caches.len());
        let mut intra = 0.0;
        for ((cache, z), &score) in caches.iter().zip(&targets).zip(&scores) {
            let w = pair_weight(score, cfg.gamma)?;
            let l = pair_loss(&cache.p, z);
            terms.push(PairTerm { weight: w, loss: l });
            intra += w * l / directions;
            upstream.push(loss_grad(&cache.p, z).into_iter().map(|g| g * w / directions).collect());
        }
        let probes: Vec<Probe<'_>> = caches
            .iter()
            .zip(&scores)
            .map(|(c, &score)| Probe { online: &c.p, score })
            .collect();
        let (inter, inter_grads) = inter_loss_with_grads(&probes, &state.queue, cfg.l_neighbors, cfg.gamma)?;

        if !(intra.is_finite() && inter.is_finite()) {
            let norms: Vec<String> = caches
                .iter()
                .zip(&targets)
                .enumerate()
                .map(|(k, (c, z))| {
                    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    format!("pair {k}: |p|={} |z|={}", n(&c.p), n(z))
                })
                .collect();
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (image {image}, intra {intra}, inter {inter}); {}",
                state.opt.step,
                norms.join(", ")
            )));
        }

        for ((cache, up), ig) in caches.iter().zip(&upstream).zip(&inter_grads) {
            let g: Vec<f64> = up.iter().zip(ig).map(|(a, b)| (a + b) * batch_scale).collect();
            model::backward(&state.online, cache, &g, &mut grads)?;
        }
        intra_sum += intra;
        inter_sum += inter;
        // one queue entry per second view
        pushes.extend(targets.into_iter().step_by(directions as usize));
    }

    sgd_step(&mut state.online, &grads, &mut state.opt)?;
    if !state.online.is_finite() {
        return Err(Error::Numeric(format!(
            "parameters became non-finite at step {}",
            state.opt.step - 1
        )));
    }
    ema_update(&state.online, &mut state.target, &mut state.ema)?;
    queue_push(&mut state.queue, pushes)?;

    Ok((
        LossReport::new(intra_sum * batch_scale, inter_sum * batch_scale, terms),
        min_pairs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            num_scenes: 2,
            image_size: 32,
            epochs: 1,
            t_regions: 1,
            queue_capacity: 8,
            view_size: 16,
            warmup_epochs: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn initial_state_contract() {
        let cfg = tiny();
        let s = initialize_state(&cfg, 3).unwrap();
        assert_eq!(s.online, s.target);
        assert!(s.candidates.iter().all(|c| c.boxes.iter().all(|b| b.score == 1.0)));
        assert!(s.candidates.iter().all(|c| c.boxes.len() == cfg.t_regions && !c.from_saliency));
        assert_eq!(s.queue.len(), cfg.queue_capacity);
        assert!(s.queue.iter().all(|e| (e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12));
        let again = initialize_state(&cfg, 3).unwrap();
        assert_eq!(again.online, s.online);
        assert_eq!(again.candidates, s.candidates);
        assert_eq!(again.queue.iter().collect::<Vec<_>>(), s.queue.iter().collect::<Vec<_>>());
    }

    #[test]
    fn initial_crops_follow_the_crop_rules() {
        let cfg = TrainConfig { t_regions: 50, ..tiny() };
        let s = initialize_state(&cfg, 4).unwrap();
        let full = PixelBox::full(32, 32);
        for b in s.initial.iter().flatten() {
            assert!(full.contains(&b.bbox));
            let frac = b.bbox.area() as f64 / full.area() as f64;
            assert!(frac >= 0.05 && frac <= 1.0);
        }
    }

    #[test]
    fn one_epoch_two_images_logs_two_steps() {
        let cfg = tiny();
        let scenes = dataset(&cfg);
        let out = train(&cfg, &scenes).unwrap();
        assert_eq!(out.loss_log.len(), 2);
        assert!(out.loss_log[0].starts_with("0 "));
        assert!(out.loss_log[1].starts_with("1 "));
        assert!(out.refine_epochs.is_empty());
    }

    #[test]
    fn untrained_encoder_refinement_completes() {
        let cfg = TrainConfig { num_scenes: 3, ..tiny() };
        let scenes = dataset(&cfg);
        let mut state = initialize_state(&cfg, scenes.len()).unwrap();
        let report = refine_saliency(&mut state, &scenes).unwrap();
        assert_eq!(report.region_counts.len(), 3);
        assert!(report.fallbacks <= 3);
        for (c, &n) in state.candidates.iter().zip(&report.region_counts) {
            assert_eq!(c.from_saliency, n > 0);
            assert!(!c.boxes.is_empty());
        }
    }

    #[test]
    fn symmetric_loss_runs() {
        let cfg = TrainConfig { symmetric_loss: true, ..tiny() };
        let scenes = dataset(&cfg);
        let out = train(&cfg, &scenes).unwrap();
        assert_eq!(out.loss_log.len(), 2);
        // t pairs pushed per image, not 2t
        assert_eq!(out.state.queue.pushed(), cfg.queue_capacity as u64 + 2);
    }

    #[test]
    fn mismatched_scene_size_is_rejected() {
        let cfg = tiny();
        let scenes = dataset(&TrainConfig { image_size: 48, ..cfg.clone() });
        assert!(matches!(train(&cfg, &scenes), Err(Error::Argument(_))));
    }
}
