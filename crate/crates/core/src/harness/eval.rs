//! Saliency quality against ground-truth masks.

use crate::error::{Error, Result};
use crate::ncut::SaliencyMap;
use crate::regions::{threshold_mask, BiPartitionMask};

use super::scene::SyntheticScene;

/// IoU between a grid mask replicated `stride`×`stride` onto the pixel grid
/// and a pixel mask. An empty union scores 0.
pub fn mask_iou(grid: &BiPartitionMask, gt: &BiPartitionMask, stride: usize) -> Result<f64> {
    if stride == 0
        || grid.height() * stride < gt.height()
        || grid.width() * stride < gt.width()
        || (grid.height() - 1) * stride >= gt.height()
        || (grid.width() - 1) * stride >= gt.width()
    {
        return Err(Error::Argument(format!(
            "{}x{} grid at stride {stride} does not cover a {}x{} mask",
            grid.height(),
            grid.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for row in 0..gt.height() {
        for col in 0..gt.width() {
            let a = grid.get(row / stride, col / stride);
            let b = gt.get(row, col);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// IoU of the mean-thresholded saliency mask against the scene's objects.
pub fn eval_iou(s: &SaliencyMap, scene: &SyntheticScene, stride: usize) -> Result<f64> {
    mask_iou(&threshold_mask(s), &scene.gt_mask, stride)
}

/// IoU of the all-foreground mask, i.e. the object coverage fraction.
pub fn constant_baseline_iou(scene: &SyntheticScene) -> f64 {
    let gt = &scene.gt_mask;
    gt.count() as f64 / (gt.height() * gt.width()) as f64
}
