//! End-to-end harness: synthetic scenes, the alternating training loop,
//! saliency evaluation, and image output.

pub mod config;
pub mod eval;
pub mod render;
pub mod scene;
pub mod train;

pub use config::TrainConfig;
pub use eval::{eval_iou, mask_iou};
pub use render::{render_pgm, render_ppm};
pub use scene::{gen_scene, SceneConfig, SyntheticScene};
pub use train::{initialize_state, refine_saliency, train, TrainOutcome, TrainState};
