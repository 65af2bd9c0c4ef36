//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelDims;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub num_scenes: usize,
    pub image_size: usize,
    pub max_objects: usize,
    pub dataset_seed: u64,
    pub master_seed: u64,
    pub epochs: usize,
    pub refine_interval: usize,
    pub t_regions: usize,
    pub l_neighbors: usize,
    pub gamma: f64,
    pub queue_capacity: usize,
    pub batch_size: usize,
    pub patch_px: usize,
    pub channels: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
    pub view_size: usize,
    pub noise_sigma: f64,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub ema_tau0: f64,
    pub min_area: usize,
    pub eps_clamp: f64,
    pub eigen_tol: f64,
    pub symmetric_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_scenes: 64,
            image_size: 128,
            max_objects: 4,
            dataset_seed: 7,
            master_seed: 2023,
            epochs: 40,
            refine_interval: 5,
            t_regions: 4,
            l_neighbors: 5,
            gamma: 0.5,
            queue_capacity: 512,
            batch_size: 1,
            patch_px: 8,
            channels: 32,
            proj_hidden: 64,
            proj_dim: 16,
            pred_hidden: 32,
            view_size: 96,
            noise_sigma: 0.02,
            base_lr: 0.05,
            warmup_epochs: 4,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            ema_tau0: 0.99,
            min_area: 4,
            eps_clamp: 1e-5,
            eigen_tol: 1e-8,
            symmetric_loss: false,
        }
    }
}

macro_rules! config_fields {
    ($mac:ident) => {
        $mac!(
            num_scenes,
            image_size,
            max_objects,
            dataset_seed,
            master_seed,
            epochs,
            refine_interval,
            t_regions,
            l_neighbors,
            gamma,
            queue_capacity,
            batch_size,
            patch_px,
            channels,
            proj_hidden,
            proj_dim,
            pred_hidden,
            view_size,
            noise_sigma,
            base_lr,
            warmup_epochs,
            weight_decay,
            sgd_momentum,
            ema_tau0,
            min_area,
            eps_clamp,
            eigen_tol,
            symmetric_loss
        )
    };
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Argument(format!("invalid value {raw:?} for {key}")))
}

impl TrainConfig {
    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            patch_px: self.patch_px,
            channels: self.channels,
            proj_hidden: self.proj_hidden,
            proj_dim: self.proj_dim,
            pred_hidden: self.pred_hidden,
        }
    }

    /// Grid side of the full-image feature map.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_px
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.num_scenes.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch()) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch()) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_scenes", self.num_scenes),
            ("image_size", self.image_size),
            ("max_objects", self.max_objects),
            ("epochs", self.epochs),
            ("refine_interval", self.refine_interval),
            ("t_regions", self.t_regions),
            ("l_neighbors", self.l_neighbors),
            ("queue_capacity", self.queue_capacity),
            ("batch_size", self.batch_size),
            ("patch_px", self.patch_px),
            ("channels", self.channels),
            ("proj_hidden", self.proj_hidden),
            ("proj_dim", self.proj_dim),
            ("pred_hidden", self.pred_hidden),
            ("view_size", self.view_size),
            ("min_area", self.min_area),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{k} must be at least 1")));
        }
        if self.max_objects > 4 {
            return Err(Error::Argument("max_objects must be at most 4".into()));
        }
        if self.image_size % self.patch_px != 0 || self.view_size % self.patch_px != 0 {
            return Err(Error::Argument(format!(
                "image_size {} and view_size {} must be multiples of patch_px {}",
                self.image_size, self.view_size, self.patch_px
            )));
        }
        if self.grid_size() < 2 {
            return Err(Error::Argument("image must span at least two patches".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Argument("image_size must be at least 16".into()));
        }
        if !(self.gamma >= 0.0) || !(self.noise_sigma >= 0.0) || !(self.base_lr >= 0.0) {
            return Err(Error::Argument("gamma, noise_sigma and base_lr must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_tau0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Argument("ema_tau0 must lie in [0, 1] and sgd_momentum in [0, 1)".into()));
        }
        if !(self.eps_clamp > 0.0) || !(self.eigen_tol > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Argument("eps_clamp and eigen_tol must be positive".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// unknown or repeated keys are errors. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Argument(format!("line {}: duplicate key {key}", n + 1)));
            }
            macro_rules! assign {
                ($($field:ident),*) => {
                    match key {
                        $(stringify!($field) => cfg.$field = parse_value(key, value)?,)*
                        _ => return Err(Error::Argument(format!("line {}: unknown key {key}", n + 1))),
                    }
                };
            }
            config_fields!(assign);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($field:ident),*) => {
                $(writeln!(s, "{} = {}", stringify!($field), self.$field).unwrap();)*
            };
        }
        config_fields!(emit);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.num_scenes, c.image_size, c.epochs, c.refine_interval), (64, 128, 40, 5));
        assert_eq!((c.t_regions, c.l_neighbors, c.gamma, c.warmup_epochs), (4, 5, 0.5, 4));
        assert_eq!(c.grid_size(), 16);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.gamma = 0.25;
        c.symmetric_loss = true;
        c.base_lr = 0.1;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_partial_files() {
        let c = TrainConfig::parse("# desk run\nepochs = 3  # short\n\nnum_scenes=2\n").unwrap();
        assert_eq!((c.epochs, c.num_scenes), (3, 2));
        assert_eq!(c.t_regions, 4);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        for bad in ["learning_rate = 0.1", "epochs", "epochs = many", "epochs = 1\nepochs = 2", "epochs = 0"] {
            assert!(matches!(TrainConfig::parse(bad), Err(Error::Argument(_))), "{bad}");
        }
    }
}
