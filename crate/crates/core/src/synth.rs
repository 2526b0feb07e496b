//! Synthetic paired tri-modal data generated from a shared low-dimensional latent.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::{Batch, PairedDataset, POSE_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub tactile_dim: usize,
    /// Feature frames per sample.
    pub frames: usize,
    /// Standard deviation of the map entries.
    pub map_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            visual_dim: 32,
            tactile_dim: 32,
            frames: 1,
            map_scale: 0.03,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Fixed random linear maps from the latent into every modality.
#[derive(Debug, Clone)]
pub struct LatentGenerator {
    cfg: LatentConfig,
    pose_map: Array2<f64>,
    visual_map: Array2<f64>,
    tactile_map: Array2<f64>,
    rng: ChaCha8Rng,
}

impl LatentGenerator {
    pub fn new(cfg: LatentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let entry = Normal::new(0.0, cfg.map_scale).expect("finite scale");
        let mut map = |rows: usize| Array2::from_shape_fn((rows, cfg.latent_dim), |_| entry.sample(&mut rng));
        let pose_map = map(POSE_DIM);
        let visual_map = map(cfg.visual_dim);
        let tactile_map = map(cfg.tactile_dim);
        Self {
            cfg,
            pose_map,
            visual_map,
            tactile_map,
            rng,
        }
    }

    /// `n` fresh pairs; every frame carries its own noise draw.
    pub fn sample(&mut self, n: usize) -> PairedDataset {
        let c = &self.cfg;
        let noise = Normal::new(0.0, c.noise).expect("finite noise");
        let rng = &mut self.rng;
        let latent = Array2::from_shape_fn((n, c.latent_dim), |_| StandardNormal.sample(rng));
        let pose = latent.dot(&self.pose_map.t()) + Array2::from_shape_fn((n, POSE_DIM), |_| noise.sample(rng));
        let mut stack = |map: &Array2<f64>| {
            let clean = latent.dot(&map.t());
            Array3::from_shape_fn((n, c.frames, map.nrows()), |(i, _, j)| clean[[i, j]] + noise.sample(rng))
        };
        let visual = stack(&self.visual_map);
        let tactile = stack(&self.tactile_map);
        PairedDataset::new(Batch::new(pose, visual, tactile).expect("consistent synthetic shapes"))
    }
}

/// Train and test splits sharing the same maps.
pub fn shared_latent_split(cfg: LatentConfig, n_train: usize, n_test: usize) -> (PairedDataset, PairedDataset) {
    let mut g = LatentGenerator::new(cfg);
    let train = g.sample(n_train);
    let test = g.sample(n_test);
    (train, test)
}
