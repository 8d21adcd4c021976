use anyhow::{bail, Context, Result};
use sf_core::ModelConfig;
use sf_scene::{gen_episode, gen_scene, Dataset, SceneSpec};

use crate::config::ExperimentConfig;

/// Expert demonstrations for training episodes `0..n_train_episodes`.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let episodes = (0..cfg.n_train_episodes)
        .map(|i| gen_episode(cfg.train_seed(i), cfg.difficulty).with_context(|| format!("episode {i}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(cfg.difficulty, episodes)?)
}

pub fn expert_success_rate(ds: &Dataset) -> f64 {
    ds.episodes.iter().filter(|e| e.success).count() as f64 / ds.episodes.len().max(1) as f64
}

/// Held-out scenes for closed-loop evaluation.
pub fn eval_scenes(cfg: &ExperimentConfig, trials: usize) -> Result<Vec<SceneSpec>> {
    (0..trials)
        .map(|j| gen_scene(cfg.eval_seed(j), cfg.difficulty).with_context(|| format!("eval scene {j}")))
        .collect()
}

pub fn check_compatible(ds: &Dataset, cfg: &ExperimentConfig) -> Result<()> {
    let m: &ModelConfig = &cfg.model;
    if ds.difficulty != cfg.difficulty {
        bail!("dataset difficulty {} does not match config {}", ds.difficulty.name(), cfg.difficulty.name());
    }
    if (ds.height, ds.width, ds.n_views) != (m.image_height, m.image_width, m.n_views) {
        bail!(
            "dataset images are {}x{} with {} views, config expects {}x{} with {}",
            ds.height,
            ds.width,
            ds.n_views,
            m.image_height,
            m.image_width,
            m.n_views
        );
    }
    if ds.episodes.len() < cfg.n_train_episodes {
        bail!("dataset has {} episodes, config asks for {}", ds.episodes.len(), cfg.n_train_episodes);
    }
    Ok(())
}
