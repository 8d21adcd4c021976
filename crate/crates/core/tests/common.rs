#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sf_core::ModelConfig;
use sf_scene::{gen_episode, Difficulty, Episode};

/// A 1-layer model on 8×8 images: 8 visual tokens, width 8.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        patch_size: 4,
        image_height: 8,
        image_width: 8,
        n_lang_tokens: 2,
        n_action_queries: 2,
        horizon: 2,
        aligned_layer: 1,
        d_teacher: 16,
        ..ModelConfig::default()
    }
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn episodes(n: u64, difficulty: Difficulty) -> Vec<Episode> {
    (0..n).map(|s| gen_episode(1000 + s, difficulty).unwrap()).collect()
}
