use std::fmt::Write as _;

use crate::error::{ModelError, Result};

/// Architecture and token layout of the policy transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub n_views: usize,
    pub vocab: usize,
    /// M, language tokens per instruction.
    pub n_lang_tokens: usize,
    /// K, action-query tokens; query k predicts the action k steps ahead.
    pub n_action_queries: usize,
    pub action_dim: usize,
    /// H_a, length of the predicted action chunk.
    pub horizon: usize,
    /// 1-based block whose output visual tokens are aligned.
    pub aligned_layer: usize,
    pub d_teacher: usize,
    /// Amplitude of the fixed positional table added to teacher targets.
    pub pos_embed_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            patch_size: 8,
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            n_views: 2,
            vocab: 16,
            n_lang_tokens: 4,
            n_action_queries: 4,
            action_dim: 4,
            horizon: 4,
            aligned_layer: 4,
            d_teacher: 64,
            pos_embed_scale: 0.1,
        }
    }
}

pub const MODEL_KEYS: [&str; 16] = [
    "d_model",
    "n_layers",
    "n_heads",
    "patch_size",
    "image_height",
    "image_width",
    "image_channels",
    "n_views",
    "vocab",
    "n_lang_tokens",
    "n_action_queries",
    "action_dim",
    "horizon",
    "aligned_layer",
    "d_teacher",
    "pos_embed_scale",
];

fn parse_count(key: &str, value: &str) -> Result<usize> {
    let v: usize = value
        .trim()
        .parse()
        .map_err(|_| ModelError::Config(format!("{key}: `{value}` is not a non-negative integer")))?;
    if v == 0 {
        return Err(ModelError::Config(format!("{key} must be positive")));
    }
    Ok(v)
}

impl ModelConfig {
    pub fn patches_per_view(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// N.
    pub fn n_visual_tokens(&self) -> usize {
        self.n_views * self.patches_per_view()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    /// N + M + K.
    pub fn seq_len(&self) -> usize {
        self.n_visual_tokens() + self.n_lang_tokens + self.n_action_queries
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image {}x{} not divisible by patch_size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if !(1..=self.n_layers).contains(&self.aligned_layer) {
            return fail(format!("aligned_layer {} outside 1..={}", self.aligned_layer, self.n_layers));
        }
        if self.n_action_queries != self.horizon {
            return fail(format!("n_action_queries {} must equal horizon {}", self.n_action_queries, self.horizon));
        }
        if !self.d_teacher.is_multiple_of(2) {
            return fail(format!("d_teacher {} must be even", self.d_teacher));
        }
        if !self.pos_embed_scale.is_finite() || self.pos_embed_scale < 0.0 {
            return fail(format!("pos_embed_scale {} must be finite and non-negative", self.pos_embed_scale));
        }
        let counts = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.patch_size,
            self.image_height,
            self.image_width,
            self.image_channels,
            self.n_views,
            self.vocab,
            self.n_lang_tokens,
            self.n_action_queries,
            self.action_dim,
            self.horizon,
            self.d_teacher,
        ];
        if counts.contains(&0) {
            return fail("all sizes must be positive".into());
        }
        Ok(())
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// that are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let slot = match key {
            "d_model" => &mut self.d_model,
            "n_layers" => &mut self.n_layers,
            "n_heads" => &mut self.n_heads,
            "patch_size" => &mut self.patch_size,
            "image_height" => &mut self.image_height,
            "image_width" => &mut self.image_width,
            "image_channels" => &mut self.image_channels,
            "n_views" => &mut self.n_views,
            "vocab" => &mut self.vocab,
            "n_lang_tokens" => &mut self.n_lang_tokens,
            "n_action_queries" => &mut self.n_action_queries,
            "action_dim" => &mut self.action_dim,
            "horizon" => &mut self.horizon,
            "aligned_layer" => &mut self.aligned_layer,
            "d_teacher" => &mut self.d_teacher,
            "pos_embed_scale" => {
                self.pos_embed_scale = value
                    .trim()
                    .parse()
                    .map_err(|_| ModelError::Config(format!("pos_embed_scale: `{value}` is not a number")))?;
                return Ok(true);
            }
            _ => return Ok(false),
        };
        *slot = parse_count(key, value)?;
        Ok(true)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d_model" => self.d_model.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "image_height" => self.image_height.to_string(),
            "image_width" => self.image_width.to_string(),
            "image_channels" => self.image_channels.to_string(),
            "n_views" => self.n_views.to_string(),
            "vocab" => self.vocab.to_string(),
            "n_lang_tokens" => self.n_lang_tokens.to_string(),
            "n_action_queries" => self.n_action_queries.to_string(),
            "action_dim" => self.action_dim.to_string(),
            "horizon" => self.horizon.to_string(),
            "aligned_layer" => self.aligned_layer.to_string(),
            "d_teacher" => self.d_teacher.to_string(),
            "pos_embed_scale" => self.pos_embed_scale.to_string(),
            _ => return None,
        })
    }

    /// `key=value` lines in [`MODEL_KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in MODEL_KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) =
                line.split_once('=').ok_or_else(|| ModelError::Config(format!("expected key=value, got `{line}`")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(ModelError::Config(format!("unknown key `{}`", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_visual_tokens(), 32);
        assert_eq!(c.patch_pixels(), 192);
        assert_eq!(c.seq_len(), 40);
    }

    #[test]
    fn text_round_trip() {
        let c = ModelConfig { aligned_layer: 2, pos_embed_scale: 0.25, ..ModelConfig::default() };
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        let c = ModelConfig { n_heads: 5, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_text("aligned_layer=7").is_err());
        assert!(ModelConfig::from_text("colour=3").is_err());
        assert!(ModelConfig::from_text("d_model=-1").is_err());
    }
}
