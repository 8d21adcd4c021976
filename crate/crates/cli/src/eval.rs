use sf_core::{patchify, ModelError, VlaParams};
use sf_scene::{rollout, Difficulty, Observation, Policy, RolloutOutcome, SceneSpec};

/// A backbone acting from views and instruction only.
pub struct VlaPolicy<'a> {
    pub params: &'a VlaParams,
}

impl Policy for VlaPolicy<'_> {
    type Error = ModelError;

    fn act(&mut self, batch: &[Observation<'_>]) -> Result<Vec<[f64; 4]>, ModelError> {
        let mut patches = Vec::new();
        let mut ids = Vec::new();
        for o in batch {
            patches.extend(patchify(o.views, &self.params.config)?);
            ids.extend(o.instruction.iter().map(|&i| i as usize));
        }
        let out = self.params.predict_batch(&patches, &ids, batch.len())?;
        Ok(out.into_iter().map(|a| [a[0], a[1], a[2], a[3]]).collect())
    }
}

pub fn success_rate(outcomes: &[RolloutOutcome]) -> f64 {
    outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len().max(1) as f64
}

/// Closed-loop success rate on `scenes`.
pub fn evaluate(params: &VlaParams, scenes: &[SceneSpec], difficulty: Difficulty) -> Result<f64, ModelError> {
    Ok(success_rate(&rollout(&mut VlaPolicy { params }, scenes, difficulty)?))
}
