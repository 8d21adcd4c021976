//! Scripted reach expert, episode generation and closed-loop rollouts.

use crate::error::SceneError;
use crate::geometry::Vec3;
use crate::render::{render_with_effector, RenderOutput};
use crate::scene::{gen_scene, Difficulty, SceneSpec};

pub const MAX_STEP: f64 = 0.10;
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const HORIZON: usize = 20;
pub const INSTRUCTION_LEN: usize = 4;
pub const VOCAB_SIZE: usize = 16;

/// Token ids: 1 "reach", 2 "the", 3 "sphere", 4 + colour id for the colour word.
pub fn instruction_ids(color_id: u8) -> Vec<u16> {
    vec![1, 2, 4 + color_id as u16, 3]
}

/// Δ is the offset to the target clipped to `MAX_STEP`; the gripper closes
/// once the effector is within `SUCCESS_RADIUS`.
pub fn expert_action(scene: &SceneSpec, ee_pos: [f32; 3]) -> [f32; 4] {
    let offset = scene.target().center - Vec3::from_f32(ee_pos);
    let dist = offset.norm();
    let delta = if dist > MAX_STEP { offset * (MAX_STEP / dist) } else { offset };
    let gripper = if dist < SUCCESS_RADIUS { 1.0 } else { 0.0 };
    let d = delta.to_f32();
    [d[0], d[1], d[2], gripper]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub views: Vec<RenderOutput>,
    pub ee_pos: [f32; 3],
    pub action: [f32; 4],
}

/// A demonstration. `scene` is not part of the dataset file and is `None`
/// for episodes read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scene: Option<SceneSpec>,
    pub instruction_ids: Vec<u16>,
    pub steps: Vec<Step>,
    pub success: bool,
}

pub fn render_views(scene: &SceneSpec, difficulty: Difficulty, ee_pos: [f32; 3]) -> Vec<RenderOutput> {
    let ee = Vec3::from_f32(ee_pos);
    match difficulty {
        Difficulty::TwoView => difficulty.cameras().iter().map(|c| render_with_effector(scene, c, ee)).collect(),
        Difficulty::MonoAmbiguous => {
            let view = render_with_effector(scene, &difficulty.cameras()[0], ee);
            vec![view.clone(), view]
        }
    }
}

/// Applies an action: Δ is norm-clipped to `MAX_STEP`, the result clamped to
/// the unit workspace, all in f32.
pub fn apply_action(ee_pos: [f32; 3], action: [f32; 4]) -> [f32; 3] {
    let norm = (action[0] as f64).hypot(action[1] as f64).hypot(action[2] as f64);
    // tolerance keeps f32-rounded expert steps unscaled
    let s = if norm > MAX_STEP * (1.0 + 1e-6) { (MAX_STEP / norm) as f32 } else { 1.0 };
    let mut next = [0.0f32; 3];
    for k in 0..3 {
        next[k] = (ee_pos[k] + action[k] * s).clamp(0.0, 1.0);
    }
    next
}

pub fn is_success(scene: &SceneSpec, ee_pos: [f32; 3]) -> bool {
    (Vec3::from_f32(ee_pos) - scene.target().center).norm() < SUCCESS_RADIUS
}

/// Rolls the expert from the scene's start until the gripper closes or the
/// horizon runs out.
pub fn gen_episode(seed: u64, difficulty: Difficulty) -> Result<Episode, SceneError> {
    let scene = gen_scene(seed, difficulty)?;
    let mut ee = scene.effector_start.to_f32();
    let mut steps = Vec::new();
    let mut success = false;
    for _ in 0..HORIZON {
        let action = expert_action(&scene, ee);
        steps.push(Step { views: render_views(&scene, difficulty, ee), ee_pos: ee, action });
        ee = apply_action(ee, action);
        if action[3] >= 0.5 {
            success = is_success(&scene, ee);
            break;
        }
    }
    Ok(Episode { instruction_ids: instruction_ids(scene.target().color_id), scene: Some(scene), steps, success })
}

/// What a policy sees at one control step. `scene` and `ee_pos` are
/// privileged state for scripted policies; learned policies must use
/// `views` and `instruction` only.
pub struct Observation<'a> {
    pub scene: &'a SceneSpec,
    pub ee_pos: [f32; 3],
    pub views: &'a [RenderOutput],
    pub instruction: &'a [u16],
}

/// A batched controller mapping observations to `[Δx, Δy, Δz, gripper]`.
pub trait Policy {
    type Error;

    fn act(&mut self, batch: &[Observation<'_>]) -> Result<Vec<[f64; 4]>, Self::Error>;
}

/// The scripted expert as a policy.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    type Error = std::convert::Infallible;

    fn act(&mut self, batch: &[Observation<'_>]) -> Result<Vec<[f64; 4]>, Self::Error> {
        Ok(batch.iter().map(|o| expert_action(o.scene, o.ee_pos).map(f64::from)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOutcome {
    pub success: bool,
    pub steps: usize,
    pub final_distance: f64,
}

/// Closed-loop rollouts of all `scenes` in lockstep. Each step renders the
/// current views, queries the policy once for every unfinished trial and
/// executes the returned action.
pub fn rollout<P: Policy>(
    policy: &mut P,
    scenes: &[SceneSpec],
    difficulty: Difficulty,
) -> Result<Vec<RolloutOutcome>, P::Error> {
    let instructions: Vec<Vec<u16>> = scenes.iter().map(|s| instruction_ids(s.target().color_id)).collect();
    let mut ee: Vec<[f32; 3]> = scenes.iter().map(|s| s.effector_start.to_f32()).collect();
    let mut done: Vec<Option<RolloutOutcome>> = vec![None; scenes.len()];
    for step in 0..HORIZON {
        let active: Vec<usize> = (0..scenes.len()).filter(|&i| done[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let views: Vec<Vec<RenderOutput>> =
            active.iter().map(|&i| render_views(&scenes[i], difficulty, ee[i])).collect();
        let obs: Vec<Observation<'_>> = active
            .iter()
            .zip(&views)
            .map(|(&i, v)| Observation { scene: &scenes[i], ee_pos: ee[i], views: v, instruction: &instructions[i] })
            .collect();
        let actions = policy.act(&obs)?;
        for (&i, a) in active.iter().zip(actions) {
            let a32 = [a[0] as f32, a[1] as f32, a[2] as f32, a[3] as f32];
            ee[i] = apply_action(ee[i], a32);
            let dist = (Vec3::from_f32(ee[i]) - scenes[i].target().center).norm();
            if a32[3] >= 0.5 {
                done[i] =
                    Some(RolloutOutcome { success: dist < SUCCESS_RADIUS, steps: step + 1, final_distance: dist });
            } else if step + 1 == HORIZON {
                done[i] = Some(RolloutOutcome { success: false, steps: HORIZON, final_distance: dist });
            }
        }
    }
    Ok(done.into_iter().map(|d| d.expect("every trial ends by the horizon")).collect())
}
