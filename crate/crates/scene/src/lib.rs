//! Synthetic multi-view reach task: sphere scenes, an analytic renderer
//! with exact depth and point maps, a scripted expert and the dataset file
//! format.

pub mod camera;
pub mod dataset;
mod error;
pub mod expert;
pub mod geometry;
pub mod render;
pub mod scene;

pub use camera::{Camera, IMAGE_SIZE};
pub use dataset::{read_dataset, write_dataset, Dataset};
pub use error::{DatasetError, SceneError};
pub use expert::{
    apply_action, expert_action, gen_episode, instruction_ids, render_views, rollout, Episode, ExpertPolicy,
    Observation, Policy, RolloutOutcome, Step, HORIZON, INSTRUCTION_LEN, MAX_STEP, SUCCESS_RADIUS, VOCAB_SIZE,
};
pub use geometry::Vec3;
pub use render::{render, render_with_effector, unproject, RenderOutput, BACKGROUND_DEPTH, BACKGROUND_POINT};
pub use scene::{gen_scene, Difficulty, SceneSpec, Sphere};
