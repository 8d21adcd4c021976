//! Geometric teacher targets, the batch-norm + MLP projector and the
//! alignment objective.

use std::cell::Cell;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sf_autograd::{batch_norm, BatchNormState, BnMode, Bound, ParamId, ParamStore, Tape, TensorId};
use sf_scene::RenderOutput;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};

/// Raw statistics per patch: mean world point (3), mean camera depth,
/// mean surface normal (3), foreground fraction.
pub const RAW_STATS: usize = 8;
pub const PROJECTOR_HIDDEN: usize = 128;
pub const BN_MOMENTUM: f64 = 0.1;
/// Neighbouring pixels further apart than this do not form a surface patch.
pub const NORMAL_MAX_GAP: f64 = 0.05;

thread_local! {
    static TEACHER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`teacher_features`] evaluations made on the current thread.
pub fn teacher_calls() -> u64 {
    TEACHER_CALLS.with(Cell::get)
}

/// Fixed sinusoidal table, `E[i,2j] = s·sin(i / 10000^(2j/d))` and
/// `E[i,2j+1] = s·cos(·)`, row-major `[n, d]`.
pub fn positional_embedding(n: usize, d: usize, scale: f64) -> Vec<f64> {
    let mut e = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d / 2 {
            let angle = i as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            e[i * d + 2 * j] = scale * angle.sin();
            e[i * d + 2 * j + 1] = scale * angle.cos();
        }
    }
    e
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures {
    /// `[N, d_teacher]`: unit-norm geometric embedding plus `E`.
    pub targets: Vec<f64>,
    pub raw: Vec<[f64; RAW_STATS]>,
    pub d_teacher: usize,
}

impl TeacherFeatures {
    pub fn rows(&self) -> usize {
        self.raw.len()
    }

    pub fn mean_depth(&self, token: usize) -> f64 {
        self.raw[token][3]
    }

    pub fn foreground_fraction(&self, token: usize) -> f64 {
        self.raw[token][7]
    }
}

fn pixel_normal(view: &RenderOutput, r: usize, c: usize) -> Option<[f64; 3]> {
    let (h, w) = (view.height, view.width);
    let p = |r: usize, c: usize| -> [f64; 3] { view.point(r * w + c).map(f64::from) };
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let len = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let centre = p(r, c);
    let usable = |rr: usize, cc: usize| view.mask[rr * w + cc] && len(sub(p(rr, cc), centre)) < NORMAL_MAX_GAP;
    // differences always point right (dx) and down (dy) in the image
    let dx = if c + 1 < w && usable(r, c + 1) {
        sub(p(r, c + 1), centre)
    } else if c > 0 && usable(r, c - 1) {
        sub(centre, p(r, c - 1))
    } else {
        return None;
    };
    let dy = if r + 1 < h && usable(r + 1, c) {
        sub(p(r + 1, c), centre)
    } else if r > 0 && usable(r - 1, c) {
        sub(centre, p(r - 1, c))
    } else {
        return None;
    };
    // right × down points away from the camera, so dy × dx faces it
    let n = [dy[1] * dx[2] - dy[2] * dx[1], dy[2] * dx[0] - dy[0] * dx[2], dy[0] * dx[1] - dy[1] * dx[0]];
    let l = len(n);
    (l > 0.0).then(|| [n[0] / l, n[1] / l, n[2] / l])
}

/// Per-patch geometry over the same grid as [`crate::patchify`].
pub fn patch_statistics(views: &[RenderOutput], config: &ModelConfig) -> Result<Vec<[f64; RAW_STATS]>> {
    if views.len() != config.n_views {
        return Err(ModelError::Dimension {
            what: "teacher view count",
            expected: config.n_views.to_string(),
            got: views.len().to_string(),
        });
    }
    let p = config.patch_size;
    let mut out = Vec::with_capacity(config.n_visual_tokens());
    for v in views {
        if v.height != config.image_height || v.width != config.image_width {
            return Err(ModelError::Dimension {
                what: "teacher patch grid",
                expected: format!("{}x{}", config.image_height, config.image_width),
                got: format!("{}x{}", v.height, v.width),
            });
        }
        for pr in 0..v.height / p {
            for pc in 0..v.width / p {
                let mut s = [0.0; RAW_STATS];
                let (mut fg, mut with_normal) = (0usize, 0usize);
                let mut normal = [0.0; 3];
                for r in pr * p..(pr + 1) * p {
                    for c in pc * p..(pc + 1) * p {
                        let idx = r * v.width + c;
                        if !v.mask[idx] {
                            continue;
                        }
                        fg += 1;
                        let pt = v.point(idx);
                        for k in 0..3 {
                            s[k] += pt[k] as f64;
                        }
                        s[3] += v.depth[idx] as f64;
                        if let Some(n) = pixel_normal(v, r, c) {
                            with_normal += 1;
                            for k in 0..3 {
                                normal[k] += n[k];
                            }
                        }
                    }
                }
                if fg > 0 {
                    for v in &mut s[..4] {
                        *v /= fg as f64;
                    }
                }
                if with_normal > 0 {
                    for k in 0..3 {
                        s[4 + k] = normal[k] / with_normal as f64;
                    }
                }
                s[7] = fg as f64 / (p * p) as f64;
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// `[sin(2^k π v), cos(2^k π v)]` for each stat and `k < d/(2·RAW_STATS)`.
pub fn fourier_embed(raw: &[f64; RAW_STATS], d_teacher: usize) -> Vec<f64> {
    let freqs = d_teacher / (2 * RAW_STATS);
    let mut out = Vec::with_capacity(d_teacher);
    for &v in raw {
        for k in 0..freqs {
            let a = (1u64 << k) as f64 * PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Alignment targets for one observation.
pub fn teacher_features(views: &[RenderOutput], config: &ModelConfig) -> Result<TeacherFeatures> {
    TEACHER_CALLS.with(|c| c.set(c.get() + 1));
    let d = config.d_teacher;
    if !d.is_multiple_of(2 * RAW_STATS) {
        return Err(ModelError::Config(format!("d_teacher {d} must be a multiple of {}", 2 * RAW_STATS)));
    }
    let raw = patch_statistics(views, config)?;
    let e = positional_embedding(raw.len(), d, config.pos_embed_scale);
    let mut targets = Vec::with_capacity(raw.len() * d);
    for (i, stats) in raw.iter().enumerate() {
        let f = fourier_embed(stats, d);
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        targets.extend(f.iter().zip(&e[i * d..(i + 1) * d]).map(|(x, p)| x / norm + p));
    }
    Ok(TeacherFeatures { targets, raw, d_teacher: d })
}

/// Γ (batch norm over `d_model` features) followed by a two-layer GELU MLP
/// into teacher space. Used in training only.
#[derive(Clone, Debug)]
pub struct Projector {
    pub store: ParamStore,
    pub bn: BatchNormState,
    gamma: ParamId,
    beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub const PROJECTOR_PREFIX: &str = "sf/";

fn projector_specs(c: &ModelConfig) -> [(&'static str, Vec<usize>); 6] {
    [
        ("sf/bn.gamma", vec![c.d_model]),
        ("sf/bn.beta", vec![c.d_model]),
        ("sf/mlp.w1", vec![c.d_model, PROJECTOR_HIDDEN]),
        ("sf/mlp.b1", vec![PROJECTOR_HIDDEN]),
        ("sf/mlp.w2", vec![PROJECTOR_HIDDEN, c.d_teacher]),
        ("sf/mlp.b2", vec![c.d_teacher]),
    ]
}

impl Projector {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in projector_specs(config) {
            let n: usize = shape.iter().product();
            let data = match shape[..] {
                [fan_in, _] => {
                    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                _ if name.ends_with("gamma") => vec![1.0; n],
                _ => vec![0.0; n],
            };
            store.add(name, &shape, data)?;
        }
        Self::from_parts(config, store, BatchNormState::new(config.d_model, BN_MOMENTUM))
    }

    pub fn from_parts(config: &ModelConfig, store: ParamStore, bn: BatchNormState) -> Result<Self> {
        let specs = projector_specs(config);
        let find = |i: usize| -> Result<ParamId> {
            let (name, shape) = &specs[i];
            let id = store.find(name).ok_or_else(|| ModelError::Checkpoint(format!("missing parameter `{name}`")))?;
            if &store.get(id).shape != shape {
                return Err(ModelError::Checkpoint(format!("parameter `{name}` has the wrong shape")));
            }
            Ok(id)
        };
        if store.len() != specs.len() || bn.features() != config.d_model {
            return Err(ModelError::Checkpoint("projector does not match the model config".into()));
        }
        Ok(Self { gamma: find(0)?, beta: find(1)?, w1: find(2)?, b1: find(3)?, w2: find(4)?, b2: find(5)?, store, bn })
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    /// `MLP(Γ(x))` for `visual` of shape `[rows, d_model]`; `bound` must come
    /// from binding `self.store`. Batch statistics pool over all rows in
    /// training mode.
    pub fn project(&mut self, tape: &mut Tape, bound: &Bound, visual: TensorId, mode: BnMode) -> Result<TensorId> {
        self.bn.mode = mode;
        let x = batch_norm(tape, visual, bound[self.gamma], bound[self.beta], &mut self.bn)?;
        let h = tape.matmul(x, bound[self.w1])?;
        let h = tape.add(h, bound[self.b1])?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, bound[self.w2])?;
        Ok(tape.add(h, bound[self.b2])?)
    }
}

/// `−mean_i cos(projected_i, target_i)`. Targets enter as constants.
pub fn align_loss(tape: &mut Tape, projected: TensorId, targets: &[f64]) -> Result<TensorId> {
    let shape = tape.shape(projected).to_vec();
    if shape.len() != 2 || targets.len() != shape[0] * shape[1] {
        return Err(ModelError::Dimension {
            what: "alignment rows",
            expected: format!("{shape:?}"),
            got: format!("{} target values", targets.len()),
        });
    }
    let t = tape.constant(&shape, targets.to_vec())?;
    let cos = tape.cosine_rows(projected, t)?;
    let m = tape.mean(cos);
    Ok(tape.scale(m, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(ModelError::Config(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

/// `l_action + α·l_align`.
pub fn total_loss(l_action: f64, l_align: f64, weights: LossWeights) -> Result<f64> {
    if !l_action.is_finite() {
        return Err(ModelError::NonFiniteLoss("action"));
    }
    if !l_align.is_finite() {
        return Err(ModelError::NonFiniteLoss("alignment"));
    }
    if weights.alpha == 0.0 {
        return Ok(l_action);
    }
    Ok(l_action + weights.alpha * l_align)
}

/// Tape form of [`total_loss`]; without an alignment term the action loss
/// is returned unchanged.
pub fn combine_losses(
    tape: &mut Tape,
    l_action: TensorId,
    l_align: Option<TensorId>,
    weights: LossWeights,
) -> Result<TensorId> {
    let a = tape.item(l_action);
    let g = l_align.map_or(0.0, |id| tape.item(id));
    total_loss(a, g, weights)?;
    match l_align {
        Some(g) if weights.alpha != 0.0 => {
            let s = tape.scale(g, weights.alpha);
            Ok(tape.add(l_action, s)?)
        }
        _ => Ok(l_action),
    }
}
