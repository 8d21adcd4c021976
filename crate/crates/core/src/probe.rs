//! Depth probes and representation-similarity diagnostics on frozen taps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sf_autograd::{AdamConfig, AdamState, BnMode, ParamStore, Tape};
use sf_scene::RenderOutput;

use crate::alignment::{patch_statistics, teacher_features, Projector};
use crate::error::{ModelError, Result};
use crate::model::{patchify, VlaParams};

pub const PROBE_HIDDEN: usize = 64;
pub const MIN_DIAGNOSTIC_SAMPLES: usize = 100;
const TAP_BATCH: usize = 64;

/// One observation: the views and the instruction ids.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub views: &'a [RenderOutput],
    pub instruction: &'a [u16],
}

/// Layer-`layer` visual-token activations, `[samples·N, d_model]`. Runs
/// the backbone without gradients.
pub fn visual_taps(params: &VlaParams, samples: &[Sample<'_>], layer: usize) -> Result<Vec<f64>> {
    let c = &params.config;
    if !(1..=c.n_layers).contains(&layer) {
        return Err(ModelError::Config(format!("layer {layer} outside 1..={}", c.n_layers)));
    }
    let (n, t, d) = (c.n_visual_tokens(), c.seq_len(), c.d_model);
    let mut out = Vec::with_capacity(samples.len() * n * d);
    for chunk in samples.chunks(TAP_BATCH) {
        let mut patches = Vec::new();
        let mut ids = Vec::new();
        for s in chunk {
            patches.extend(patchify(s.views, c)?);
            ids.extend(s.instruction.iter().map(|&i| i as usize));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&params.store, false);
        let fwd = params.run(&mut tape, &bound, &patches, &ids, chunk.len())?;
        let tap = tape.value(fwd.taps[layer - 1]);
        for b in 0..chunk.len() {
            out.extend_from_slice(&tap[b * t * d..(b * t + n) * d]);
        }
    }
    Ok(out)
}

/// Regression pairs of (feature row, mean foreground depth in metres).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSamples {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<f64>,
}

impl ProbeSamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps the patches with any foreground pixel. `features` holds one
    /// `dim`-wide row per patch, in the patch order of `samples`.
    pub fn from_rows(features: &[f64], dim: usize, samples: &[Sample<'_>], params: &VlaParams) -> Result<Self> {
        let mut out = Self { features: Vec::new(), dim, labels: Vec::new() };
        let mut row = 0;
        for s in samples {
            for stats in patch_statistics(s.views, &params.config)? {
                if stats[7] > 0.0 {
                    out.features.extend_from_slice(&features[row * dim..(row + 1) * dim]);
                    out.labels.push(stats[3]);
                }
                row += 1;
            }
        }
        if out.is_empty() {
            return Err(ModelError::NoForeground);
        }
        Ok(out)
    }

    /// Probe data from layer-`layer` taps of a frozen backbone.
    pub fn from_model(params: &VlaParams, samples: &[Sample<'_>], layer: usize) -> Result<Self> {
        let taps = visual_taps(params, samples, layer)?;
        Self::from_rows(&taps, params.config.d_model, samples, params)
    }

    pub fn label_std(&self) -> f64 {
        let n = self.len() as f64;
        let mean = self.labels.iter().sum::<f64>() / n;
        (self.labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-3, batch: 256 }
    }
}

/// Two-layer GELU MLP `dim → 64 → 1` regressing patch depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    pub store: ParamStore,
}

impl ProbeHead {
    fn init(dim: usize, label_mean: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let n1 = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, 1.0 / (PROBE_HIDDEN as f64).sqrt()).expect("positive std");
        store.add("probe/w1", &[dim, PROBE_HIDDEN], (0..dim * PROBE_HIDDEN).map(|_| n1.sample(rng)).collect())?;
        store.add("probe/b1", &[PROBE_HIDDEN], vec![0.0; PROBE_HIDDEN])?;
        store.add("probe/w2", &[PROBE_HIDDEN, 1], (0..PROBE_HIDDEN).map(|_| n2.sample(rng)).collect())?;
        store.add("probe/b2", &[1], vec![label_mean])?;
        Ok(Self { store })
    }

    fn graph(
        &self,
        tape: &mut Tape,
        rows: Vec<f64>,
        n: usize,
        dim: usize,
    ) -> Result<(sf_autograd::TensorId, sf_autograd::Bound)> {
        let bound = tape.bind(&self.store, true);
        let ids = bound.ids().to_vec();
        let x = tape.constant(&[n, dim], rows)?;
        let h = tape.matmul(x, ids[0])?;
        let h = tape.add(h, ids[1])?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, ids[2])?;
        let y = tape.add(h, ids[3])?;
        Ok((y, bound))
    }

    pub fn predict(&self, features: &[f64], dim: usize) -> Result<Vec<f64>> {
        let n = features.len() / dim;
        let mut tape = Tape::new();
        let (y, _) = self.graph(&mut tape, features.to_vec(), n, dim)?;
        Ok(tape.value(y).to_vec())
    }
}

/// Adam on mean squared error over random minibatches.
pub fn fit_probe(samples: &ProbeSamples, cfg: ProbeConfig, seed: u64) -> Result<ProbeHead> {
    if samples.is_empty() {
        return Err(ModelError::NoForeground);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = samples.labels.iter().sum::<f64>() / samples.len() as f64;
    let mut head = ProbeHead::init(samples.dim, mean, &mut rng)?;
    let mut adam = AdamState::new(&head.store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let (dim, batch) = (samples.dim, cfg.batch.min(samples.len()));
    for _ in 0..cfg.steps {
        let picks: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..samples.len())).collect();
        let rows: Vec<f64> =
            picks.iter().flat_map(|&i| samples.features[i * dim..(i + 1) * dim].iter().copied()).collect();
        let labels: Vec<f64> = picks.iter().map(|&i| samples.labels[i]).collect();
        let mut tape = Tape::new();
        let (y, bound) = head.graph(&mut tape, rows, batch, dim)?;
        let target = tape.constant(&[batch, 1], labels)?;
        let diff = tape.sub(y, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        tape.backward(loss)?;
        adam.step(&mut head.store, &tape.grads_of(&bound))?;
    }
    Ok(head)
}

pub fn probe_rmse_on(probe: &ProbeHead, samples: &ProbeSamples) -> Result<f64> {
    let pred = probe.predict(&samples.features, samples.dim)?;
    let mse = pred.iter().zip(&samples.labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / samples.len() as f64;
    Ok(mse.sqrt())
}

/// Trains a depth probe on frozen layer-`layer` taps.
pub fn train_probe(
    params: &VlaParams,
    samples: &[Sample<'_>],
    layer: usize,
    cfg: ProbeConfig,
    seed: u64,
) -> Result<ProbeHead> {
    fit_probe(&ProbeSamples::from_model(params, samples, layer)?, cfg, seed)
}

/// Foreground-patch depth RMSE of `probe` on held-out samples.
pub fn probe_rmse(probe: &ProbeHead, params: &VlaParams, samples: &[Sample<'_>], layer: usize) -> Result<f64> {
    probe_rmse_on(probe, &ProbeSamples::from_model(params, samples, layer)?)
}

/// Linear CKA: `‖YcᵀXc‖²_F / (‖XcᵀXc‖_F · ‖YcᵀYc‖_F)` on column-centred
/// `x` (`[n, dx]`) and `y` (`[n, dy]`).
pub fn linear_cka(x: &[f64], dx: usize, y: &[f64], dy: usize) -> f64 {
    let n = x.len() / dx;
    assert_eq!(y.len() / dy, n, "row counts differ");
    let center = |m: &[f64], d: usize| -> Vec<f64> {
        let mut mean = vec![0.0; d];
        for row in m.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v / n as f64);
        }
        m.chunks(d).flat_map(|row| row.iter().zip(&mean).map(|(v, a)| v - a).collect::<Vec<_>>()).collect()
    };
    let (xc, yc) = (center(x, dx), center(y, dy));
    let cross_sq = |a: &[f64], da: usize, b: &[f64], db: usize| -> f64 {
        let mut g = vec![0.0; da * db];
        for (ra, rb) in a.chunks(da).zip(b.chunks(db)) {
            for i in 0..da {
                let v = ra[i];
                g[i * db..(i + 1) * db].iter_mut().zip(rb).for_each(|(s, w)| *s += v * w);
            }
        }
        g.iter().map(|v| v * v).sum()
    };
    let num = cross_sq(&xc, dx, &yc, dy);
    let den = (cross_sq(&xc, dx, &xc, dx) * cross_sq(&yc, dy, &yc, dy)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Euclidean distance between the row means of two `[n, d]` matrices.
pub fn centroid_distance(a: &[f64], b: &[f64], d: usize) -> f64 {
    let n = (a.len() / d) as f64;
    let m = (b.len() / d) as f64;
    (0..d)
        .map(|j| {
            let ma = a.iter().skip(j).step_by(d).sum::<f64>() / n;
            let mb = b.iter().skip(j).step_by(d).sum::<f64>() / m;
            (ma - mb) * (ma - mb)
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticsReport {
    pub probe_rmse: f64,
    pub mean_cosine: f64,
    pub linear_cka: f64,
    pub centroid_distance: f64,
}

/// Probe error plus how closely layer-`layer` visual tokens match the
/// teacher: cosine of the projected tokens (frozen batch norm), CKA of the
/// raw taps, and the distance between projected and target centroids.
pub fn alignment_diagnostics(
    params: &VlaParams,
    projector: &mut Projector,
    probe: &ProbeHead,
    samples: &[Sample<'_>],
    layer: usize,
) -> Result<DiagnosticsReport> {
    let c = &params.config;
    let rows = samples.len() * c.n_visual_tokens();
    if rows < MIN_DIAGNOSTIC_SAMPLES {
        return Err(ModelError::TooFewSamples { needed: MIN_DIAGNOSTIC_SAMPLES, got: rows });
    }
    let taps = visual_taps(params, samples, layer)?;
    let mut targets = Vec::with_capacity(rows * c.d_teacher);
    for s in samples {
        targets.extend(teacher_features(s.views, c)?.targets);
    }
    let mut tape = Tape::new();
    let bound = tape.bind(&projector.store, false);
    let x = tape.constant(&[rows, c.d_model], taps.clone())?;
    let saved_mode = projector.bn.mode;
    let projected = projector.project(&mut tape, &bound, x, BnMode::Frozen);
    projector.bn.mode = saved_mode;
    let projected = tape.value(projected?).to_vec();
    let d = c.d_teacher;
    let mean_cosine = projected
        .chunks(d)
        .zip(targets.chunks(d))
        .map(|(p, t)| {
            let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            let np = p.iter().map(|a| a * a).sum::<f64>().sqrt().max(sf_autograd::EPS);
            let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt().max(sf_autograd::EPS);
            dot / (np * nt)
        })
        .sum::<f64>()
        / rows as f64;
    Ok(DiagnosticsReport {
        probe_rmse: probe_rmse_on(probe, &ProbeSamples::from_rows(&taps, c.d_model, samples, params)?)?,
        mean_cosine,
        linear_cka: linear_cka(&taps, c.d_model, &targets, d),
        centroid_distance: centroid_distance(&projected, &targets, d),
    })
}
