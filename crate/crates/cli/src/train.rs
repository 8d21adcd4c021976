//! Behaviour cloning with an optional alignment term.

use std::time::Instant;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sf_autograd::{AdamConfig, AdamState, BnMode, Tape};
use sf_core::{
    action_chunk, action_loss, align_loss, combine_losses, patchify, teacher_features, LossWeights, Projector,
    VlaParams,
};
use sf_scene::Dataset;

use crate::config::ExperimentConfig;
use crate::data::{check_compatible, eval_scenes};
use crate::eval::evaluate;
use crate::metrics::MetricsRow;

const PROJECTOR_SEED_SALT: u64 = 0x5f5f_0001;
const SAMPLER_SEED_SALT: u64 = 0x5a4d_0002;

/// One training timestep, preprocessed.
struct Example {
    patches: Vec<f64>,
    ids: Vec<usize>,
    chunk: Vec<f64>,
    targets: Option<Vec<f64>>,
}

pub struct TrainOutcome {
    pub params: VlaParams,
    pub projector: Option<Projector>,
    pub rows: Vec<MetricsRow>,
}

fn examples(cfg: &ExperimentConfig, ds: &Dataset, align: bool) -> Result<Vec<Example>> {
    let m = &cfg.model;
    let mut out = Vec::new();
    for e in &ds.episodes[..cfg.used_episodes()] {
        let actions: Vec<[f32; 4]> = e.steps.iter().map(|s| s.action).collect();
        let ids: Vec<usize> = e.instruction_ids.iter().map(|&i| i as usize).collect();
        for (t, step) in e.steps.iter().enumerate() {
            let targets = if align { Some(teacher_features(&step.views, m)?.targets) } else { None };
            out.push(Example {
                patches: patchify(&step.views, m)?,
                ids: ids.clone(),
                chunk: action_chunk(&actions, t, m.horizon),
                targets,
            });
        }
    }
    if out.is_empty() {
        bail!("no training steps in the dataset");
    }
    Ok(out)
}

/// Runs the full training loop. `on_row` sees each metrics row as soon as
/// it is produced.
pub fn train(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    run_id: &str,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(ds, cfg)?;
    let m = &cfg.model;
    let weights = LossWeights::new(cfg.alpha)?;
    let align = cfg.alpha > 0.0;
    let data = examples(cfg, ds, align)?;
    let scenes = eval_scenes(cfg, cfg.eval_trials)?;

    let mut params = VlaParams::init(m, cfg.seed)?;
    let mut projector = if align { Some(Projector::init(m, cfg.seed ^ PROJECTOR_SEED_SALT)?) } else { None };
    let hyper = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(&params.store, hyper);
    let mut proj_adam = projector.as_ref().map(|p| AdamState::new(&p.store, hyper));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SEED_SALT);

    let (b, n, d) = (cfg.batch_size, m.n_visual_tokens(), m.d_model);
    let start = Instant::now();
    let mut rows = Vec::new();
    let (mut sum_action, mut sum_align, mut sum_total, mut count) = (0.0, 0.0, 0.0, 0usize);
    for it in 1..=cfg.iterations {
        let picks: Vec<&Example> = (0..b).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let patches: Vec<f64> = picks.iter().flat_map(|e| e.patches.iter().copied()).collect();
        let ids: Vec<usize> = picks.iter().flat_map(|e| e.ids.iter().copied()).collect();
        let gt: Vec<f64> = picks.iter().flat_map(|e| e.chunk.iter().copied()).collect();

        let mut tape = Tape::new();
        let bound = tape.bind(&params.store, true);
        let out = params.run(&mut tape, &bound, &patches, &ids, b)?;
        let target = tape.constant(&[b, m.n_action_queries, m.action_dim], gt)?;
        let l_action = action_loss(&mut tape, out.actions, target)?;
        let mut l_align = None;
        let mut proj_bound = None;
        if let Some(proj) = projector.as_mut() {
            let tap = out.taps[m.aligned_layer - 1];
            let visual = tape.slice(tap, 1, 0, n)?;
            let visual = tape.reshape(visual, &[b * n, d])?;
            let pb = tape.bind(&proj.store, true);
            let projected = proj.project(&mut tape, &pb, visual, BnMode::Training)?;
            let targets: Vec<f64> =
                picks.iter().flat_map(|e| e.targets.as_ref().expect("teacher").iter().copied()).collect();
            l_align = Some(align_loss(&mut tape, projected, &targets)?);
            proj_bound = Some(pb);
        }
        let total = match combine_losses(&mut tape, l_action, l_align, weights) {
            Ok(t) => t,
            Err(e) => bail!("iteration {it}: {e}"),
        };
        sum_action += tape.item(l_action);
        sum_align += l_align.map_or(0.0, |g| tape.item(g));
        sum_total += tape.item(total);
        count += 1;
        tape.backward(total)?;
        adam.step(&mut params.store, &tape.grads_of(&bound))?;
        if let (Some(proj), Some(pa), Some(pb)) = (projector.as_mut(), proj_adam.as_mut(), proj_bound.as_ref()) {
            pa.step(&mut proj.store, &tape.grads_of(pb))?;
        }

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let success = evaluate(&params, &scenes, cfg.difficulty)?;
            let row = MetricsRow {
                run_id: run_id.to_string(),
                iteration: it,
                l_action: sum_action / count as f64,
                l_align: align.then(|| sum_align / count as f64),
                total_loss: sum_total / count as f64,
                eval_success_rate: success,
                probe_rmse: None,
                wall_ms: cfg.record_wall_time.then(|| start.elapsed().as_millis() as u64),
            };
            on_row(&row);
            rows.push(row);
            (sum_action, sum_align, sum_total, count) = (0.0, 0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome { params, projector, rows })
}
