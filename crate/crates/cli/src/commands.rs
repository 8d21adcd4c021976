//! The `sf` subcommands as library functions.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use sf_core::{
    alignment_diagnostics, fit_probe, probe_rmse_on, Checkpoint, DiagnosticsReport, ProbeConfig, ProbeSamples, Sample,
    VlaParams,
};
use sf_scene::{gen_episode, gen_scene, read_dataset, rollout, write_dataset, Dataset, Difficulty, Policy, SceneSpec};

use crate::config::ExperimentConfig;
use crate::data::{expert_success_rate, generate_dataset};
use crate::eval::{success_rate, VlaPolicy};
use crate::metrics::{metrics_csv, summary_csv, write_file, MetricsRow, SummaryRow};
use crate::train::{train, TrainOutcome};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.sfck";
pub const SUMMARY_FILE: &str = "summary.csv";
/// Episodes (from held-out seeds) used for depth probing inside ablations.
pub const PROBE_EPISODES: usize = 100;
/// Share of probe episodes used to fit the probe; the rest measure it.
pub const PROBE_TRAIN_SHARE: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenReport {
    pub episodes: usize,
    pub expert_success: f64,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenReport> {
    let ds = generate_dataset(cfg)?;
    write_dataset(&ds, out)?;
    Ok(GenReport { episodes: ds.episodes.len(), expert_success: expert_success_rate(&ds) })
}

/// Trains and writes `config.txt`, `metrics.csv` and `checkpoint.sfck`
/// into `out_dir`.
pub fn run_training(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    out_dir: &Path,
    run_id: &str,
    on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let outcome = train(cfg, ds, run_id, on_row)?;
    write_file(&out_dir.join(METRICS_FILE), &metrics_csv(&outcome.rows))?;
    let ckpt = Checkpoint { params: outcome.params.clone(), projector: outcome.projector.clone() };
    ckpt.save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}

pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let ds = read_dataset(data)?;
    let run_id = out_dir.file_name().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    run_training(cfg, &ds, out_dir, &run_id, |r| {
        eprintln!("iteration {} l_action {:.5} success {:.2}", r.iteration, r.l_action, r.eval_success_rate)
    })
}

/// Fresh evaluation scenes for `sf eval`, keyed by `seed`.
pub fn fresh_scenes(trials: usize, seed: u64, difficulty: Difficulty) -> Result<Vec<SceneSpec>> {
    let base = (1u64 << 41).wrapping_add(seed.wrapping_mul(1_000_003));
    (0..trials)
        .map(|j| gen_scene(base.wrapping_add(j as u64), difficulty).with_context(|| format!("scene {j}")))
        .collect()
}

pub fn eval_policy<P: Policy>(policy: &mut P, trials: usize, seed: u64, difficulty: Difficulty) -> Result<f64>
where
    P::Error: std::error::Error + Send + Sync + 'static,
{
    let scenes = fresh_scenes(trials, seed, difficulty)?;
    Ok(success_rate(&rollout(policy, &scenes, difficulty)?))
}

pub fn cmd_eval(ckpt: &Path, trials: usize, seed: u64, difficulty: Difficulty) -> Result<f64> {
    let ckpt = Checkpoint::load(ckpt)?;
    eval_policy(&mut VlaPolicy { params: &ckpt.params }, trials, seed, difficulty)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Alpha,
    Layer,
    Iterations,
    DataFraction,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => Self::Alpha,
            "layer" => Self::Layer,
            "iterations" => Self::Iterations,
            "data_fraction" => Self::DataFraction,
            _ => bail!("unknown axis `{s}`; expected alpha, layer, iterations or data_fraction"),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Layer => "layer",
            Self::Iterations => "iterations",
            Self::DataFraction => "data_fraction",
        }
    }

    /// `base` with this axis set to `value`, validated.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let whole = || -> Result<usize> {
            if value.fract() != 0.0 || value < 1.0 {
                bail!("{} needs a positive integer, got {value}", self.name());
            }
            Ok(value as usize)
        };
        match self {
            Self::Alpha => cfg.alpha = value,
            Self::Layer => cfg.model.aligned_layer = whole()?,
            Self::Iterations => cfg.iterations = whole()?,
            Self::DataFraction => cfg.data_fraction = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// First evaluation iteration whose success rate reaches `threshold`.
pub fn iterations_to_threshold(rows: &[MetricsRow], threshold: f64) -> Option<usize> {
    rows.iter().find(|r| r.eval_success_rate >= threshold).map(|r| r.iteration)
}

/// Held-out probe episodes split into (fit, measure) halves.
pub fn probe_split(cfg: &ExperimentConfig, episodes: usize) -> Result<(Dataset, Dataset)> {
    let eps = (0..episodes)
        .map(|j| gen_episode(cfg.eval_seed(j), cfg.difficulty).with_context(|| format!("probe episode {j}")))
        .collect::<Result<Vec<_>>>()?;
    split_dataset(Dataset::new(cfg.difficulty, eps)?)
}

pub fn split_dataset(ds: Dataset) -> Result<(Dataset, Dataset)> {
    let cut = ((ds.episodes.len() as f64 * PROBE_TRAIN_SHARE).round() as usize).clamp(1, ds.episodes.len() - 1);
    let mut fit = ds.clone();
    let measure_eps = fit.episodes.split_off(cut);
    let measure = Dataset { episodes: measure_eps, ..ds };
    Ok((fit, measure))
}

pub fn samples(ds: &Dataset) -> Vec<Sample<'_>> {
    ds.episodes
        .iter()
        .flat_map(|e| e.steps.iter().map(move |s| Sample { views: &s.views, instruction: &e.instruction_ids }))
        .collect()
}

/// Fits a depth probe on `fit` and measures it on `measure`.
pub fn probe_model(
    params: &VlaParams,
    fit: &Dataset,
    measure: &Dataset,
    layer: usize,
    cfg: ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let train = ProbeSamples::from_model(params, &samples(fit), layer)?;
    let probe = fit_probe(&train, cfg, seed)?;
    Ok(probe_rmse_on(&probe, &ProbeSamples::from_model(params, &samples(measure), layer)?)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rmse: f64,
    pub label_std: f64,
    pub diagnostics: Option<DiagnosticsReport>,
}

/// Probes a checkpoint on a dataset split into fit and measure episodes.
pub fn cmd_probe(ckpt: &Path, data: &Path, layer: usize, steps: usize, seed: u64) -> Result<ProbeReport> {
    let mut ckpt = Checkpoint::load(ckpt)?;
    let (fit, measure) = split_dataset(read_dataset(data)?)?;
    let cfg = ProbeConfig { steps, ..ProbeConfig::default() };
    let params = &ckpt.params;
    let probe = fit_probe(&ProbeSamples::from_model(params, &samples(&fit), layer)?, cfg, seed)?;
    let eval = ProbeSamples::from_model(params, &samples(&measure), layer)?;
    let rmse = probe_rmse_on(&probe, &eval)?;
    let diagnostics = match ckpt.projector.as_mut() {
        Some(proj) => Some(alignment_diagnostics(params, proj, &probe, &samples(&measure), layer)?),
        None => None,
    };
    Ok(ProbeReport { rmse, label_std: eval.label_std(), diagnostics })
}

/// A finished run and its depth-probe RMSE.
pub type RunResult = Result<(TrainOutcome, f64)>;

pub struct AblationRun {
    pub value: f64,
    pub result: RunResult,
}

fn fmt_value(v: f64) -> String {
    crate::metrics::fmt_g6(v)
}

/// One train + eval + probe run per value, in `out_dir/<axis>_<value>`.
/// Runs share the dataset and evaluation scenes but no mutable state; a
/// failed run is reported without stopping the others.
pub fn run_ablation(
    base: &ExperimentConfig,
    ds: &Dataset,
    axis: AblationAxis,
    values: &[f64],
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<AblationRun>> {
    let configs: Vec<Result<ExperimentConfig>> = values.iter().map(|&v| axis.apply(base, v)).collect();
    let (probe_fit, probe_measure) = probe_split(base, PROBE_EPISODES)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunResult>>> = Mutex::new((0..values.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= values.len() {
            break;
        }
        let res = (|| -> Result<(TrainOutcome, f64)> {
            let cfg = configs[i].as_ref().map_err(|e| anyhow!("{e:#}"))?;
            let name = format!("{}_{}", axis.name(), fmt_value(values[i]));
            let dir: PathBuf = out_dir.join(&name);
            let outcome = run_training(cfg, ds, &dir, &name, |_| {})?;
            let probe_cfg = ProbeConfig { steps: cfg.probe_steps, ..ProbeConfig::default() };
            let rmse =
                probe_model(&outcome.params, &probe_fit, &probe_measure, cfg.model.aligned_layer, probe_cfg, cfg.seed)?;
            Ok((outcome, rmse))
        })();
        results.lock().expect("results lock")[i] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(work);
        }
    });
    Ok(values
        .iter()
        .zip(results.into_inner().expect("results lock"))
        .map(|(&value, r)| AblationRun { value, result: r.expect("every run finishes") })
        .collect())
}

/// Summary rows for finished runs. The success threshold is the final
/// success of the α = 0 run when the sweep contains one.
pub fn summarize(axis: AblationAxis, base: &ExperimentConfig, runs: &[AblationRun]) -> Vec<SummaryRow> {
    let baseline = runs.iter().find_map(|r| match &r.result {
        Ok((o, _)) if axis.apply(base, r.value).map(|c| c.alpha == 0.0).unwrap_or(false) => {
            o.rows.last().map(|row| row.eval_success_rate)
        }
        _ => None,
    });
    let baseline = baseline.or_else(|| (base.alpha == 0.0 && axis == AblationAxis::Alpha).then_some(0.0));
    runs.iter()
        .filter_map(|r| r.result.as_ref().ok().map(|res| (r.value, res)))
        .map(|(value, (o, rmse))| SummaryRow {
            axis: axis.name().into(),
            value,
            final_success_rate: o.rows.last().map_or(0.0, |row| row.eval_success_rate),
            iterations_to_threshold: baseline.and_then(|t| iterations_to_threshold(&o.rows, t)),
            probe_rmse: Some(*rmse),
        })
        .collect()
}

/// Summary rows plus `(value, error)` for every failed run.
pub type AblationReport = (Vec<SummaryRow>, Vec<(f64, String)>);

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    values: &[f64],
    out_dir: &Path,
    jobs: usize,
) -> Result<AblationReport> {
    if values.is_empty() {
        bail!("no values given for axis {}", axis.name());
    }
    let ds = generate_dataset(cfg)?;
    let runs = run_ablation(cfg, &ds, axis, values, out_dir, jobs)?;
    let rows = summarize(axis, cfg, &runs);
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_file(&out_dir.join(SUMMARY_FILE), &summary_csv(&rows))?;
    let failures = runs.iter().filter_map(|r| r.result.as_ref().err().map(|e| (r.value, format!("{e:#}")))).collect();
    Ok((rows, failures))
}

pub fn cmd_plot(csv: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
    let table = crate::metrics::parse_table(&text).with_context(|| csv.display().to_string())?;
    write_file(out, crate::plot::render_svg(&table).as_bytes())
}
