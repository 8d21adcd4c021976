use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sf_cli::commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_plot, cmd_probe, cmd_train, AblationAxis, METRICS_FILE,
};
use sf_cli::ExperimentConfig;
use sf_scene::Difficulty;

#[derive(Parser)]
#[command(name = "sf", about = "Reach-task policy training with geometric feature alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy and write metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop success rate of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "mono_ambiguous")]
        difficulty: String,
    },
    /// One full run per value of an ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Depth probe and alignment diagnostics of a checkpoint.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a metrics or summary CSV as an SVG chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = cmd_gen_data(&cfg, &out)?;
            println!("episodes={} expert_success_rate={:.2}", r.episodes, r.expert_success);
        }
        Command::Train { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = cmd_train(&cfg, &data, &out)?;
            let last = outcome.rows.last().map_or(0.0, |r| r.eval_success_rate);
            println!("final_success_rate={last:.2} metrics={}", out.join(METRICS_FILE).display());
        }
        Command::Eval { ckpt, trials, seed, difficulty } => {
            let difficulty =
                Difficulty::parse(&difficulty).with_context(|| format!("unknown difficulty `{difficulty}`"))?;
            println!("success_rate={:.2}", cmd_eval(&ckpt, trials, seed, difficulty)?);
        }
        Command::Ablate { config, axis, values, out, jobs } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axis = AblationAxis::parse(&axis)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("ablate_{}", axis.name())));
            let (rows, failures) = cmd_ablate(&cfg, axis, &values, &out, jobs)?;
            for r in &rows {
                println!("{}={} final_success_rate={:.2}", r.axis, r.value, r.final_success_rate);
            }
            if let Some((v, e)) = failures.first() {
                anyhow::bail!("{} of {} runs failed; first ({}={v}): {e}", failures.len(), values.len(), axis.name());
            }
        }
        Command::Probe { ckpt, data, layer, steps, seed } => {
            let r = cmd_probe(&ckpt, &data, layer, steps, seed)?;
            print!("probe_rmse={:.6} label_std={:.6}", r.rmse, r.label_std);
            if let Some(d) = r.diagnostics {
                print!(
                    " mean_cosine={:.6} linear_cka={:.6} centroid_distance={:.6}",
                    d.mean_cosine, d.linear_cka, d.centroid_distance
                );
            }
            println!();
        }
        Command::Plot { csv, out } => cmd_plot(&csv, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
