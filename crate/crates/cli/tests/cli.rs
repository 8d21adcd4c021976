use std::path::Path;
use std::process::Command;

use sf_cli::commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_plot, cmd_probe, eval_policy, run_training, AblationAxis, CHECKPOINT_FILE,
    CONFIG_FILE, METRICS_FILE, SUMMARY_FILE,
};
use sf_cli::data::generate_dataset;
use sf_cli::metrics::{parse_table, Table};
use sf_cli::ExperimentConfig;
use sf_core::{teacher_calls, Checkpoint, ModelConfig, VlaParams};
use sf_scene::{read_dataset, Difficulty, ExpertPolicy};

/// Small enough for a few seconds per run.
fn small_config(alpha: f64) -> ExperimentConfig {
    ExperimentConfig {
        n_train_episodes: 6,
        iterations: 20,
        eval_every: 10,
        eval_trials: 4,
        probe_steps: 20,
        alpha,
        model: ModelConfig { n_layers: 2, aligned_layer: 2, ..ModelConfig::default() },
        ..ExperimentConfig::default()
    }
}

fn sf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sf"))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("exp.cfg");
    std::fs::write(&p, cfg.to_text()).unwrap();
    p
}

#[test]
fn gen_data_is_deterministic_and_expert_solves_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(0.0));
    let mut bytes = Vec::new();
    for name in ["a.sfds", "b.sfds"] {
        let out =
            sf().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join(name)).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "episodes=6 expert_success_rate=1.00");
        bytes.push(std::fs::read(dir.path().join(name)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let ds = read_dataset(&dir.path().join("a.sfds")).unwrap();
    assert_eq!(ds.episodes.len(), 6);
    assert_eq!(ds.difficulty, Difficulty::MonoAmbiguous);
}

#[test]
fn default_dataset_has_400_solved_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_gen_data(&ExperimentConfig::default(), &dir.path().join("d.sfds")).unwrap();
    assert_eq!(r.episodes, 400);
    assert_eq!(r.expert_success, 1.0);
}

#[test]
fn baseline_run_has_no_alignment_term() {
    let cfg = small_config(0.0);
    let ds = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let before = teacher_calls();
    let outcome = run_training(&cfg, &ds, dir.path(), "base", |_| {}).unwrap();
    assert_eq!(teacher_calls(), before, "baseline computed teacher features");
    assert!(outcome.projector.is_none());
    assert_eq!(outcome.rows.len(), cfg.iterations / cfg.eval_every);
    for r in &outcome.rows {
        assert_eq!(r.l_align, None);
        assert_eq!(r.total_loss, r.l_action);
        assert!((0.0..=1.0).contains(&r.eval_success_rate));
    }
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "run_id,iteration,l_action,l_align,total_loss,eval_success_rate,probe_rmse,wall_ms");
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[3], "");
        assert_eq!(f[2], f[4]);
    }
    assert!(!text.contains('\r'));
    let echoed = ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed, cfg);
    assert!(Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap().projector.is_none());
}

#[test]
fn aligned_run_records_alignment_and_projector() {
    let cfg = small_config(0.5);
    let ds = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let before = teacher_calls();
    let outcome = run_training(&cfg, &ds, dir.path(), "sf", |_| {}).unwrap();
    assert!(teacher_calls() > before);
    for r in &outcome.rows {
        let g = r.l_align.unwrap();
        assert!((-1.0..=1.0).contains(&g));
        assert!((r.total_loss - (r.l_action + 0.5 * g)).abs() < 1e-9);
    }
    let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(ckpt.projector.is_some());
}

#[test]
fn training_bytes_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(0.5);
    let ds = generate_dataset(&cfg).unwrap();
    for name in ["a", "b"] {
        run_training(&cfg, &ds, &dir.path().join(name), "run", |_| {}).unwrap();
    }
    for file in [METRICS_FILE, CHECKPOINT_FILE, CONFIG_FILE] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn train_command_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(0.0));
    let data = dir.path().join("d.sfds");
    assert!(sf().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&data).output().unwrap().status.success());
    let run = dir.path().join("run");
    let out =
        sf().args(["train", "--config"]).arg(&cfg).arg("--data").arg(&data).arg("--out").arg(&run).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("final_success_rate="));
    for f in [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE] {
        assert!(run.join(f).exists(), "{f}");
    }

    let out = sf()
        .args(["eval", "--ckpt"])
        .arg(run.join(CHECKPOINT_FILE))
        .args(["--trials", "3", "--seed", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("success_rate="));

    let out = sf()
        .args(["probe", "--ckpt"])
        .arg(run.join(CHECKPOINT_FILE))
        .arg("--data")
        .arg(&data)
        .args(["--layer", "2", "--steps", "10"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("probe_rmse="));

    let svg = dir.path().join("m.svg");
    let out = sf().args(["plot", "--csv"]).arg(run.join(METRICS_FILE)).arg("--out").arg(&svg).output().unwrap();
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn eval_oracles() {
    assert_eq!(eval_policy(&mut ExpertPolicy, 100, 0, Difficulty::MonoAmbiguous).unwrap(), 1.0);
    assert_eq!(eval_policy(&mut ExpertPolicy, 30, 5, Difficulty::TwoView).unwrap(), 1.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("init.sfck");
    let params = VlaParams::init(&ModelConfig::default(), 3).unwrap();
    Checkpoint { params, projector: None }.save(&path).unwrap();
    let a = cmd_eval(&path, 100, 0, Difficulty::MonoAmbiguous).unwrap();
    assert!(a <= 0.10, "untrained success {a}");
    assert_eq!(a, cmd_eval(&path, 100, 0, Difficulty::MonoAmbiguous).unwrap());

    std::fs::write(&path, b"SFCKgarbage").unwrap();
    assert!(cmd_eval(&path, 1, 0, Difficulty::MonoAmbiguous).is_err());
}

#[test]
fn ablation_is_isolated_and_order_free() {
    let cfg = small_config(0.5);
    let dir = tempfile::tempdir().unwrap();
    let values = [0.0, 0.5, 12.5];
    let (serial, f1) = cmd_ablate(&cfg, AblationAxis::Alpha, &values, &dir.path().join("s"), 1).unwrap();
    let (parallel, f2) = cmd_ablate(&cfg, AblationAxis::Alpha, &values, &dir.path().join("p"), 3).unwrap();
    assert!(f1.is_empty() && f2.is_empty());
    assert_eq!(serial.len(), 3);
    assert_eq!(serial, parallel);
    let s = std::fs::read(dir.path().join("s").join(SUMMARY_FILE)).unwrap();
    assert_eq!(s, std::fs::read(dir.path().join("p").join(SUMMARY_FILE)).unwrap());
    for v in ["0", "0.5", "12.5"] {
        let m = |d: &str| std::fs::read(dir.path().join(d).join(format!("alpha_{v}")).join(METRICS_FILE)).unwrap();
        assert_eq!(m("s"), m("p"), "alpha {v}");
    }
    match parse_table(&String::from_utf8(s).unwrap()).unwrap() {
        Table::Summary(rows) => assert_eq!(rows.len(), 3),
        other => panic!("expected a summary table, got {other:?}"),
    }
}

#[test]
fn failed_ablation_cell_does_not_stop_the_rest() {
    let cfg = small_config(0.5);
    let dir = tempfile::tempdir().unwrap();
    let (rows, failures) = cmd_ablate(&cfg, AblationAxis::Layer, &[1.0, 9.0, 2.0], dir.path(), 2).unwrap();
    assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![1.0, 2.0]);
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].0, 9.0);
}

#[test]
fn probe_reports_diagnostics_for_aligned_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(0.5);
    let data = dir.path().join("d.sfds");
    cmd_gen_data(&cfg, &data).unwrap();
    let ds = read_dataset(&data).unwrap();
    run_training(&cfg, &ds, dir.path(), "sf", |_| {}).unwrap();
    let r = cmd_probe(&dir.path().join(CHECKPOINT_FILE), &data, 2, 30, 0).unwrap();
    assert!(r.rmse >= 0.0 && r.label_std > 0.0);
    let d = r.diagnostics.unwrap();
    assert!((-1.0..=1.0).contains(&d.mean_cosine));
    assert!((-1e-9..=1.0 + 1e-9).contains(&d.linear_cka));
}

#[test]
fn plot_outputs_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let svg = dir.path().join("m.svg");
    std::fs::write(
        &csv,
        "run_id,iteration,l_action,l_align,total_loss,eval_success_rate,probe_rmse,wall_ms\n\
         base,500,0.1,,0.1,0.2,,\nbase,1000,0.08,,0.08,0.3,,\n\
         sf,500,0.09,-0.5,-0.16,0.3,,\nsf,1000,0.07,-0.6,-0.23,0.5,,\n",
    )
    .unwrap();
    cmd_plot(&csv, &svg).unwrap();
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    assert_eq!(text.matches("class=\"legend\"").count(), 2);

    std::fs::write(&csv, "run_id,iteration,l_action,l_align,total_loss,eval_success_rate,probe_rmse,wall_ms\n")
        .unwrap();
    assert!(format!("{:#}", cmd_plot(&csv, &svg).unwrap_err()).contains("no rows"));
    std::fs::write(
        &csv,
        "run_id,iteration,l_action,l_align,total_loss,eval_success_rate,probe_rmse,wall_ms\nbase,oops,1,,1,0,,\n",
    )
    .unwrap();
    assert!(format!("{:#}", cmd_plot(&csv, &svg).unwrap_err()).contains("line 2"));
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "seed=1\nno_such_key=3\n").unwrap();
    let out = sf().args(["gen-data", "--config"]).arg(&bad).arg("--out").arg(dir.path().join("x")).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error:") && err.contains("line 2"), "{err}");

    let out = sf().args(["eval", "--ckpt"]).arg(dir.path().join("missing.sfck")).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);

    let cfg = write_config(dir.path(), &small_config(0.5));
    let out = sf().args(["ablate", "--config"]).arg(&cfg).args(["--axis", "depth", "--values", "1"]).output().unwrap();
    assert!(!out.status.success());
}
