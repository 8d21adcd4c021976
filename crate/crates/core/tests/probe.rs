mod common;

use common::{episodes, random_vec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sf_core::{
    alignment_diagnostics, centroid_distance, fit_probe, linear_cka, patch_statistics, probe_rmse, probe_rmse_on,
    teacher_features, train_probe, ModelConfig, ModelError, ProbeConfig, ProbeHead, ProbeSamples, Projector, Sample,
    VlaParams,
};
use sf_scene::{Difficulty, Episode, RenderOutput};

fn samples(eps: &[Episode]) -> Vec<Sample<'_>> {
    eps.iter()
        .flat_map(|e| e.steps.iter().map(|s| Sample { views: &s.views, instruction: &e.instruction_ids }))
        .collect()
}

/// Per-patch mean depth as a one-wide feature row.
fn depth_rows(samples: &[Sample<'_>], cfg: &ModelConfig) -> Vec<f64> {
    samples.iter().flat_map(|s| patch_statistics(s.views, cfg).unwrap().into_iter().map(|r| r[3])).collect()
}

fn noise_rows(samples: &[Sample<'_>], cfg: &ModelConfig, dim: usize, seed: u64) -> Vec<f64> {
    random_vec(samples.len() * cfg.n_visual_tokens() * dim, seed)
}

fn quick() -> ProbeConfig {
    ProbeConfig { steps: 2000, ..ProbeConfig::default() }
}

#[test]
fn probe_recovers_depth_from_oracle_features() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 1).unwrap();
    let train_eps = episodes(30, Difficulty::MonoAmbiguous);
    let test_eps: Vec<Episode> =
        (0..10).map(|s| sf_scene::gen_episode(5000 + s, Difficulty::MonoAmbiguous).unwrap()).collect();
    let (tr, te) = (samples(&train_eps), samples(&test_eps));
    let train = ProbeSamples::from_rows(&depth_rows(&tr, &cfg), 1, &tr, &params).unwrap();
    let test = ProbeSamples::from_rows(&depth_rows(&te, &cfg), 1, &te, &params).unwrap();
    let head = fit_probe(&train, quick(), 3).unwrap();
    let rmse = probe_rmse_on(&head, &test).unwrap();
    assert!(rmse < 0.02, "rmse {rmse}, label std {}", test.label_std());
}

#[test]
fn probe_on_noise_does_no_better_than_the_mean() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 1).unwrap();
    let train_eps = episodes(30, Difficulty::MonoAmbiguous);
    let test_eps: Vec<Episode> =
        (0..10).map(|s| sf_scene::gen_episode(5000 + s, Difficulty::MonoAmbiguous).unwrap()).collect();
    let (tr, te) = (samples(&train_eps), samples(&test_eps));
    let train = ProbeSamples::from_rows(&noise_rows(&tr, &cfg, 64, 1), 64, &tr, &params).unwrap();
    let test = ProbeSamples::from_rows(&noise_rows(&te, &cfg, 64, 2), 64, &te, &params).unwrap();
    let head = fit_probe(&train, quick(), 3).unwrap();
    let rmse = probe_rmse_on(&head, &test).unwrap();
    assert!(rmse >= 0.9 * test.label_std(), "rmse {rmse}, label std {}", test.label_std());
}

#[test]
fn probing_is_deterministic_and_leaves_the_backbone_alone() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 4).unwrap();
    let before = params.store.clone();
    let eps = episodes(3, Difficulty::MonoAmbiguous);
    let s = samples(&eps);
    let cfg_p = ProbeConfig { steps: 50, ..ProbeConfig::default() };
    let a = train_probe(&params, &s, 4, cfg_p, 9).unwrap();
    let b = train_probe(&params, &s, 4, cfg_p, 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, train_probe(&params, &s, 4, cfg_p, 10).unwrap());
    let r = probe_rmse(&a, &params, &s, 4).unwrap();
    assert!(r.is_finite() && r >= 0.0);
    assert_eq!(params.store, before);
    assert!(train_probe(&params, &s, 7, cfg_p, 9).is_err());
}

/// Probe head computing `gelu(100·x)/100`, which equals `x` for `x > 0.4`.
fn identity_head() -> ProbeHead {
    let mut head = fit_probe(
        &ProbeSamples { features: vec![1.0, 2.0], dim: 1, labels: vec![1.0, 2.0] },
        ProbeConfig { steps: 1, ..ProbeConfig::default() },
        0,
    )
    .unwrap();
    for p in head.store.iter_mut() {
        let n = p.data.len();
        p.data = match p.name.as_str() {
            "probe/w1" => (0..n).map(|i| if i == 0 { 100.0 } else { 0.0 }).collect(),
            "probe/w2" => (0..n).map(|i| if i == 0 { 0.01 } else { 0.0 }).collect(),
            _ => vec![0.0; n],
        };
    }
    head
}

#[test]
fn perfect_and_mean_predictors() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 1).unwrap();
    let eps = episodes(5, Difficulty::MonoAmbiguous);
    let s = samples(&eps);
    let data = ProbeSamples::from_rows(&depth_rows(&s, &cfg), 1, &s, &params).unwrap();
    assert!(data.labels.iter().all(|&d| d > 0.4));
    let perfect = identity_head();
    assert!(probe_rmse_on(&perfect, &data).unwrap() < 1e-12);

    let mean = data.labels.iter().sum::<f64>() / data.len() as f64;
    let mut constant = identity_head();
    for p in constant.store.iter_mut() {
        p.data.iter_mut().for_each(|v| *v = 0.0);
        if p.name == "probe/b2" {
            p.data[0] = mean;
        }
    }
    let rmse = probe_rmse_on(&constant, &data).unwrap();
    assert!((rmse - data.label_std()).abs() < 1e-12, "{rmse} vs {}", data.label_std());
}

#[test]
fn rmse_ignores_episode_order() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 2).unwrap();
    let mut eps = episodes(6, Difficulty::MonoAmbiguous);
    let head = train_probe(&params, &samples(&eps), 2, ProbeConfig { steps: 20, ..ProbeConfig::default() }, 1).unwrap();
    let a = probe_rmse(&head, &params, &samples(&eps), 2).unwrap();
    eps.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    eps.reverse();
    let b = probe_rmse(&head, &params, &samples(&eps), 2).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn empty_views_have_no_probe_targets() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 1).unwrap();
    let blank = RenderOutput {
        height: 32,
        width: 32,
        image: vec![0.0; 3072],
        depth: vec![10.0; 1024],
        pointmap: vec![0.0; 3072],
        mask: vec![false; 1024],
    };
    let views = vec![blank.clone(), blank];
    let ids = [1u16, 2, 3, 4];
    let s = [Sample { views: &views, instruction: &ids }];
    assert!(matches!(ProbeSamples::from_model(&params, &s, 1), Err(ModelError::NoForeground)));
}

fn random_orthogonal(d: usize, seed: u64) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    let raw = random_vec(d * d, seed);
    for i in 0..d {
        let mut v = raw[i * d..(i + 1) * d].to_vec();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / n).collect());
    }
    q.concat()
}

fn matmul(x: &[f64], m: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| (0..d).map(|j| (0..d).map(|k| row[k] * m[k * d + j]).sum::<f64>()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn cka_identity_rotation_and_scale() {
    let d = 16;
    let x = random_vec(200 * d, 1);
    assert!((linear_cka(&x, d, &x, d) - 1.0).abs() < 1e-12);
    assert_eq!(centroid_distance(&x, &x, d), 0.0);
    let r = random_orthogonal(d, 2);
    let xr = matmul(&x, &r, d);
    assert!((linear_cka(&x, d, &xr, d) - 1.0).abs() < 1e-9);
    let y = random_vec(200 * 8, 3);
    let base = linear_cka(&x, d, &y, 8);
    let scaled: Vec<f64> = y.iter().map(|v| v * 4.5).collect();
    assert!((linear_cka(&x, d, &scaled, 8) - base).abs() < 1e-6);
    assert!((linear_cka(&xr, d, &y, 8) - base).abs() < 1e-6);
    assert!((0.0..=1.0 + 1e-9).contains(&base));
}

#[test]
fn cka_of_independent_samples_is_small() {
    let x = random_vec(1000 * 64, 11);
    let y = random_vec(1000 * 64, 12);
    let c = linear_cka(&x, 64, &y, 64);
    assert!(c < 0.1, "{c}");
}

#[test]
fn centroid_distance_of_shifted_copy() {
    let x = random_vec(50 * 4, 5);
    let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + if i % 4 == 1 { 3.0 } else { 0.0 }).collect();
    assert!((centroid_distance(&x, &y, 4) - 3.0).abs() < 1e-12);
}

#[test]
fn diagnostics_report() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 6).unwrap();
    let mut projector = Projector::init(&cfg, 7).unwrap();
    let eps = episodes(2, Difficulty::MonoAmbiguous);
    let s = samples(&eps);
    assert!(s.len() * 32 >= 100);
    let probe = train_probe(&params, &s, 4, ProbeConfig { steps: 10, ..ProbeConfig::default() }, 1).unwrap();
    let mode = projector.bn.mode;
    let before = projector.bn.clone();
    let r = alignment_diagnostics(&params, &mut projector, &probe, &s, 4).unwrap();
    assert_eq!(projector.bn.mode, mode);
    assert_eq!(projector.bn, before);
    assert!(r.probe_rmse >= 0.0);
    assert!((-1.0..=1.0).contains(&r.mean_cosine));
    assert!((-1e-9..=1.0 + 1e-9).contains(&r.linear_cka));
    assert!(r.centroid_distance >= 0.0);
    let t = teacher_features(s[0].views, &cfg).unwrap();
    assert_eq!(t.rows(), 32);

    let err = alignment_diagnostics(&params, &mut projector, &probe, &s[..3], 4).unwrap_err();
    assert!(matches!(err, ModelError::TooFewSamples { needed: 100, got: 96 }));
}
