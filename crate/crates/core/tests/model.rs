mod common;

use common::{episodes, random_vec, tiny_config};
use sf_autograd::{grad_check, BnMode, ParamStore, Tape};
use sf_core::{
    action_chunk, action_loss, align_loss, combine_losses, patchify, Checkpoint, LossWeights, ModelConfig, ModelError,
    Projector, Segment, VlaParams,
};
use sf_scene::{Difficulty, RenderOutput};

fn blank_view(value: f32) -> RenderOutput {
    RenderOutput {
        height: 32,
        width: 32,
        image: vec![value; 32 * 32 * 3],
        depth: vec![10.0; 1024],
        pointmap: vec![0.0; 1024 * 3],
        mask: vec![false; 1024],
    }
}

fn inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let patches = random_vec(batch * cfg.n_visual_tokens() * cfg.patch_pixels(), seed)
        .into_iter()
        .map(|v| 0.5 + 0.5 * v)
        .collect();
    let ids = (0..batch * cfg.n_lang_tokens).map(|i| (i * 7 + seed as usize) % cfg.vocab).collect();
    (patches, ids)
}

#[test]
fn patchify_constant_image() {
    let cfg = ModelConfig::default();
    let p = patchify(&[blank_view(0.5), blank_view(0.5)], &cfg).unwrap();
    assert_eq!(p.len(), 32 * 192);
    assert!(p.iter().all(|&v| v == 0.5));
}

#[test]
fn patchify_index_bookkeeping() {
    let cfg = ModelConfig::default();
    let mut v0 = blank_view(0.0);
    v0.image[0] = 1.0;
    let p = patchify(&[v0, blank_view(0.0)], &cfg).unwrap();
    let nonzero: Vec<usize> = (0..p.len()).filter(|&i| p[i] != 0.0).collect();
    assert_eq!(nonzero, vec![0]);

    // pixel (9, 17) channel 2 of view 1: patch row 1, col 2 -> token 16 + 4 + 2
    let mut v1 = blank_view(0.0);
    v1.image[(9 * 32 + 17) * 3 + 2] = 1.0;
    let p = patchify(&[blank_view(0.0), v1], &cfg).unwrap();
    let idx = p.iter().position(|&v| v != 0.0).unwrap();
    assert_eq!(idx / 192, 22);
    assert_eq!(idx % 192, (8 + 1) * 3 + 2);
}

#[test]
fn patchify_rejects_wrong_sizes() {
    let cfg = ModelConfig::default();
    assert!(matches!(patchify(&[blank_view(0.0)], &cfg), Err(ModelError::Dimension { .. })));
    let mut small = blank_view(0.0);
    small.height = 16;
    small.image.truncate(16 * 32 * 3);
    assert!(patchify(&[small, blank_view(0.0)], &cfg).is_err());
}

#[test]
fn assemble_layout() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 1).unwrap();
    let (patches, ids) = inputs(&cfg, 1, 3);
    let mut tape = Tape::new();
    let bound = tape.bind(&params.store, false);
    let tokens = params.assemble(&mut tape, &bound, &patches, &ids, 1).unwrap();
    assert_eq!(tape.shape(tokens.embeddings), &[1, 40, 64]);
    assert_eq!(tokens.segments.len(), 40);
    assert!(tokens.segments[..32].iter().all(|&s| s == Segment::Vision));
    assert!(tokens.segments[32..36].iter().all(|&s| s == Segment::Language));
    assert!(tokens.segments[36..].iter().all(|&s| s == Segment::Action));
    let base = tape.value(tokens.embeddings).to_vec();

    let mut swapped = ids.clone();
    swapped.swap(0, 2);
    assert_ne!(swapped, ids);
    let tokens = params.assemble(&mut tape, &bound, &patches, &swapped, 1).unwrap();
    let other = tape.value(tokens.embeddings);
    for row in 0..40 {
        let same = base[row * 64..(row + 1) * 64] == other[row * 64..(row + 1) * 64];
        assert_eq!(same, !(row == 32 || row == 34), "row {row}");
    }
}

#[test]
fn zero_inputs_leave_position_embeddings() {
    let cfg = ModelConfig::default();
    let mut params = VlaParams::init(&cfg, 2).unwrap();
    let w = params.patch_projection();
    params.store.get_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
    let lang = params.language_table();
    params.store.get_mut(lang).data.iter_mut().for_each(|v| *v = 0.0);
    let (patches, ids) = inputs(&cfg, 1, 4);
    let mut tape = Tape::new();
    let bound = tape.bind(&params.store, false);
    let tokens = params.assemble(&mut tape, &bound, &patches, &ids, 1).unwrap();
    let pos = &params.store.get(params.position_table()).data;
    assert_eq!(&tape.value(tokens.embeddings)[..36 * 64], &pos[..36 * 64]);
}

#[test]
fn out_of_vocabulary_token_is_rejected() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 1).unwrap();
    let (patches, mut ids) = inputs(&cfg, 1, 3);
    ids[1] = 16;
    let err = params.predict_batch(&patches, &ids, 1).unwrap_err();
    assert!(matches!(err, ModelError::BadToken { id: 16, vocab: 16 }));
}

#[test]
fn later_queries_do_not_affect_earlier_ones() {
    let cfg = ModelConfig::default();
    let mut params = VlaParams::init(&cfg, 5).unwrap();
    let (patches, ids) = inputs(&cfg, 2, 6);
    let run = |p: &VlaParams| {
        let mut tape = Tape::new();
        let bound = tape.bind(&p.store, false);
        let out = p.run(&mut tape, &bound, &patches, &ids, 2).unwrap();
        (tape.value(out.actions).to_vec(), out.taps.iter().map(|&t| tape.value(t).to_vec()).collect::<Vec<_>>())
    };
    let (before, taps_before) = run(&params);
    let q = params.store.find("action_queries").unwrap();
    for v in &mut params.store.get_mut(q).data[2 * 64..3 * 64] {
        *v += 0.3;
    }
    let (after, taps_after) = run(&params);
    for b in 0..2 {
        let off = b * 16;
        assert_eq!(before[off..off + 8], after[off..off + 8], "queries 0 and 1 of sample {b}");
        assert_ne!(before[off + 8..off + 12], after[off + 8..off + 12]);
    }
    for (l, (x, y)) in taps_before.iter().zip(&taps_after).enumerate() {
        for b in 0..2 {
            let rows = b * 40 * 64..(b * 40 + 38) * 64;
            assert_eq!(x[rows.clone()], y[rows], "layer {}", l + 1);
        }
    }
}

#[test]
fn language_never_reaches_visual_tokens() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 7).unwrap();
    let (patches, ids) = inputs(&cfg, 1, 8);
    let mut other = ids.clone();
    other[3] = (other[3] + 5) % 16;
    let taps = |ids: &[usize]| {
        let mut tape = Tape::new();
        let bound = tape.bind(&params.store, false);
        let out = params.run(&mut tape, &bound, &patches, ids, 1).unwrap();
        out.taps.iter().map(|&t| tape.value(t)[..32 * 64].to_vec()).collect::<Vec<_>>()
    };
    let (a, b) = (taps(&ids), taps(&other));
    assert_eq!(a.len(), 6);
    for (l, (x, y)) in a.iter().zip(&b).enumerate() {
        assert_eq!(x, y, "layer {}", l + 1);
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::default();
    let (patches, ids) = inputs(&cfg, 3, 9);
    let a = VlaParams::init(&cfg, 11).unwrap().predict_batch(&patches, &ids, 3).unwrap();
    let b = VlaParams::init(&cfg, 11).unwrap().predict_batch(&patches, &ids, 3).unwrap();
    assert_eq!(a, b);
    let c = VlaParams::init(&cfg, 12).unwrap().predict_batch(&patches, &ids, 3).unwrap();
    assert_ne!(a, c);
}

#[test]
fn non_finite_activation_names_the_layer() {
    let cfg = ModelConfig::default();
    let mut params = VlaParams::init(&cfg, 1).unwrap();
    let w = params.store.find("blocks.2.mlp.w1").unwrap();
    params.store.get_mut(w).data[0] = f64::NAN;
    let (patches, ids) = inputs(&cfg, 1, 1);
    let err = params.predict_batch(&patches, &ids, 1).unwrap_err();
    assert!(matches!(err, ModelError::NonFinite { layer: 3 }));
    assert!(err.to_string().contains("layer 3"));
}

#[test]
fn action_loss_examples() {
    let mut tape = Tape::new();
    let gt_data = random_vec(16, 3);
    let gt = tape.constant(&[4, 4], gt_data.clone()).unwrap();
    let same = tape.constant(&[4, 4], gt_data.clone()).unwrap();
    let l = action_loss(&mut tape, same, gt).unwrap();
    assert_eq!(tape.item(l), 0.0);

    let shifted = tape.constant(&[4, 4], gt_data.iter().map(|v| v + 0.1).collect()).unwrap();
    let l = action_loss(&mut tape, shifted, gt).unwrap();
    assert!((tape.item(l) - 0.1).abs() < 1e-12);

    let other = random_vec(16, 4);
    let p = tape.constant(&[4, 4], other.clone()).unwrap();
    let l = action_loss(&mut tape, p, gt).unwrap();
    let mut expected = 0.0;
    for i in 0..16 {
        expected += (other[i] - gt_data[i]).abs();
    }
    assert!((tape.item(l) - expected / 16.0).abs() < 1e-12);

    let wrong = tape.constant(&[2, 4], vec![0.0; 8]).unwrap();
    assert!(action_loss(&mut tape, wrong, gt).is_err());
}

#[test]
fn action_chunks_repeat_the_final_action() {
    let acts = [[0.1, 0.0, 0.0, 0.0], [0.05, 0.0, 0.0, 1.0]];
    let c = action_chunk(&acts, 0, 4);
    assert_eq!(c.len(), 16);
    assert_eq!(&c[..4], &[0.1f32 as f64, 0.0, 0.0, 0.0]);
    for k in 1..4 {
        assert_eq!(&c[4 * k..4 * k + 4], &[0.05f32 as f64, 0.0, 0.0, 1.0]);
    }
}

#[test]
fn predict_action_is_the_first_query() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 3).unwrap();
    let ep = &episodes(1, Difficulty::MonoAmbiguous)[0];
    let step = &ep.steps[0];
    let a = params.predict_action(&step.views, &ep.instruction_ids).unwrap();
    assert_eq!(a.len(), 4);
    assert!(a.iter().all(|v| v.is_finite()));

    let patches = patchify(&step.views, &cfg).unwrap();
    let ids: Vec<usize> = ep.instruction_ids.iter().map(|&i| i as usize).collect();
    let mut tape = Tape::new();
    let bound = tape.bind(&params.store, false);
    let out = params.run(&mut tape, &bound, &patches, &ids, 1).unwrap();
    assert_eq!(tape.shape(out.actions), &[1, 4, 4]);
    assert_eq!(a.as_slice(), &tape.value(out.actions)[..4]);
}

#[test]
fn projector_is_off_the_inference_path() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 3).unwrap();
    let mut ckpt = Checkpoint { params, projector: Some(Projector::init(&cfg, 4).unwrap()) };
    let eps = episodes(3, Difficulty::MonoAmbiguous);
    let predict = |c: &Checkpoint| -> Vec<Vec<f64>> {
        eps.iter()
            .flat_map(|e| e.steps.iter().map(|s| c.params.predict_action(&s.views, &e.instruction_ids).unwrap()))
            .collect()
    };
    let before = predict(&ckpt);
    let proj = ckpt.projector.as_mut().unwrap();
    for (i, p) in proj.store.iter_mut().enumerate() {
        p.data = random_vec(p.data.len(), 100 + i as u64);
    }
    proj.bn.running_mean = random_vec(64, 7);
    assert_eq!(before, predict(&ckpt));
    ckpt.projector = None;
    assert_eq!(before, predict(&ckpt));
}

#[test]
fn action_loss_reaches_the_patch_projection() {
    let cfg = ModelConfig::default();
    let params = VlaParams::init(&cfg, 5).unwrap();
    let (patches, ids) = inputs(&cfg, 2, 5);
    let mut tape = Tape::new();
    let bound = tape.bind(&params.store, true);
    let out = params.run(&mut tape, &bound, &patches, &ids, 2).unwrap();
    let gt = tape.constant(&[2, 4, 4], random_vec(32, 9)).unwrap();
    let loss = action_loss(&mut tape, out.actions, gt).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(bound[params.patch_projection()]).unwrap();
    assert!(g.iter().map(|v| v.abs()).sum::<f64>() > 1e-6);
}

fn sf_loss_graph(
    params: &VlaParams,
    projector: &mut Projector,
    patches: &[f64],
    ids: &[usize],
    targets: &[f64],
    gt: &[f64],
    batch: usize,
    tape: &mut Tape,
    bounds: &[sf_autograd::Bound],
) -> sf_autograd::Result<sf_autograd::TensorId> {
    let c = &params.config;
    let (n, d) = (c.n_visual_tokens(), c.d_model);
    let out = params.run(tape, &bounds[0], patches, ids, batch).unwrap();
    let g = tape.constant(&[batch, c.n_action_queries, c.action_dim], gt.to_vec())?;
    let l_action = action_loss(tape, out.actions, g).unwrap();
    let vis = tape.slice(out.taps[c.aligned_layer - 1], 1, 0, n)?;
    let vis = tape.reshape(vis, &[batch * n, d])?;
    let projected = projector.project(tape, &bounds[1], vis, BnMode::Training).unwrap();
    let l_align = align_loss(tape, projected, targets).unwrap();
    Ok(combine_losses(tape, l_action, Some(l_align), LossWeights::default()).unwrap())
}

#[test]
fn full_objective_passes_gradient_check() {
    let cfg = tiny_config();
    let params = VlaParams::init(&cfg, 21).unwrap();
    let mut projector = Projector::init(&cfg, 22).unwrap();
    let batch = 2;
    let (patches, ids) = inputs(&cfg, batch, 23);
    let targets = random_vec(batch * cfg.n_visual_tokens() * cfg.d_teacher, 24);
    let gt = random_vec(batch * cfg.n_action_queries * cfg.action_dim, 25);
    let mut stores: Vec<ParamStore> = vec![params.store.clone(), projector.store.clone()];
    let err = grad_check(&mut stores, 1e-5, |tape, bounds| {
        sf_loss_graph(&params, &mut projector, &patches, &ids, &targets, &gt, batch, tape, bounds)
    })
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig { aligned_layer: 3, ..ModelConfig::default() };
    let params = VlaParams::init(&cfg, 8).unwrap();
    let mut projector = Projector::init(&cfg, 9).unwrap();
    projector.bn.running_var = random_vec(64, 3).into_iter().map(|v| v.abs()).collect();
    let ckpt = Checkpoint { params, projector: Some(projector) };
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..4], b"SFCK");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params.config, cfg);
    assert_eq!(back.projector.as_ref().unwrap().bn, ckpt.projector.as_ref().unwrap().bn);
    assert!(back.projector.as_ref().unwrap().store.iter().all(|p| p.name.starts_with("sf/")));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sfck");
    let plain = Checkpoint { projector: None, ..ckpt.clone() };
    plain.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert!(loaded.projector.is_none());
    assert_eq!(loaded.params.store, plain.params.store);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::load(&dir.path().join("missing")).unwrap_err().to_string().contains("missing"));
}
