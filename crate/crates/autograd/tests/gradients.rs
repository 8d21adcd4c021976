//! Finite-difference checks for every op kind and a few composites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sf_autograd::{
    batch_norm, grad_check, AttentionWeights, Attrs, BatchNormState, Bound, OpKind, ParamStore, Result, Tape, TensorId,
};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn store(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, shape) in shapes.iter().enumerate() {
        let n = shape.iter().product();
        s.add(format!("p{i}"), shape, randn(rng, n)).unwrap();
    }
    s
}

/// Contracts `y` with a fixed random tensor so that every output entry has a
/// distinct, nonzero upstream gradient.
fn probe(tape: &mut Tape, y: TensorId, seed: u64) -> Result<TensorId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let n = tape.value(y).len();
    let w = tape.constant(&tape.shape(y).to_vec(), randn(&mut rng, n))?;
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn ids(b: &[Bound], n: usize) -> Vec<TensorId> {
    b[0].ids()[..n].to_vec()
}

fn check_op(kind: OpKind, shapes: &[&[usize]], attrs: Attrs) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stores = vec![store(&mut rng, shapes)];
        let err = grad_check(&mut stores, EPS, |tape, b| {
            let inputs = ids(b, shapes.len());
            let y = tape.apply(kind, &inputs, &attrs)?;
            probe(tape, y, seed)
        })
        .unwrap();
        assert!(err < TOL, "{kind} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn matmul_plain_and_batched() {
    check_op(OpKind::MatMul, &[&[3, 4], &[4, 2]], Attrs::None);
    check_op(OpKind::MatMul, &[&[2, 3, 4], &[2, 4, 5]], Attrs::None);
}

#[test]
fn elementwise_with_broadcast() {
    for kind in [OpKind::Add, OpKind::Sub, OpKind::MulElementwise] {
        check_op(kind, &[&[3, 4], &[3, 4]], Attrs::None);
        check_op(kind, &[&[2, 3, 4], &[4]], Attrs::None);
    }
}

#[test]
fn reductions_and_scale() {
    check_op(OpKind::Scale, &[&[3, 2]], Attrs::Scale(-1.7));
    check_op(OpKind::Mean, &[&[3, 2]], Attrs::None);
    check_op(OpKind::Sum, &[&[5]], Attrs::None);
}

#[test]
fn layout_ops() {
    check_op(OpKind::Transpose, &[&[3, 2]], Attrs::None);
    check_op(OpKind::Transpose, &[&[2, 3, 4]], Attrs::None);
    check_op(OpKind::Reshape, &[&[3, 4]], Attrs::Shape(vec![2, 6]));
    check_op(OpKind::Concat, &[&[2, 3, 4], &[2, 1, 4], &[2, 2, 4]], Attrs::Axis(1));
    check_op(OpKind::Concat, &[&[2, 3], &[1, 3]], Attrs::Axis(0));
    check_op(OpKind::Slice, &[&[2, 5, 3]], Attrs::Range { axis: 1, start: 1, end: 4 });
}

#[test]
fn nonlinearities() {
    check_op(OpKind::SoftmaxLastDim, &[&[3, 5]], Attrs::None);
    check_op(OpKind::Gelu, &[&[4, 3]], Attrs::None);
    check_op(OpKind::Relu, &[&[4, 3]], Attrs::None);
    check_op(OpKind::L2NormalizeLastDim, &[&[3, 4]], Attrs::None);
    check_op(OpKind::LayerNorm, &[&[3, 6], &[6], &[6]], Attrs::None);
}

#[test]
fn lookup_and_losses() {
    check_op(OpKind::EmbeddingLookup, &[&[5, 3]], Attrs::Ids(vec![4, 0, 4, 2]));
    check_op(OpKind::L1Loss, &[&[3, 4], &[3, 4]], Attrs::None);
    check_op(OpKind::CosineRows, &[&[4, 6], &[4, 6]], Attrs::None);
    check_op(OpKind::CosineRows, &[&[6], &[6]], Attrs::None);
}

#[test]
fn attention_core_and_layer() {
    check_op(OpKind::CausalAttention, &[&[2, 5, 8], &[2, 5, 8], &[2, 5, 8]], Attrs::Heads(2));
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stores = vec![store(&mut rng, &[&[4, 6], &[6, 6], &[6, 6], &[6, 6], &[6, 6], &[6], &[6]])];
        let err = grad_check(&mut stores, EPS, |tape, b| {
            let p = b[0].ids();
            let mut w = AttentionWeights::without_bias(p[1], p[2], p[3], p[4]);
            w.bq = Some(p[5]);
            w.bo = Some(p[6]);
            let y = tape.causal_self_attention(p[0], &w, 3)?;
            probe(tape, y, seed)
        })
        .unwrap();
        assert!(err < TOL, "attention layer seed {seed}: {err:e}");
    }
}

#[test]
fn batch_norm_training_and_frozen() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for frozen in [false, true] {
            let mut stores = vec![store(&mut rng, &[&[6, 3], &[3], &[3]])];
            let mut state = BatchNormState::new(3, 0.1);
            if frozen {
                state.mode = sf_autograd::BnMode::Frozen;
                state.running_mean = vec![0.2, -0.1, 0.0];
                state.running_var = vec![0.5, 1.5, 2.0];
            }
            let err = grad_check(&mut stores, EPS, |tape, b| {
                let p = b[0].ids();
                let y = batch_norm(tape, p[0], p[1], p[2], &mut state)?;
                probe(tape, y, seed)
            })
            .unwrap();
            assert!(err < TOL, "batch_norm frozen={frozen} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn mean_gelu_matmul_composite() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stores = vec![store(&mut rng, &[&[4, 5], &[5, 3]])];
        let err = grad_check(&mut stores, EPS, |tape, b| {
            let p = b[0].ids();
            let z = tape.matmul(p[0], p[1])?;
            let z = tape.gelu(z);
            Ok(tape.mean(z))
        })
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn grad_check_of_square_is_tight() {
    let mut s = ParamStore::new();
    s.add("x", &[1], vec![3.0]).unwrap();
    let err = grad_check(&mut [s], 1e-5, |tape, b| {
        let x = b[0].ids()[0];
        let y = tape.mul(x, x)?;
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn grad_check_of_constant_is_zero() {
    let mut s = ParamStore::new();
    s.add("x", &[2], vec![3.0, -1.0]).unwrap();
    let err = grad_check(&mut [s], 1e-5, |tape, _| Ok(tape.scalar_constant(4.2))).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_non_scalar() {
    let mut s = ParamStore::new();
    s.add("x", &[2], vec![3.0, -1.0]).unwrap();
    let r = grad_check(&mut [s], 1e-5, |tape, b| tape.apply(OpKind::Gelu, &[b[0].ids()[0]], &Attrs::None));
    assert!(matches!(r, Err(sf_autograd::TensorError::NonScalarLoss(_))));
}

#[test]
fn fan_out_accumulates_like_duplicated_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(&mut rng, 6);
    let w = randn(&mut rng, 6);

    // x used twice: loss = sum(x*w) + sum(gelu(x))
    let mut tape = Tape::new();
    let x = tape.variable(&[2, 3], a.clone()).unwrap();
    let wc = tape.constant(&[2, 3], w.clone()).unwrap();
    let l1 = tape.mul(x, wc).unwrap();
    let l1 = tape.sum(l1);
    let l2 = tape.gelu(x);
    let l2 = tape.sum(l2);
    let loss = tape.add(l1, l2).unwrap();
    tape.backward(loss).unwrap();
    let shared = tape.grad(x).unwrap().to_vec();

    // two independent copies of x, gradients summed by hand
    let mut tape = Tape::new();
    let x1 = tape.variable(&[2, 3], a.clone()).unwrap();
    let x2 = tape.variable(&[2, 3], a).unwrap();
    let wc = tape.constant(&[2, 3], w).unwrap();
    let l1 = tape.mul(x1, wc).unwrap();
    let l1 = tape.sum(l1);
    let l2 = tape.gelu(x2);
    let l2 = tape.sum(l2);
    let loss = tape.add(l1, l2).unwrap();
    tape.backward(loss).unwrap();
    let split: Vec<f64> = tape.grad(x1).unwrap().iter().zip(tape.grad(x2).unwrap()).map(|(p, q)| p + q).collect();
    for (s, t) in shared.iter().zip(&split) {
        assert!((s - t).abs() < 1e-15);
    }
}
