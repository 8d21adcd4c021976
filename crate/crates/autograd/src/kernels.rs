use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// untransposed layout (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = if a_trans {
        ArrayView2::from_shape((k, m), a).expect("lhs buffer").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("lhs buffer")
    };
    let b = if b_trans {
        ArrayView2::from_shape((n, k), b).expect("rhs buffer").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("rhs buffer")
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("output buffer");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

pub(crate) const GELU_K: f64 = 0.044_715;
// sqrt(2 / pi)
pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4;

// tanh through a single exp; libm's tanh is several times slower
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + tanh(u))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
