//! Central finite-difference gradient oracle.

use crate::error::{Result, TensorError};
use crate::param::{Bound, ParamStore};
use crate::tape::{Tape, TensorId};

const GRAD_FLOOR: f64 = 1e-6;

/// Maximum over every parameter entry of
/// `|analytic − central| / max(|analytic|, |central|, 1e-6)`.
///
/// The floor keeps entries whose true gradient is zero (for example a key
/// bias under softmax) from being scored on rounding noise alone.
///
/// `f` builds the scalar loss on a fresh tape from the bound stores; it is
/// called once with gradients enabled and twice per parameter entry without.
pub fn grad_check<F>(stores: &mut [ParamStore], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Bound]) -> Result<TensorId>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::BadEpsilon(eps));
    }
    let analytic: Vec<Vec<Vec<f64>>> = {
        let mut tape = Tape::new();
        let bound: Vec<Bound> = stores.iter().map(|s| tape.bind(s, true)).collect();
        let loss = f(&mut tape, &bound)?;
        tape.backward(loss)?;
        bound.iter().map(|b| tape.grads_of(b)).collect()
    };

    let mut eval = |stores: &[ParamStore]| -> Result<f64> {
        let mut tape = Tape::new();
        let bound: Vec<Bound> = stores.iter().map(|s| tape.bind(s, false)).collect();
        let loss = f(&mut tape, &bound)?;
        match tape.shape(loss) {
            [1] => Ok(tape.item(loss)),
            other => Err(TensorError::NonScalarLoss(other.to_vec())),
        }
    };

    let mut worst: f64 = 0.0;
    for s in 0..stores.len() {
        for p in 0..stores[s].len() {
            let pid = crate::param::ParamId(p);
            let len = stores[s].get(pid).data.len();
            for i in 0..len {
                let orig = stores[s].get(pid).data[i];
                stores[s].get_mut(pid).data[i] = orig + eps;
                let plus = eval(stores)?;
                stores[s].get_mut(pid).data[i] = orig - eps;
                let minus = eval(stores)?;
                stores[s].get_mut(pid).data[i] = orig;
                let central = (plus - minus) / (2.0 * eps);
                let a = analytic[s][p][i];
                let rel = (a - central).abs() / a.abs().max(central.abs()).max(GRAD_FLOOR);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}
