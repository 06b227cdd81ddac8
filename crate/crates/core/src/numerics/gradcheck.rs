//! Finite-difference gradient checking.
//!
//! The checker evaluates a scalar-valued tape function both through the
//! backward pass and through central finite differences, and reports the
//! worst relative disagreement. It runs in `f64` only; `f32` gradients are
//! validated indirectly (same code path, different scalar).

use super::tape::{Tape, VarId};
use super::Tensor;
use crate::error::{Error, Result};

/// Relative-error floor: coordinates where both gradients are smaller than
/// this are compared against it instead of their own magnitude.
pub const REL_FLOOR: f64 = 1e-8;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the backward-pass gradient of `f` at `x` against central finite
/// differences with step `h`; returns the maximum relative error over all
/// coordinates, with denominator `max(|g_fd|, |g_ad|, 1e-8)`.
pub fn grad_check<F>(x: &Tensor<f64>, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, VarId) -> Result<VarId>,
{
    if h <= 0.0 {
        return Err(Error::InvalidConfig("grad_check step must be > 0".into()));
    }

    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = f(&mut tape, xid)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("f must be scalar-valued, got {:?}", tape.value(out).shape()),
        ));
    }
    tape.value(out).ensure_finite("grad_check f(x)")?;
    let grads = tape.backward(out)?;
    let g_ad = grads.wrt_or_zeros(xid, x.shape());

    let eval = |pt: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(pt.clone());
        let o = f(&mut t, id)?;
        let v = t.value(o).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let g_fd = (fp - fm) / (2.0 * h);
        let g = g_ad.data()[i];
        let denom = g_fd.abs().max(g.abs()).max(REL_FLOOR);
        worst = worst.max((g_fd - g).abs() / denom);
    }
    Ok(worst)
}
