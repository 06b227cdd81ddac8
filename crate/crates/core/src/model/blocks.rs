//! Tape-level building blocks of the denoising model.
//!
//! The fusion block (`tcf_block_forward`) is the basic unit: a spatial
//! extraction module (SEM) with split self-activation and split channel
//! attention, followed by a feature recalibration module (FRM), with
//! additive injections of a per-channel time embedding and a matching
//! condition feature. All functions run on a [`Tape`] so the same code path
//! serves training, inference, and gradient checking.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::{ConvSpec, PoolMode};
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::{Scalar, Tensor};

/// Normalization epsilon used throughout the model.
pub const NORM_EPS: f64 = 1e-6;

/// Split self-activation: split channels into ordered halves `(a, b)` and
/// return `a * b` elementwise. Replaces a pointwise nonlinearity.
pub fn ssa<T: Scalar>(tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
    let c = channels(tape, x, "ssa")?;
    if c % 2 != 0 {
        return Err(Error::shape("ssa", format!("odd channel count {}", c)));
    }
    let a = tape.slice_channels(x, 0, c / 2)?;
    let b = tape.slice_channels(x, c / 2, c / 2)?;
    tape.mul(a, b)
}

/// Parameters of the split channel attention: two pointwise gate convs on
/// the pooled halves and a pointwise fuse conv.
#[derive(Clone, Copy, Debug)]
pub struct ScaVars {
    pub w1_w: VarId,
    pub w1_b: VarId,
    pub w2_w: VarId,
    pub w2_b: VarId,
    pub w0_w: VarId,
    pub w0_b: VarId,
}

/// Split channel attention: mean-pool gates for the first channel half,
/// max-pool gates for the second; the concatenated per-channel gates
/// modulate the input, and a pointwise conv fuses the result.
pub fn sca<T: Scalar>(tape: &mut Tape<T>, fg: VarId, v: &ScaVars) -> Result<VarId> {
    let c = channels(tape, fg, "sca")?;
    if c % 2 != 0 {
        return Err(Error::shape("sca", format!("odd channel count {}", c)));
    }
    let half = c / 2;
    let g1 = tape.slice_channels(fg, 0, half)?;
    let g2 = tape.slice_channels(fg, half, half)?;
    let p1 = tape.pool_global(g1, PoolMode::Mean)?;
    let p2 = tape.pool_global(g2, PoolMode::Max)?;
    let a1 = tape.conv2d(p1, ConvSpec::pointwise(half, half), v.w1_w, v.w1_b)?;
    let a2 = tape.conv2d(p2, ConvSpec::pointwise(half, half), v.w2_w, v.w2_b)?;
    let gates = tape.concat_channels(a1, a2)?;
    let gated = tape.mul_gate(fg, gates)?;
    let c_out = tape.value(v.w0_w).shape()[0];
    tape.conv2d(gated, ConvSpec::pointwise(c, c_out), v.w0_w, v.w0_b)
}

/// Parameters of the spatial extraction module.
#[derive(Clone, Copy, Debug)]
pub struct SemVars {
    pub norm_gamma: VarId,
    pub norm_beta: VarId,
    pub expand_w: VarId,
    pub expand_b: VarId,
    pub dconv_w: VarId,
    pub dconv_b: VarId,
    pub sca: ScaVars,
}

/// Spatial extraction: normalize, expand channels with a pointwise conv,
/// extract spatial detail with a 3x3 depthwise conv, apply split
/// self-activation, then split channel attention.
pub fn sem_forward<T: Scalar>(tape: &mut Tape<T>, fi: VarId, v: &SemVars) -> Result<VarId> {
    let c = channels(tape, fi, "sem_forward")?;
    let expanded = tape.value(v.expand_w).shape()[0];
    let n = tape.layer_norm(fi, v.norm_gamma, v.norm_beta, NORM_EPS)?;
    let e = tape.conv2d(n, ConvSpec::pointwise(c, expanded), v.expand_w, v.expand_b)?;
    let d = tape.conv2d(e, ConvSpec::depthwise(expanded, 3, 1), v.dconv_w, v.dconv_b)?;
    let g = ssa(tape, d)?;
    sca(tape, g, &v.sca)
}

/// Parameters of the feature recalibration module.
#[derive(Clone, Copy, Debug)]
pub struct FrmVars {
    pub norm_gamma: VarId,
    pub norm_beta: VarId,
    pub v1_w: VarId,
    pub v1_b: VarId,
    pub v2_w: VarId,
    pub v2_b: VarId,
}

/// Feature recalibration: a pointwise inverted bottleneck (expand, split
/// self-activation, project) over normalized features.
pub fn frm_forward<T: Scalar>(tape: &mut Tape<T>, fin: VarId, v: &FrmVars) -> Result<VarId> {
    let c = channels(tape, fin, "frm_forward")?;
    let expanded = tape.value(v.v1_w).shape()[0];
    let c_out = tape.value(v.v2_w).shape()[0];
    let n = tape.layer_norm(fin, v.norm_gamma, v.norm_beta, NORM_EPS)?;
    let a = tape.conv2d(n, ConvSpec::pointwise(c, expanded), v.v1_w, v.v1_b)?;
    let s = ssa(tape, a)?;
    tape.conv2d(s, ConvSpec::pointwise(expanded / 2, c_out), v.v2_w, v.v2_b)
}

/// Parameters of one fusion block.
#[derive(Clone, Copy, Debug)]
pub struct TcfBlockVars {
    pub sem: SemVars,
    pub frm: FrmVars,
}

/// Fusion block: `F_n = SEM(F_i) + F_i + F_t`, `F_o = FRM(F_n) + F_n + F_c`.
/// `ft` is a per-channel embedding broadcast over the spatial dims; `fc`
/// matches the input shape. Either injection may be absent (treated as 0).
pub fn tcf_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    fi: VarId,
    fc: Option<VarId>,
    ft: Option<VarId>,
    v: &TcfBlockVars,
) -> Result<VarId> {
    let s = sem_forward(tape, fi, &v.sem)?;
    let mut n = tape.add(s, fi)?;
    if let Some(ft) = ft {
        n = tape.add_bias(n, ft)?;
    }
    let r = frm_forward(tape, n, &v.frm)?;
    let mut o = tape.add(r, n)?;
    if let Some(fc) = fc {
        o = tape.add(o, fc)?;
    }
    Ok(o)
}

/// Parameters of the shared time MLP.
#[derive(Clone, Copy, Debug)]
pub struct TimeMlpVars {
    pub fc1_w: VarId,
    pub fc1_b: VarId,
    pub fc2_w: VarId,
    pub fc2_b: VarId,
}

/// Sinusoidal position features for step `t`: `[sin(t*w_k) | cos(t*w_k)]`
/// with `w_k = 10000^(-2k/dim)`, `k < dim/2`.
pub fn sinusoidal_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out.push((t as f64 * w).sin());
    }
    for k in 0..half {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out.push((t as f64 * w).cos());
    }
    out
}

/// Shared time embedding: sinusoidal features through a two-layer MLP with
/// a SiLU gate. Per-block linear projections of the result produce the
/// per-channel injections.
pub fn time_encode<T: Scalar>(
    tape: &mut Tape<T>,
    t: usize,
    sin_dim: usize,
    v: &TimeMlpVars,
) -> Result<VarId> {
    if sin_dim < 2 || sin_dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "sinusoidal dim must be even and >= 2, got {}",
            sin_dim
        )));
    }
    let feats: Vec<T> = sinusoidal_features(t, sin_dim)
        .into_iter()
        .map(T::from_f64)
        .collect();
    let f = tape.leaf(Tensor::new(vec![sin_dim], feats)?);
    let h = tape.linear(f, v.fc1_w, v.fc1_b)?;
    let h = tape.silu(h)?;
    tape.linear(h, v.fc2_w, v.fc2_b)
}

fn channels<T: Scalar>(tape: &Tape<T>, x: VarId, op: &'static str) -> Result<usize> {
    let v = tape.value(x);
    if v.rank() != 3 {
        return Err(Error::shape(op, format!("input {:?}, expected [C,H,W]", v.shape())));
    }
    Ok(v.shape()[0])
}

fn kaiming<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::<T>::randn(shape, rng).scale(T::from_f64(std))
}

impl TcfBlockVars {
    /// Standalone fusion block with Kaiming-initialized weights, registered
    /// as tape leaves. `expansion * channels` must be even.
    pub fn init_random<T: Scalar>(
        tape: &mut Tape<T>,
        channels: usize,
        expansion: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels % 2 != 0 || (expansion * channels) % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "fusion block needs even channel counts, got C={} expansion={}",
                channels, expansion
            )));
        }
        let e = expansion * channels;
        let mid = e / 2;
        let half = mid / 2;
        if mid % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "split channel attention needs an even expanded half, got {}",
                mid
            )));
        }
        let mut conv = |t: &mut Tape<T>, co: usize, ci: usize, kh: usize, kw: usize, g: usize| {
            let fan_in = ci / g * kh * kw;
            let w = t.leaf(kaiming(vec![co, ci / g, kh, kw], fan_in, rng));
            let b = t.leaf(Tensor::zeros(vec![co]));
            (w, b)
        };
        let (expand_w, expand_b) = conv(tape, e, channels, 1, 1, 1);
        let (dconv_w, dconv_b) = conv(tape, e, e, 3, 3, e);
        let (w1_w, w1_b) = conv(tape, half, half, 1, 1, 1);
        let (w2_w, w2_b) = conv(tape, half, half, 1, 1, 1);
        let (w0_w, w0_b) = conv(tape, channels, mid, 1, 1, 1);
        let (v1_w, v1_b) = conv(tape, e, channels, 1, 1, 1);
        let (v2_w, v2_b) = conv(tape, channels, mid, 1, 1, 1);
        let norm = |t: &mut Tape<T>| {
            (
                t.leaf(Tensor::full(vec![channels], T::one())),
                t.leaf(Tensor::zeros(vec![channels])),
            )
        };
        let (sem_gamma, sem_beta) = norm(tape);
        let (frm_gamma, frm_beta) = norm(tape);
        Ok(TcfBlockVars {
            sem: SemVars {
                norm_gamma: sem_gamma,
                norm_beta: sem_beta,
                expand_w,
                expand_b,
                dconv_w,
                dconv_b,
                sca: ScaVars {
                    w1_w,
                    w1_b,
                    w2_w,
                    w2_b,
                    w0_w,
                    w0_b,
                },
            },
            frm: FrmVars {
                norm_gamma: frm_gamma,
                norm_beta: frm_beta,
                v1_w,
                v1_b,
                v2_w,
                v2_b,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, DEFAULT_STEP};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn ssa_examples() {
        let mut tape = Tape::<f64>::new();
        // channels [3], [4] at 1x1 -> [12]
        let x = tape.leaf(t3(2, 1, 1, vec![3.0, 4.0]));
        let y = ssa(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0]);

        // second half all ones leaves the first half unchanged
        let x2 = tape.leaf(t3(4, 1, 2, vec![1.0, 2.0, 3.0, 4.0, 1.0, 1.0, 1.0, 1.0]));
        let y2 = ssa(&mut tape, x2).unwrap();
        assert_eq!(tape.value(y2).data(), &[1.0, 2.0, 3.0, 4.0]);

        // zero input -> zero output
        let x3 = tape.leaf(Tensor::zeros(vec![2, 2, 2]));
        let y3 = ssa(&mut tape, x3).unwrap();
        assert!(tape.value(y3).data().iter().all(|&v| v == 0.0));

        // odd channels rejected
        let x4 = tape.leaf(Tensor::zeros(vec![3, 1, 1]));
        assert!(ssa(&mut tape, x4).is_err());
    }

    fn identity_sca_vars(tape: &mut Tape<f64>, c: usize) -> ScaVars {
        let half = c / 2;
        let eye = |t: &mut Tape<f64>, n: usize| {
            let mut w = vec![0.0; n * n];
            for i in 0..n {
                w[i * n + i] = 1.0;
            }
            let w = t.leaf(Tensor::new(vec![n, n, 1, 1], w).unwrap());
            let b = t.leaf(Tensor::zeros(vec![n]));
            (w, b)
        };
        let (w1_w, w1_b) = eye(tape, half);
        let (w2_w, w2_b) = eye(tape, half);
        let (w0_w, w0_b) = eye(tape, c);
        ScaVars {
            w1_w,
            w1_b,
            w2_w,
            w2_b,
            w0_w,
            w0_b,
        }
    }

    // Hand-worked case: mean gates on the first half, max gates on the
    // second, identity convs everywhere.
    #[test]
    fn sca_hand_example() {
        let mut tape = Tape::<f64>::new();
        let fg = tape.leaf(t3(
            4,
            1,
            2,
            vec![1.0, 3.0, 2.0, 2.0, 0.0, 4.0, 1.0, 1.0],
        ));
        let vars = identity_sca_vars(&mut tape, 4);
        let out = sca(&mut tape, fg, &vars).unwrap();
        assert_eq!(
            tape.value(out).data(),
            &[2.0, 6.0, 4.0, 4.0, 0.0, 16.0, 1.0, 1.0]
        );
    }

    #[test]
    fn sca_unit_gates_identity() {
        // constant-1 channels: mean gate = max gate = 1, so the block is the
        // identity under identity convs.
        let mut tape = Tape::<f64>::new();
        let fg = tape.leaf(t3(4, 1, 2, vec![1.0; 8]));
        let vars = identity_sca_vars(&mut tape, 4);
        let out = sca(&mut tape, fg, &vars).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(fg).data());
    }

    #[test]
    fn sca_constant_channels_agree() {
        // per-channel constant input: mean and max pooling coincide
        let mut tape = Tape::<f64>::new();
        let mut data = Vec::new();
        for c in 0..4 {
            data.extend([c as f64 + 0.5; 4]);
        }
        let fg = tape.leaf(t3(4, 2, 2, data.clone()));
        let vars = identity_sca_vars(&mut tape, 4);
        let out = sca(&mut tape, fg, &vars).unwrap();
        // each channel is scaled by its own constant
        for c in 0..4 {
            let k = c as f64 + 0.5;
            for i in 0..4 {
                assert_relative_eq!(tape.value(out).data()[c * 4 + i], k * k, epsilon = 1e-12);
            }
        }
        let _ = data;
    }

    #[test]
    fn block_shape_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let vars = TcfBlockVars::init_random(&mut tape, 4, 2, &mut rng).unwrap();
        let x = tape.leaf(Tensor::randn(vec![4, 4, 4], &mut rng));
        let sem_out = sem_forward(&mut tape, x, &vars.sem).unwrap();
        assert_eq!(tape.value(sem_out).shape(), &[4, 4, 4]);
        let frm_out = frm_forward(&mut tape, x, &vars.frm).unwrap();
        assert_eq!(tape.value(frm_out).shape(), &[4, 4, 4]);

        // zero fuse/project weights collapse both modules to zero
        let mut tape2 = Tape::<f64>::new();
        let mut vars2 = TcfBlockVars::init_random(&mut tape2, 4, 2, &mut rng).unwrap();
        vars2.sem.sca.w0_w = tape2.leaf(Tensor::zeros(vec![4, 4, 1, 1]));
        vars2.frm.v2_w = tape2.leaf(Tensor::zeros(vec![4, 4, 1, 1]));
        let x2 = tape2.leaf(Tensor::randn(vec![4, 4, 4], &mut rng));
        let s2 = sem_forward(&mut tape2, x2, &vars2.sem).unwrap();
        assert!(tape2.value(s2).data().iter().all(|&v| v == 0.0));
        let f2 = frm_forward(&mut tape2, x2, &vars2.frm).unwrap();
        assert!(tape2.value(f2).data().iter().all(|&v| v == 0.0));

        // with zero module weights and no injections the block is the identity
        let y = tcf_block_forward(&mut tape2, x2, None, None, &vars2).unwrap();
        assert_eq!(tape2.value(y).data(), tape2.value(x2).data());
    }

    #[test]
    fn block_injection_additivity() {
        // with zero FRM weights, output(F_c) - output(0) = F_c
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f64>::new();
        let mut vars = TcfBlockVars::init_random(&mut tape, 4, 2, &mut rng).unwrap();
        vars.frm.v2_w = tape.leaf(Tensor::zeros(vec![4, 4, 1, 1]));
        let x = tape.leaf(Tensor::randn(vec![4, 3, 3], &mut rng));
        let fc_val = Tensor::<f64>::randn(vec![4, 3, 3], &mut rng);
        let fc = tape.leaf(fc_val.clone());
        let with_fc = tcf_block_forward(&mut tape, x, Some(fc), None, &vars).unwrap();
        let without = tcf_block_forward(&mut tape, x, None, None, &vars).unwrap();
        let diff = tape.sub(with_fc, without).unwrap();
        for (d, f) in tape.value(diff).data().iter().zip(fc_val.data()) {
            assert_relative_eq!(d, f, epsilon = 1e-12);
        }
    }

    #[test]
    fn block_shape_preserved_with_injections() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::<f64>::new();
        let vars = TcfBlockVars::init_random(&mut tape, 6, 2, &mut rng).unwrap();
        let x = tape.leaf(Tensor::randn(vec![6, 2, 4], &mut rng));
        let fc = tape.leaf(Tensor::randn(vec![6, 2, 4], &mut rng));
        let ft = tape.leaf(Tensor::randn(vec![6, 1, 1], &mut rng));
        let y = tcf_block_forward(&mut tape, x, Some(fc), Some(ft), &vars).unwrap();
        assert_eq!(tape.value(y).shape(), &[6, 2, 4]);
    }

    #[test]
    fn time_features_examples() {
        // t = 0: all sines 0, all cosines 1
        let f = sinusoidal_features(0, 8);
        assert!(f[..4].iter().all(|&v| v == 0.0));
        assert!(f[4..].iter().all(|&v| v == 1.0));

        // distinct steps give distinct features over a full-scale range
        let mut seen = std::collections::HashSet::new();
        for t in 1..=2000 {
            let key = sinusoidal_features(t, 8)
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>();
            assert!(seen.insert(key), "duplicate features at t={}", t);
        }
    }

    #[test]
    fn time_encode_shape_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sin_dim = 4usize;
        let time_dim = 8usize;
        let fc1_w = Tensor::<f64>::randn(vec![time_dim, sin_dim], &mut rng);
        let fc1_b = Tensor::<f64>::randn(vec![time_dim], &mut rng);
        let fc2_w = Tensor::<f64>::randn(vec![time_dim, time_dim], &mut rng);
        let fc2_b = Tensor::<f64>::randn(vec![time_dim], &mut rng);

        let mut tape = Tape::<f64>::new();
        let vars = TimeMlpVars {
            fc1_w: tape.leaf(fc1_w.clone()),
            fc1_b: tape.leaf(fc1_b.clone()),
            fc2_w: tape.leaf(fc2_w.clone()),
            fc2_b: tape.leaf(fc2_b.clone()),
        };
        for t in [0usize, 1, 7, 2000] {
            let e = time_encode(&mut tape, t, sin_dim, &vars).unwrap();
            assert_eq!(tape.value(e).shape(), &[time_dim]);
        }

        // gradient through the MLP weights
        let err = grad_check(&fc1_w, DEFAULT_STEP, |t, w| {
            let vars = TimeMlpVars {
                fc1_w: w,
                fc1_b: t.leaf(fc1_b.clone()),
                fc2_w: t.leaf(fc2_w.clone()),
                fc2_b: t.leaf(fc2_b.clone()),
            };
            let e = time_encode(t, 5, sin_dim, &vars)?;
            let sq = t.mul(e, e)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-6, "time mlp rel err {}", err);
    }

    // Finite-difference oracle over the block ops, input side.
    #[test]
    fn block_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::randn(vec![4, 4, 4], &mut rng);

        let err_ssa = grad_check(&x, DEFAULT_STEP, |t, x| {
            let y = ssa(t, x)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(err_ssa < 1e-6, "ssa {}", err_ssa);

        let init_rng = ChaCha8Rng::seed_from_u64(22);
        let err_sem = grad_check(&x, DEFAULT_STEP, |t, x| {
            let mut r = init_rng.clone();
            let vars = TcfBlockVars::init_random(t, 4, 2, &mut r)?;
            let y = sem_forward(t, x, &vars.sem)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err_sem < 1e-4, "sem {}", err_sem);

        let err_frm = grad_check(&x, DEFAULT_STEP, |t, x| {
            let mut r = init_rng.clone();
            let vars = TcfBlockVars::init_random(t, 4, 2, &mut r)?;
            let y = frm_forward(t, x, &vars.frm)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err_frm < 1e-4, "frm {}", err_frm);

        let err_block = grad_check(&x, DEFAULT_STEP, |t, x| {
            let mut r = init_rng.clone();
            let vars = TcfBlockVars::init_random(t, 4, 2, &mut r)?;
            let y = tcf_block_forward(t, x, None, None, &vars)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err_block < 1e-4, "tcf block {}", err_block);

        let err_sca = grad_check(&x, DEFAULT_STEP, |t, x| {
            let mut r = init_rng.clone();
            let vars = TcfBlockVars::init_random(t, 4, 2, &mut r)?;
            let y = sca(t, x, &vars.sem.sca)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err_sca < 1e-6, "sca {}", err_sca);
    }
}
