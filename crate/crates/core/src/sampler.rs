//! Iterative-refinement sampling with reduced step subsequences.
//!
//! Sampling starts from unit Gaussian noise and repeatedly (1) predicts the
//! clean image, (2) clamps it to the data range, (3) converts it into an
//! implied noise estimate, and (4) takes a posterior step toward the next
//! selected timestep. Skipped steps use the effective `alpha` given by the
//! ratio of `alpha_bar` at the selected steps, so any `1 <= k <= T` is
//! consistent; the final step injects no noise and returns the clean
//! prediction itself, which makes single-step sampling exact for a
//! data-prediction model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::numerics::{Scalar, Tensor};
use crate::schedule::NoiseSchedule;
use crate::training::TargetKind;

/// Sampling options.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of refinement steps `k`, `1 <= k <= T`.
    pub steps: usize,
    pub seed: u64,
    /// Sample with the EMA weights (the default) or the raw weights.
    pub use_ema: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 1,
            seed: 0,
            use_ema: true,
        }
    }
}

/// Descending timestep subsequence: `k` uniformly strided steps starting at
/// `T` (`k = 1` gives `[T]`, `k = T` the full chain).
pub fn step_subsequence(t_max: usize, k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > t_max {
        return Err(Error::InvalidConfig(format!(
            "step count k={k} outside 1..={t_max}"
        )));
    }
    let stride = t_max / k;
    Ok((0..k).map(|i| t_max - i * stride).collect())
}

/// One posterior refinement step from `t` to `t - 1`. `z` must be zero at
/// `t = 1` (the terminal step adds no noise). The predicted clean image is
/// taken as given; range clamping is the caller's policy.
pub fn ancestral_step<T: Scalar>(
    y_t: &Tensor<T>,
    t: usize,
    y0_hat: &Tensor<T>,
    schedule: &NoiseSchedule,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    if t < 1 || t > schedule.t_max() {
        return Err(Error::InvalidSchedule(format!(
            "ancestral_step: t={} outside 1..={}",
            t,
            schedule.t_max()
        )));
    }
    if z.shape() != y_t.shape() {
        return Err(Error::shape(
            "ancestral_step",
            format!("z {:?} vs y_t {:?}", z.shape(), y_t.shape()),
        ));
    }
    if t == 1 && z.data().iter().any(|v| *v != T::zero()) {
        return Err(Error::InvalidConfig(
            "ancestral_step requires z = 0 at t = 1".into(),
        ));
    }
    posterior_jump(
        y_t,
        schedule.alpha_bar(t),
        schedule.alpha_bar(t - 1),
        y0_hat,
        z,
    )
}

/// Posterior step between two noise levels `abar_t -> abar_prev` with
/// effective `alpha = abar_t / abar_prev`. A jump to `abar_prev = 1`
/// returns the clean prediction exactly.
fn posterior_jump<T: Scalar>(
    y_t: &Tensor<T>,
    abar_t: f64,
    abar_prev: f64,
    y0_hat: &Tensor<T>,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    if y0_hat.shape() != y_t.shape() {
        return Err(Error::shape(
            "posterior_jump",
            format!("y0_hat {:?} vs y_t {:?}", y0_hat.shape(), y_t.shape()),
        ));
    }
    if abar_prev >= 1.0 {
        // algebraically (y_t - sqrt(1-abar) eps_hat)/sqrt(abar) == y0_hat
        return Ok(y0_hat.clone());
    }
    let alpha = abar_t / abar_prev;
    let inv_sqrt_alpha = T::from_f64(1.0 / alpha.sqrt());
    // eps_hat = (y_t - sqrt(abar_t) y0_hat) / sqrt(1 - abar_t)
    let c_y0 = T::from_f64(abar_t.sqrt());
    let inv_sig = T::from_f64(1.0 / (1.0 - abar_t).sqrt());
    let eps_coeff = T::from_f64((1.0 - alpha) / (1.0 - abar_t).sqrt());
    let noise_scale = T::from_f64((1.0 - alpha).sqrt());

    let mut data = Vec::with_capacity(y_t.len());
    for i in 0..y_t.len() {
        let yt = y_t.data()[i];
        let eps_hat = (yt - c_y0 * y0_hat.data()[i]) * inv_sig;
        data.push(inv_sqrt_alpha * (yt - eps_coeff * eps_hat) + noise_scale * z.data()[i]);
    }
    Tensor::new(y_t.shape().to_vec(), data)
}

/// Full sampling run for one condition stack `x`: draws `y_T` from the unit
/// Gaussian, iterates the posterior over the step subsequence, and returns
/// the final clean prediction in `[-1, 1]`. Deterministic in
/// `(cfg.seed, stream)`; independent samples should use distinct streams.
pub fn sample<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    target: TargetKind,
    x: &Tensor<T>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    stream: u64,
) -> Result<Tensor<T>> {
    let seq = step_subsequence(schedule.t_max(), cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);

    let (c, h, w) = (
        model.config().in_channels,
        x.shape()[2],
        x.shape()[3],
    );
    let pyramid = model.condition_pyramid(params, x)?;
    let mut y = Tensor::<T>::randn(vec![1, c, h, w], &mut rng);
    let one = T::one();

    for (i, &t) in seq.iter().enumerate() {
        let pred = model.predict_with_pyramid(params, &y, t, &pyramid)?;
        let y0_hat = match target {
            TargetKind::Data => pred,
            TargetKind::Noise => {
                // invert the closed-form forward process
                let ab = schedule.alpha_bar(t);
                let c_eps = T::from_f64((1.0 - ab).sqrt());
                let inv = T::from_f64(1.0 / ab.sqrt());
                y.zip_map(&pred, "noise_to_data", |yt, e| (yt - c_eps * e) * inv)?
            }
        }
        .clamp(-one, one);

        let t_prev = seq.get(i + 1).copied().unwrap_or(0);
        if t_prev == 0 {
            y = y0_hat;
        } else {
            let z = Tensor::<T>::randn(y.shape().to_vec(), &mut rng);
            y = posterior_jump(
                &y,
                schedule.alpha_bar(t),
                schedule.alpha_bar(t_prev),
                &y0_hat,
                &z,
            )?;
        }
        y.ensure_finite("sampler state")?;
    }
    Ok(y)
}
