//! Noise schedules and the closed-form forward process.
//!
//! A schedule is the per-step variance sequence `beta_t` together with the
//! derived `alpha_t = 1 - beta_t` and cumulative products `alpha_bar_t`.
//! Three families are supported: linear in `beta`, and cosine/sigmoid
//! defined through `alpha_bar` with the per-step `beta` clipped at 0.999.
//!
//! Steps are 1-indexed; `alpha_bar(0)` is defined as 1 for boundary algebra.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Schedule family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Sigmoid,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
            ScheduleKind::Sigmoid => write!(f, "sigmoid"),
        }
    }
}

/// Family constants. Unset fields fall back to the defaults below.
///
/// Linear: `beta_start`/`beta_end` are reference values for a 1000-step
/// schedule and are rescaled by `1000/T` (capped at the beta clip) when
/// defaulted, keeping the total injected noise roughly constant across `T`.
/// Explicit values are used as given, without rescaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    /// Cosine offset `s`.
    pub cosine_s: Option<f64>,
    /// Sigmoid logit range endpoints.
    pub sigmoid_start: Option<f64>,
    pub sigmoid_end: Option<f64>,
}

pub const LINEAR_BETA_START_REF: f64 = 1e-4;
pub const LINEAR_BETA_END_REF: f64 = 0.02;
pub const LINEAR_REF_STEPS: f64 = 1000.0;
pub const COSINE_S: f64 = 0.008;
pub const SIGMOID_START: f64 = -3.0;
pub const SIGMOID_END: f64 = 3.0;
pub const BETA_CLIP: f64 = 0.999;

/// Serializable schedule description (family, length, constants); the
/// form used in configs and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub t_max: usize,
    #[serde(default)]
    pub params: ScheduleParams,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.kind, self.t_max, &self.params)
    }
}

/// Precomputed `beta`/`alpha`/`alpha_bar` tables of length `T`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the tables for a family; errors on `T < 1`, out-of-range
    /// constants, or a constructed table violating the invariants
    /// (`0 < beta < 1`, strictly decreasing `alpha_bar`, strictly
    /// increasing `beta` for the linear family).
    pub fn build(kind: ScheduleKind, t_max: usize, params: &ScheduleParams) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::InvalidSchedule("T must be >= 1".into()));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                let scale = LINEAR_REF_STEPS / t_max as f64;
                let start = params
                    .beta_start
                    .unwrap_or((LINEAR_BETA_START_REF * scale).min(BETA_CLIP / 2.0));
                let end = params
                    .beta_end
                    .unwrap_or((LINEAR_BETA_END_REF * scale).min(BETA_CLIP));
                if !(0.0..1.0).contains(&start) || !(0.0..1.0).contains(&end) || start <= 0.0 {
                    return Err(Error::InvalidSchedule(format!(
                        "linear endpoints must lie in (0,1): start={start}, end={end}"
                    )));
                }
                if t_max > 1 && end <= start {
                    return Err(Error::InvalidSchedule(
                        "linear schedule requires beta_end > beta_start".into(),
                    ));
                }
                (0..t_max)
                    .map(|i| {
                        if t_max == 1 {
                            start
                        } else {
                            start + (end - start) * i as f64 / (t_max - 1) as f64
                        }
                    })
                    .collect::<Vec<_>>()
            }
            ScheduleKind::Cosine => {
                let s = params.cosine_s.unwrap_or(COSINE_S);
                if s <= 0.0 || s >= 1.0 {
                    return Err(Error::InvalidSchedule(format!(
                        "cosine offset must lie in (0,1): s={s}"
                    )));
                }
                let f = |t: f64| {
                    let x = (t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                betas_from_alpha_bar(t_max, |t| f(t as f64) / f(0.0))
            }
            ScheduleKind::Sigmoid => {
                let start = params.sigmoid_start.unwrap_or(SIGMOID_START);
                let end = params.sigmoid_end.unwrap_or(SIGMOID_END);
                if end <= start {
                    return Err(Error::InvalidSchedule(format!(
                        "sigmoid range must satisfy end > start: start={start}, end={end}"
                    )));
                }
                let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
                let lambda = |t: f64| start + t / t_max as f64 * (end - start);
                let lo = sig(-lambda(t_max as f64));
                let hi = sig(-lambda(0.0));
                betas_from_alpha_bar(t_max, |t| (sig(-lambda(t as f64)) - lo) / (hi - lo))
            }
        };

        let mut alphas = Vec::with_capacity(t_max);
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0f64;
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "beta_{} = {} outside (0,1)",
                    i + 1,
                    b
                )));
            }
            let a = 1.0 - b;
            prod *= a;
            alphas.push(a);
            alpha_bars.push(prod);
        }
        for i in 1..t_max {
            if alpha_bars[i] >= alpha_bars[i - 1] {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar not strictly decreasing at t={}",
                    i + 1
                )));
            }
            if kind == ScheduleKind::Linear && betas[i] <= betas[i - 1] {
                return Err(Error::InvalidSchedule(format!(
                    "linear beta not strictly increasing at t={}",
                    i + 1
                )));
            }
        }
        Ok(NoiseSchedule {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize, op: &'static str) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(Error::InvalidSchedule(format!(
                "{op}: t={} outside 1..={}",
                t,
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(t)` with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Closed-form forward sample: `sqrt(abar_t) y0 + sqrt(1-abar_t) eps`.
    pub fn q_sample<T: Scalar>(
        &self,
        y0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_t(t, "q_sample")?;
        let ab = self.alpha_bar(t);
        let c0 = T::from_f64(ab.sqrt());
        let c1 = T::from_f64((1.0 - ab).sqrt());
        let out = y0.zip_map(eps, "q_sample", |y, e| c0 * y + c1 * e)?;
        out.ensure_finite("q_sample output")?;
        Ok(out)
    }

    /// Inverts the forward form: `eps = (y_t - sqrt(abar_t) y0) / sqrt(1-abar_t)`.
    pub fn eps_from_y0<T: Scalar>(
        &self,
        y_t: &Tensor<T>,
        y0_hat: &Tensor<T>,
        t: usize,
    ) -> Result<Tensor<T>> {
        self.check_t(t, "eps_from_y0")?;
        let ab = self.alpha_bar(t);
        let c0 = T::from_f64(ab.sqrt());
        let inv = T::from_f64(1.0 / (1.0 - ab).sqrt());
        y_t.zip_map(y0_hat, "eps_from_y0", |yt, y0| (yt - c0 * y0) * inv)
    }

    /// Samples `y_t` by composing `t` single-step Gaussian transitions.
    /// Only used as a statistical oracle against [`Self::q_sample`].
    pub fn diffusion_chain_sample<T: Scalar>(
        &self,
        y0: &Tensor<T>,
        t: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        self.check_t(t, "diffusion_chain_sample")?;
        let mut data = y0.data().to_vec();
        for step in 1..=t {
            let keep = T::from_f64(self.alpha(step).sqrt());
            let noise = T::from_f64(self.beta(step).sqrt());
            for v in &mut data {
                let z: f64 = rng.sample(StandardNormal);
                *v = keep * *v + noise * T::from_f64(z);
            }
        }
        Tensor::new(y0.shape().to_vec(), data)
    }
}

/// Derives per-step betas from an `alpha_bar` profile, clipping each beta
/// at [`BETA_CLIP`].
fn betas_from_alpha_bar(t_max: usize, alpha_bar: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut prev = alpha_bar(0);
    (1..=t_max)
        .map(|t| {
            let cur = alpha_bar(t);
            let beta = (1.0 - cur / prev).min(BETA_CLIP);
            prev = cur;
            beta
        })
        .collect()
}
