//! Reference PSNR and SSIM.
//!
//! PSNR is `10 log10(max_val^2 / MSE)` over all elements, with an infinity
//! sentinel for exact matches. SSIM uses an 11x11 Gaussian window with
//! sigma 1.5 and constants `K1 = 0.01`, `K2 = 0.03`, evaluated at valid
//! window positions only and averaged over channels. Both run in `f64`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the inputs match
/// exactly.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if max_val <= 0.0 {
        return Err(Error::InvalidConfig("psnr max_val must be > 0".into()));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Horizontal then vertical weighted filtering at valid positions.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * img[y * w + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean local structural similarity; accepts `[C, H, W]` or `[1, C, H, W]`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if max_val <= 0.0 {
        return Err(Error::InvalidConfig("ssim max_val must be > 0".into()));
    }
    let shape = a.shape();
    let (c, h, w) = match shape.len() {
        3 => (shape[0], shape[1], shape[2]),
        4 if shape[0] == 1 => (shape[1], shape[2], shape[3]),
        _ => {
            return Err(Error::shape(
                "ssim",
                format!("expected [C,H,W] or [1,C,H,W], got {:?}", shape),
            ))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {}x{} smaller than the {}x{} window", h, w, SSIM_WINDOW, SSIM_WINDOW),
        ));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * max_val) * (SSIM_K1 * max_val);
    let c2 = (SSIM_K2 * max_val) * (SSIM_K2 * max_val);
    let hw = h * w;

    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .map(|&v| v.to_f64())
            .collect();
        let pb: Vec<f64> = b.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .map(|&v| v.to_f64())
            .collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();

        let (mu_a, oh, ow) = filter_valid(&pa, h, w, &win);
        let (mu_b, _, _) = filter_valid(&pb, h, w, &win);
        let (m_aa, _, _) = filter_valid(&aa, h, w, &win);
        let (m_bb, _, _) = filter_valid(&bb, h, w, &win);
        let (m_ab, _, _) = filter_valid(&ab, h, w, &win);

        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Aggregate over an evaluation set.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricReport {
    /// Mean per-sample PSNR; infinite if any sample matched exactly.
    pub psnr_db: f64,
    pub ssim: f64,
    pub count: usize,
}

/// Per-sample metric pair.
#[derive(Clone, Debug, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Evaluates prediction/reference pairs (already in the `[0, max_val]`
/// domain) and aggregates by arithmetic mean.
pub fn evaluate_pairs<T: Scalar>(
    pairs: &[(String, Tensor<T>, Tensor<T>)],
    max_val: f64,
) -> Result<(MetricReport, Vec<SampleMetrics>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("metric evaluation needs >= 1 sample".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (id, pred, reference) in pairs {
        let p = psnr(pred, reference, max_val)?;
        let s = ssim(pred, reference, max_val)?;
        psnr_sum += p;
        ssim_sum += s;
        rows.push(SampleMetrics {
            id: id.clone(),
            psnr_db: p,
            ssim: s,
        });
    }
    Ok((
        MetricReport {
            psnr_db: psnr_sum / pairs.len() as f64,
            ssim: ssim_sum / pairs.len() as f64,
            count: pairs.len(),
        },
        rows,
    ))
}
