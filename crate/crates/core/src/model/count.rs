//! Analytic parameter and multiply-accumulate counters.
//!
//! Conventions: a convolution contributes `C_out * (C_in/groups) * kh * kw`
//! weight parameters plus `C_out` biases, and `weights * H_out * W_out`
//! MACs; a linear layer is the `1x1` case. Normalization affine scales
//! count as parameters but zero MACs; activations, pooling, pixel shuffle,
//! and elementwise ops count zero. The walk mirrors the model construction
//! exactly, so the parameter total equals the size of an initialized
//! parameter set (covered by tests).

use super::{ModelConfig, STAGES};
use crate::error::Result;
use crate::numerics::ops::ConvSpec;

/// Per-section and total parameter/MAC counts for one forward pass.
#[derive(Clone, Debug)]
pub struct EfficiencyReport {
    pub params: u64,
    pub macs: u64,
    pub sections: Vec<Section>,
}

#[derive(Clone, Debug)]
pub struct Section {
    pub name: &'static str,
    pub params: u64,
    pub macs: u64,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    params: u64,
    macs: u64,
}

impl Tally {
    fn conv(&mut self, spec: &ConvSpec, oh: usize, ow: usize) {
        let weights =
            (spec.out_channels * (spec.in_channels / spec.groups) * spec.kernel.0 * spec.kernel.1)
                as u64;
        self.params += weights + spec.out_channels as u64;
        self.macs += weights * (oh * ow) as u64;
    }

    fn linear(&mut self, d_out: usize, d_in: usize) {
        self.params += (d_out * d_in + d_out) as u64;
        self.macs += (d_out * d_in) as u64;
    }

    fn norm(&mut self, c: usize) {
        self.params += 2 * c as u64;
    }

    /// One fusion block at `c` channels and `h x w` spatial size.
    fn block(&mut self, c: usize, expansion: usize, time_dim: Option<usize>, h: usize, w: usize) {
        let e = expansion * c;
        let mid = e / 2;
        let half = mid / 2;
        self.norm(c);
        self.conv(&ConvSpec::pointwise(c, e), h, w);
        self.conv(&ConvSpec::depthwise(e, 3, 1), h, w);
        self.conv(&ConvSpec::pointwise(half, half), 1, 1);
        self.conv(&ConvSpec::pointwise(half, half), 1, 1);
        self.conv(&ConvSpec::pointwise(mid, c), h, w);
        self.norm(c);
        self.conv(&ConvSpec::pointwise(c, e), h, w);
        self.conv(&ConvSpec::pointwise(mid, c), h, w);
        if let Some(td) = time_dim {
            self.linear(c, td);
        }
    }
}

/// Counts for one denoiser+condition-encoder forward at `h x w` input size.
pub fn efficiency_report(cfg: &ModelConfig, h: usize, w: usize) -> Result<EfficiencyReport> {
    cfg.validate()?;
    let td = cfg.resolved_time_dim();
    let sh = |s: usize| (h >> s, w >> s);
    let mut sections = Vec::new();

    let mut stem = Tally::default();
    stem.conv(&ConvSpec::pointwise(cfg.in_channels, cfg.stage_channels(0)), h, w);
    sections.push(("stem", stem));

    let mut enc = Tally::default();
    for s in 0..STAGES {
        let (hs, ws) = sh(s);
        for _ in 0..cfg.enc_depths[s] {
            enc.block(cfg.stage_channels(s), cfg.expansion, Some(td), hs, ws);
        }
        if s + 1 < STAGES {
            enc.conv(&super::down_spec(cfg, s), hs / 2, ws / 2);
        }
    }
    sections.push(("encoder", enc));

    let mut mid = Tally::default();
    let (h3, w3) = sh(STAGES - 1);
    for _ in 0..cfg.mid_depth {
        mid.block(cfg.stage_channels(3), cfg.expansion, Some(td), h3, w3);
    }
    sections.push(("middle", mid));

    let mut dec = Tally::default();
    for j in 0..STAGES {
        let s = STAGES - 1 - j;
        let (hs, ws) = sh(s);
        if j > 0 {
            // pointwise upsample conv runs at the source (deeper) spatial size
            let (hsrc, wsrc) = sh(s + 1);
            dec.conv(
                &ConvSpec::pointwise(cfg.stage_channels(s + 1), 4 * cfg.stage_channels(s)),
                hsrc,
                wsrc,
            );
        }
        for _ in 0..cfg.dec_depths[j] {
            dec.block(cfg.stage_channels(s), cfg.expansion, Some(td), hs, ws);
        }
    }
    sections.push(("decoder", dec));

    let mut head = Tally::default();
    head.conv(&ConvSpec::pointwise(cfg.stage_channels(0), cfg.in_channels), h, w);
    sections.push(("head", head));

    let mut cond = Tally::default();
    cond.conv(
        &ConvSpec::pointwise(cfg.n_temporal * cfg.in_channels, cfg.stage_channels(0)),
        h,
        w,
    );
    for s in 0..STAGES {
        let (hs, ws) = sh(s);
        cond.block(cfg.stage_channels(s), cfg.expansion, None, hs, ws);
        if s + 1 < STAGES {
            cond.conv(&super::down_spec(cfg, s), hs / 2, ws / 2);
        }
    }
    sections.push(("condition_encoder", cond));

    let mut time = Tally::default();
    time.linear(td, cfg.width);
    time.linear(td, td);
    sections.push(("time_encoder", time));

    let params = sections.iter().map(|(_, t)| t.params).sum();
    let macs = sections.iter().map(|(_, t)| t.macs).sum();
    Ok(EfficiencyReport {
        params,
        macs,
        sections: sections
            .into_iter()
            .map(|(name, t)| Section {
                name,
                params: t.params,
                macs: t.macs,
            })
            .collect(),
    })
}

/// Total learnable parameters of the model.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    // spatial size does not affect parameter counts
    Ok(efficiency_report(cfg, super::SPATIAL_DIVISOR, super::SPATIAL_DIVISOR)?.params)
}

/// Total conv/linear MACs of one forward pass at `h x w`.
pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    if h % super::SPATIAL_DIVISOR != 0 || w % super::SPATIAL_DIVISOR != 0 {
        return Err(crate::error::Error::InvalidConfig(format!(
            "spatial dims {}x{} must be multiples of {}",
            h,
            w,
            super::SPATIAL_DIVISOR
        )));
    }
    Ok(efficiency_report(cfg, h, w)?.macs)
}
