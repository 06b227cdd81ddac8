//! The conditional denoising model.
//!
//! A four-stage UNet built from fusion blocks ([`blocks`]), driven by a
//! decoupled condition encoder (a pyramid over the stacked temporal views)
//! and a shared sinusoidal time embedding with per-block projections.
//! Decoder stages upsample with a pointwise conv followed by pixel shuffle
//! and merge encoder features by elementwise sum. The output head is
//! zero-initialized so an untrained model predicts near-zero.

pub mod blocks;
pub mod count;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::ConvSpec;
use crate::numerics::tape::{Grads, Tape, VarId};
use crate::numerics::{Scalar, Tensor};
use blocks::{FrmVars, ScaVars, SemVars, TcfBlockVars, TimeMlpVars};

/// Skip-connection fusion. Only elementwise sum is supported; it adds no
/// parameters and channel concatenation is deliberately out of scope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipKind {
    Sum,
}

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Base channel count; stage `s` has `width * channel_mults[s]` channels.
    pub width: usize,
    pub enc_depths: [usize; 4],
    pub mid_depth: usize,
    /// Decoder stage depths in execution order (deepest stage first).
    pub dec_depths: [usize; 4],
    pub channel_mults: [usize; 4],
    pub in_channels: usize,
    /// Number of temporal views in the condition stack.
    pub n_temporal: usize,
    /// Time-embedding width; 0 means the default `4 * width`.
    pub time_dim: usize,
    /// Channel expansion factor inside the fusion blocks.
    pub expansion: usize,
    pub skip: SkipKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            enc_depths: [1, 1, 1, 1],
            mid_depth: 1,
            dec_depths: [1, 1, 1, 1],
            channel_mults: [1, 2, 4, 8],
            in_channels: 3,
            n_temporal: 3,
            time_dim: 0,
            expansion: 2,
            skip: SkipKind::Sum,
        }
    }
}

pub const STAGES: usize = 4;

/// Spatial divisor required of model inputs: `2^(STAGES-1)`.
pub const SPATIAL_DIVISOR: usize = 8;

impl ModelConfig {
    /// Default configuration at a given base width.
    pub fn with_width(width: usize) -> Self {
        ModelConfig {
            width,
            ..Default::default()
        }
    }

    pub fn resolved_time_dim(&self) -> usize {
        if self.time_dim == 0 {
            4 * self.width
        } else {
            self.time_dim
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.width * self.channel_mults[stage]
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.width % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "width must be even and >= 2, got {}",
                self.width
            )));
        }
        if self.in_channels == 0 || self.n_temporal == 0 {
            return Err(Error::InvalidConfig(
                "in_channels and n_temporal must be positive".into(),
            ));
        }
        if self.expansion == 0 {
            return Err(Error::InvalidConfig("expansion must be >= 1".into()));
        }
        if self.mid_depth == 0
            || self.enc_depths.iter().any(|&d| d == 0)
            || self.dec_depths.iter().any(|&d| d == 0)
        {
            return Err(Error::InvalidConfig("stage depths must be >= 1".into()));
        }
        for (s, &m) in self.channel_mults.iter().enumerate() {
            if m == 0 {
                return Err(Error::InvalidConfig("channel multipliers must be >= 1".into()));
            }
            let c = self.width * m;
            let mid = self.expansion * c / 2;
            if c % 2 != 0 || (self.expansion * c) % 2 != 0 || mid % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {} channels {} do not admit the channel splits",
                    s, c
                )));
            }
        }
        if self.resolved_time_dim() < 2 {
            return Err(Error::InvalidConfig("time_dim must be >= 2".into()));
        }
        Ok(())
    }
}

/// Index of a parameter inside a [`ParamSet`].
pub type ParamId = usize;

/// Ordered, named parameter storage. The order is fixed by the architecture
/// walk and shared by optimizer state and checkpoints.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// All elements concatenated in parameter order.
    pub fn flatten(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.total_elements());
        for t in &self.tensors {
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![data.len()], data).expect("flat shape always consistent")
    }

    /// Rebuilds a set with this set's names/shapes from a flat vector.
    pub fn unflatten(&self, flat: &Tensor<T>) -> Result<ParamSet<T>> {
        if flat.len() != self.total_elements() {
            return Err(Error::shape(
                "unflatten",
                format!("{} elements, expected {}", flat.len(), self.total_elements()),
            ));
        }
        let mut tensors = Vec::with_capacity(self.tensors.len());
        let mut off = 0;
        for t in &self.tensors {
            let next = off + t.len();
            tensors.push(Tensor::new(
                t.shape().to_vec(),
                flat.data()[off..next].to_vec(),
            )?);
            off = next;
        }
        Ok(ParamSet {
            names: self.names.clone(),
            tensors,
        })
    }
}

enum Init {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Walk {
    specs: Vec<ParamSpec>,
}

impl Walk {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, spec: ConvSpec, zero_weight: bool) -> ConvW {
        let ws = spec.weight_shape();
        let fan_in = ws[1] * ws[2] * ws[3];
        let init = if zero_weight {
            Init::Zeros
        } else {
            Init::Kaiming { fan_in }
        };
        let w = self.push(format!("{name}.weight"), ws.to_vec(), init);
        let b = self.push(format!("{name}.bias"), vec![spec.out_channels], Init::Zeros);
        ConvW { w, b }
    }

    fn lin(&mut self, name: &str, d_out: usize, d_in: usize) -> LinW {
        let w = self.push(
            format!("{name}.weight"),
            vec![d_out, d_in],
            Init::Kaiming { fan_in: d_in },
        );
        let b = self.push(format!("{name}.bias"), vec![d_out], Init::Zeros);
        LinW { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormW {
        let gamma = self.push(format!("{name}.gamma"), vec![c], Init::Ones);
        let beta = self.push(format!("{name}.beta"), vec![c], Init::Zeros);
        NormW { gamma, beta }
    }

    fn block(&mut self, name: &str, c: usize, expansion: usize, time_dim: Option<usize>) -> BlockW {
        let e = expansion * c;
        let mid = e / 2;
        let half = mid / 2;
        let sem_norm = self.norm(&format!("{name}.sem.norm"), c);
        let expand = self.conv(&format!("{name}.sem.expand"), ConvSpec::pointwise(c, e), false);
        let dconv = self.conv(&format!("{name}.sem.dconv"), ConvSpec::depthwise(e, 3, 1), false);
        let w1 = self.conv(&format!("{name}.sem.sca.w1"), ConvSpec::pointwise(half, half), false);
        let w2 = self.conv(&format!("{name}.sem.sca.w2"), ConvSpec::pointwise(half, half), false);
        let w0 = self.conv(&format!("{name}.sem.sca.w0"), ConvSpec::pointwise(mid, c), false);
        let frm_norm = self.norm(&format!("{name}.frm.norm"), c);
        let v1 = self.conv(&format!("{name}.frm.v1"), ConvSpec::pointwise(c, e), false);
        let v2 = self.conv(&format!("{name}.frm.v2"), ConvSpec::pointwise(mid, c), false);
        let time_proj = time_dim.map(|td| self.lin(&format!("{name}.time_proj"), c, td));
        BlockW {
            sem_norm,
            expand,
            dconv,
            w1,
            w2,
            w0,
            frm_norm,
            v1,
            v2,
            time_proj,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvW {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LinW {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormW {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct BlockW {
    sem_norm: NormW,
    expand: ConvW,
    dconv: ConvW,
    w1: ConvW,
    w2: ConvW,
    w0: ConvW,
    frm_norm: NormW,
    v1: ConvW,
    v2: ConvW,
    time_proj: Option<LinW>,
}

#[derive(Clone, Debug)]
struct StageW {
    blocks: Vec<BlockW>,
    down: Option<ConvW>,
}

#[derive(Clone, Debug)]
struct Wiring {
    stem: ConvW,
    enc: Vec<StageW>,
    mid: Vec<BlockW>,
    /// Upsample convs in decoder execution order (deep to shallow).
    ups: Vec<ConvW>,
    /// Decoder stages in execution order; `dec[j]` runs at stage `3 - j`.
    dec: Vec<Vec<BlockW>>,
    head: ConvW,
    cond_stem: ConvW,
    cond: Vec<StageW>,
    time_fc1: LinW,
    time_fc2: LinW,
}

/// Multi-resolution condition features; level `s` matches denoiser stage `s`
/// in both channel count and spatial size.
#[derive(Clone, Debug)]
pub struct ConditionPyramid<T: Scalar> {
    pub levels: Vec<Tensor<T>>,
}

/// The conditional denoising model: configuration plus the deterministic
/// parameter wiring. Weights live in a separate [`ParamSet`].
pub struct Model {
    cfg: ModelConfig,
    wiring: Wiring,
    specs: Vec<ParamSpec>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut walk = Walk::default();
        let td = cfg.resolved_time_dim();
        let exp = cfg.expansion;

        let stem = walk.conv(
            "stem",
            ConvSpec::pointwise(cfg.in_channels, cfg.stage_channels(0)),
            false,
        );
        let mut enc = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let c = cfg.stage_channels(s);
            let blocks = (0..cfg.enc_depths[s])
                .map(|b| walk.block(&format!("enc.s{s}.b{b}"), c, exp, Some(td)))
                .collect();
            let down = (s + 1 < STAGES).then(|| {
                walk.conv(&format!("enc.s{s}.down"), down_spec(&cfg, s), false)
            });
            enc.push(StageW { blocks, down });
        }
        let mid = (0..cfg.mid_depth)
            .map(|b| walk.block(&format!("mid.b{b}"), cfg.stage_channels(3), exp, Some(td)))
            .collect();

        let mut ups = Vec::new();
        let mut dec = Vec::with_capacity(STAGES);
        for j in 0..STAGES {
            let s = STAGES - 1 - j;
            if j > 0 {
                // pointwise conv to 4x the target channels; pixel shuffle
                // r=2 quarters them back while doubling the spatial dims
                ups.push(walk.conv(
                    &format!("dec.up{j}"),
                    ConvSpec::pointwise(cfg.stage_channels(s + 1), 4 * cfg.stage_channels(s)),
                    false,
                ));
            }
            let c = cfg.stage_channels(s);
            dec.push(
                (0..cfg.dec_depths[j])
                    .map(|b| walk.block(&format!("dec.s{s}.b{b}"), c, exp, Some(td)))
                    .collect(),
            );
        }
        let head = walk.conv(
            "head",
            ConvSpec::pointwise(cfg.stage_channels(0), cfg.in_channels),
            true,
        );

        let cond_stem = walk.conv(
            "cond.stem",
            ConvSpec::pointwise(cfg.n_temporal * cfg.in_channels, cfg.stage_channels(0)),
            false,
        );
        let mut cond = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let c = cfg.stage_channels(s);
            let blocks = vec![walk.block(&format!("cond.s{s}.b0"), c, exp, None)];
            let down = (s + 1 < STAGES).then(|| {
                walk.conv(&format!("cond.s{s}.down"), down_spec(&cfg, s), false)
            });
            cond.push(StageW { blocks, down });
        }

        let time_fc1 = walk.lin("time.fc1", td, cfg.width);
        let time_fc2 = walk.lin("time.fc2", td, td);

        Ok(Model {
            cfg,
            wiring: Wiring {
                stem,
                enc,
                mid,
                ups,
                dec,
                head,
                cond_stem,
                cond,
                time_fc1,
                time_fc2,
            },
            specs: walk.specs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Kaiming-initialized parameters (zero biases, unit norm scales, zero
    /// output head). Deterministic in the RNG state.
    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut names = Vec::with_capacity(self.specs.len());
        let mut tensors = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            names.push(spec.name.clone());
            tensors.push(match spec.init {
                Init::Kaiming { fan_in } => {
                    let std = T::from_f64((2.0 / fan_in as f64).sqrt());
                    Tensor::<T>::randn(spec.shape.clone(), rng).scale(std)
                }
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
            });
        }
        ParamSet { names, tensors }
    }

    /// Rebuilds a parameter set from named tensors (e.g. a checkpoint);
    /// every parameter must be present with its exact shape, and unknown
    /// names are rejected.
    pub fn params_from_named<T: Scalar>(
        &self,
        mut by_name: std::collections::HashMap<String, Tensor<T>>,
    ) -> Result<ParamSet<T>> {
        let mut names = Vec::with_capacity(self.specs.len());
        let mut tensors = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let t = by_name
                .remove(&spec.name)
                .ok_or_else(|| Error::MissingTensor(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "params_from_named",
                    format!("{}: {:?}, expected {:?}", spec.name, t.shape(), spec.shape),
                ));
            }
            names.push(spec.name.clone());
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unknown parameter `{extra}`")));
        }
        Ok(ParamSet { names, tensors })
    }

    fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::InvalidConfig(format!(
                "parameter set has {} tensors, model expects {}",
                params.len(),
                self.specs.len()
            )));
        }
        Ok(())
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % SPATIAL_DIVISOR != 0 || w % SPATIAL_DIVISOR != 0 {
            return Err(Error::shape(
                "model",
                format!(
                    "spatial dims {}x{} must be positive multiples of {}",
                    h, w, SPATIAL_DIVISOR
                ),
            ));
        }
        Ok(())
    }

    fn check_condition<T: Scalar>(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let want_n = self.cfg.n_temporal;
        let want_c = self.cfg.in_channels;
        if x.rank() != 4 || x.shape()[0] != want_n || x.shape()[1] != want_c {
            return Err(Error::shape(
                "condition_encode",
                format!(
                    "condition stack {:?}, expected [{}, {}, H, W]",
                    x.shape(),
                    want_n,
                    want_c
                ),
            ));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        self.check_spatial(h, w)?;
        Ok((h, w))
    }

    /// Runs the condition encoder on a tape, returning one feature per
    /// stage (pre-downsample), plus the parameter binding.
    pub fn condition_encode_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Vec<VarId>, Binding)> {
        self.check_params(params)?;
        self.check_condition(x)?;
        let mut ctx = Ctx::bind(tape, params);
        let pyramid = self.cond_pyramid_ctx(&mut ctx, x)?;
        Ok((pyramid, ctx.into_binding()))
    }

    fn cond_pyramid_ctx<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: &Tensor<T>,
    ) -> Result<Vec<VarId>> {
        // temporal views are fused by stacking along the channel axis
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let xid = ctx.tape.leaf(x.reshape(vec![n * c, h, w])?);
        ctx.condition_input = Some(xid);
        let spec = ConvSpec::pointwise(n * c, self.cfg.stage_channels(0));
        let (sw, sb) = ctx.conv(&self.wiring.cond_stem);
        let mut hcur = ctx.tape.conv2d(xid, spec, sw, sb)?;
        let mut pyramid = Vec::with_capacity(STAGES);
        for (s, stage) in self.wiring.cond.iter().enumerate() {
            for blk in &stage.blocks {
                let vars = ctx.block_vars(blk);
                hcur = blocks::tcf_block_forward(ctx.tape, hcur, None, None, &vars)?;
            }
            pyramid.push(hcur);
            if let Some(down) = &stage.down {
                let (dw, db) = ctx.conv(down);
                hcur = ctx.tape.conv2d(hcur, down_spec(&self.cfg, s), dw, db)?;
            }
        }
        Ok(pyramid)
    }

    fn denoise_ctx<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        y_t: &Tensor<T>,
        t: usize,
        pyramid: &[VarId],
    ) -> Result<VarId> {
        let (c, h, w) = (y_t.shape()[1], y_t.shape()[2], y_t.shape()[3]);
        let yid = ctx.tape.leaf(y_t.reshape(vec![c, h, w])?);
        ctx.noisy_input = Some(yid);

        let time_vars = TimeMlpVars {
            fc1_w: ctx.p(self.wiring.time_fc1.w),
            fc1_b: ctx.p(self.wiring.time_fc1.b),
            fc2_w: ctx.p(self.wiring.time_fc2.w),
            fc2_b: ctx.p(self.wiring.time_fc2.b),
        };
        let time_base = blocks::time_encode(ctx.tape, t, self.cfg.width, &time_vars)?;

        let (sw, sb) = ctx.conv(&self.wiring.stem);
        let spec = ConvSpec::pointwise(c, self.cfg.stage_channels(0));
        let mut hcur = ctx.tape.conv2d(yid, spec, sw, sb)?;

        let mut skips = Vec::with_capacity(STAGES);
        for (s, stage) in self.wiring.enc.iter().enumerate() {
            for blk in &stage.blocks {
                hcur = ctx.fusion_block(blk, hcur, Some(pyramid[s]), time_base)?;
            }
            skips.push(hcur);
            if let Some(down) = &stage.down {
                let (dw, db) = ctx.conv(down);
                hcur = ctx.tape.conv2d(hcur, down_spec(&self.cfg, s), dw, db)?;
            }
        }

        for blk in &self.wiring.mid {
            hcur = ctx.fusion_block(blk, hcur, Some(pyramid[STAGES - 1]), time_base)?;
        }

        for (j, stage_blocks) in self.wiring.dec.iter().enumerate() {
            let s = STAGES - 1 - j;
            if j > 0 {
                let spec = ConvSpec::pointwise(
                    self.cfg.stage_channels(s + 1),
                    4 * self.cfg.stage_channels(s),
                );
                let (uw, ub) = ctx.conv(&self.wiring.ups[j - 1]);
                hcur = ctx.tape.conv2d(hcur, spec, uw, ub)?;
                hcur = ctx.tape.pixel_shuffle(hcur, 2)?;
            }
            // sum skip from the encoder stage at this resolution
            hcur = ctx.tape.add(hcur, skips[s])?;
            for blk in stage_blocks {
                hcur = ctx.fusion_block(blk, hcur, Some(pyramid[s]), time_base)?;
            }
        }

        let (hw_, hb_) = ctx.conv(&self.wiring.head);
        let spec = ConvSpec::pointwise(self.cfg.stage_channels(0), c);
        ctx.tape.conv2d(hcur, spec, hw_, hb_)
    }

    /// Full forward pass on a tape: condition pyramid plus denoiser.
    /// `y_t` is `[1, C, H, W]`, `x` is `[N, C, H, W]`; the output node
    /// holds the clean-image prediction as `[C, H, W]`.
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        y_t: &Tensor<T>,
        t: usize,
        x: &Tensor<T>,
    ) -> Result<(VarId, Binding)> {
        self.check_params(params)?;
        let (h, w) = self.check_condition(x)?;
        self.check_noisy_input(y_t, h, w)?;
        let mut ctx = Ctx::bind(tape, params);
        let pyramid = self.cond_pyramid_ctx(&mut ctx, x)?;
        let out = self.denoise_ctx(&mut ctx, y_t, t, &pyramid)?;
        Ok((out, ctx.into_binding()))
    }

    fn check_noisy_input<T: Scalar>(&self, y_t: &Tensor<T>, h: usize, w: usize) -> Result<()> {
        if y_t.rank() != 4
            || y_t.shape()[0] != 1
            || y_t.shape()[1] != self.cfg.in_channels
            || y_t.shape()[2] != h
            || y_t.shape()[3] != w
        {
            return Err(Error::shape(
                "denoiser_forward",
                format!(
                    "noisy input {:?}, expected [1, {}, {}, {}]",
                    y_t.shape(),
                    self.cfg.in_channels,
                    h,
                    w
                ),
            ));
        }
        Ok(())
    }

    /// Inference convenience: one forward pass on a private tape, returning
    /// the prediction as `[1, C, H, W]`.
    pub fn predict<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        y_t: &Tensor<T>,
        t: usize,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_on_tape(&mut tape, params, y_t, t, x)?;
        tape.value(out).reshape(y_t.shape().to_vec())
    }

    /// Computes the condition pyramid once as plain tensors, for reuse
    /// across sampling steps.
    pub fn condition_pyramid<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
    ) -> Result<ConditionPyramid<T>> {
        let mut tape = Tape::new();
        let (ids, _) = self.condition_encode_on_tape(&mut tape, params, x)?;
        Ok(ConditionPyramid {
            levels: ids.iter().map(|&id| tape.value(id).clone()).collect(),
        })
    }

    /// Denoiser forward with a precomputed condition pyramid.
    pub fn predict_with_pyramid<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        y_t: &Tensor<T>,
        t: usize,
        pyramid: &ConditionPyramid<T>,
    ) -> Result<Tensor<T>> {
        self.check_params(params)?;
        if pyramid.levels.len() != STAGES {
            return Err(Error::shape(
                "predict_with_pyramid",
                format!(
                    "pyramid has {} levels, expected {}",
                    pyramid.levels.len(),
                    STAGES
                ),
            ));
        }
        let (h, w) = (y_t.shape()[2], y_t.shape()[3]);
        self.check_spatial(h, w)?;
        self.check_noisy_input(y_t, h, w)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::bind(&mut tape, params);
        let ids: Vec<VarId> = pyramid
            .levels
            .iter()
            .map(|lv| ctx.tape.leaf(lv.clone()))
            .collect();
        let out = self.denoise_ctx(&mut ctx, y_t, t, &ids)?;
        tape.value(out).reshape(y_t.shape().to_vec())
    }

    /// Gradients in parameter order after a backward pass.
    pub fn grads_in_param_order<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        binding: &Binding,
        grads: &Grads<T>,
    ) -> Vec<Tensor<T>> {
        (0..params.len())
            .map(|i| grads.wrt_or_zeros(binding.ids[i], params.get(i).shape()))
            .collect()
    }
}

fn down_spec(cfg: &ModelConfig, stage: usize) -> ConvSpec {
    ConvSpec {
        in_channels: cfg.stage_channels(stage),
        out_channels: cfg.stage_channels(stage + 1),
        kernel: (2, 2),
        stride: 2,
        padding: 0,
        groups: 1,
    }
}

/// Tape-side handles created by a forward pass: every parameter in
/// parameter order, plus the input leaves (useful for gradient checks).
pub struct Binding {
    ids: Vec<VarId>,
    /// Leaf holding the noisy input as `[C, H, W]`, when a denoiser pass ran.
    pub noisy_input: Option<VarId>,
    /// Leaf holding the stacked condition views as `[N*C, H, W]`.
    pub condition_input: Option<VarId>,
}

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    ids: Vec<VarId>,
    noisy_input: Option<VarId>,
    condition_input: Option<VarId>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    fn bind(tape: &'a mut Tape<T>, params: &ParamSet<T>) -> Self {
        let ids = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Ctx {
            tape,
            ids,
            noisy_input: None,
            condition_input: None,
        }
    }

    fn p(&mut self, id: ParamId) -> VarId {
        self.ids[id]
    }

    fn conv(&mut self, c: &ConvW) -> (VarId, VarId) {
        (self.p(c.w), self.p(c.b))
    }

    fn block_vars(&mut self, blk: &BlockW) -> TcfBlockVars {
        TcfBlockVars {
            sem: SemVars {
                norm_gamma: self.p(blk.sem_norm.gamma),
                norm_beta: self.p(blk.sem_norm.beta),
                expand_w: self.p(blk.expand.w),
                expand_b: self.p(blk.expand.b),
                dconv_w: self.p(blk.dconv.w),
                dconv_b: self.p(blk.dconv.b),
                sca: ScaVars {
                    w1_w: self.p(blk.w1.w),
                    w1_b: self.p(blk.w1.b),
                    w2_w: self.p(blk.w2.w),
                    w2_b: self.p(blk.w2.b),
                    w0_w: self.p(blk.w0.w),
                    w0_b: self.p(blk.w0.b),
                },
            },
            frm: FrmVars {
                norm_gamma: self.p(blk.frm_norm.gamma),
                norm_beta: self.p(blk.frm_norm.beta),
                v1_w: self.p(blk.v1.w),
                v1_b: self.p(blk.v1.b),
                v2_w: self.p(blk.v2.w),
                v2_b: self.p(blk.v2.b),
            },
        }
    }

    /// One fusion block with condition injection and a per-block projection
    /// of the shared time embedding.
    fn fusion_block(
        &mut self,
        blk: &BlockW,
        fi: VarId,
        fc: Option<VarId>,
        time_base: VarId,
    ) -> Result<VarId> {
        let ft = match &blk.time_proj {
            Some(lp) => {
                let (w, b) = (self.p(lp.w), self.p(lp.b));
                Some(self.tape.linear(time_base, w, b)?)
            }
            None => None,
        };
        let vars = self.block_vars(blk);
        blocks::tcf_block_forward(self.tape, fi, fc, ft, &vars)
    }

    fn into_binding(self) -> Binding {
        Binding {
            ids: self.ids,
            noisy_input: self.noisy_input,
            condition_input: self.condition_input,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            width: 4,
            in_channels: 1,
            n_temporal: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { width: 3, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { n_temporal: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { mid_depth: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn pyramid_shapes_match_stage_arithmetic() {
        // width 64, mults [1,2,4,8] at 32x32: channels [64,128,256,512],
        // spatial [32,16,8,4]
        let cfg = ModelConfig {
            width: 64,
            in_channels: 3,
            n_temporal: 3,
            ..Default::default()
        };
        let model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = model.init_params::<f32>(&mut rng);
        let x = Tensor::<f32>::randn(vec![3, 3, 32, 32], &mut rng);
        let pyr = model.condition_pyramid(&params, &x).unwrap();
        let want = [(64, 32), (128, 16), (256, 8), (512, 4)];
        for (lv, (c, s)) in pyr.levels.iter().zip(want) {
            assert_eq!(lv.shape(), &[c, s, s]);
        }
    }

    #[test]
    fn single_view_condition() {
        let cfg = ModelConfig {
            width: 4,
            in_channels: 2,
            n_temporal: 1,
            ..Default::default()
        };
        let model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = model.init_params::<f32>(&mut rng);
        let x = Tensor::<f32>::randn(vec![1, 2, 8, 8], &mut rng);
        let pyr = model.condition_pyramid(&params, &x).unwrap();
        assert_eq!(pyr.levels[0].shape(), &[4, 8, 8]);
    }

    #[test]
    fn zero_params_give_zero_pyramid() {
        let model = Model::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = model.init_params::<f64>(&mut rng);
        let zeroed = params.unflatten(&Tensor::zeros(vec![params.total_elements()])).unwrap();
        let x = Tensor::<f64>::randn(vec![2, 1, 8, 8], &mut rng);
        let pyr = model.condition_pyramid(&zeroed, &x).unwrap();
        for lv in &pyr.levels {
            assert!(lv.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn denoiser_shape_contract() {
        let model = Model::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = model.init_params::<f32>(&mut rng);
        let x = Tensor::<f32>::randn(vec![2, 1, 16, 8], &mut rng);
        let y_t = Tensor::<f32>::randn(vec![1, 1, 16, 8], &mut rng);
        let out = model.predict(&params, &y_t, 5, &x).unwrap();
        assert_eq!(out.shape(), y_t.shape());

        // zero-initialized head: untrained model predicts exactly zero
        assert!(out.data().iter().all(|&v| v == 0.0));

        // shape violations
        let bad = Tensor::<f32>::randn(vec![1, 1, 12, 12], &mut rng);
        assert!(model.predict(&params, &bad, 5, &x).is_err());
        let bad_n = Tensor::<f32>::randn(vec![3, 1, 16, 8], &mut rng);
        assert!(model.predict(&params, &y_t, 5, &bad_n).is_err());
    }

    #[test]
    fn full_width_config_runs_on_64px() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = model.init_params::<f32>(&mut rng);
        let x = Tensor::<f32>::randn(vec![3, 3, 64, 64], &mut rng);
        let y_t = Tensor::<f32>::randn(vec![1, 3, 64, 64], &mut rng);
        let out = model.predict(&params, &y_t, 1000, &x).unwrap();
        assert_eq!(out.shape(), &[1, 3, 64, 64]);
        assert!(out.all_finite());
    }

    // With every learned weight zeroed except stem/head, the network reduces
    // to head(stem(y)): block residuals pass features through, downsampled
    // paths die, and the shallowest skip carries stem output to the head.
    #[test]
    fn zero_block_weights_reduce_to_stem_head() {
        let model = Model::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = model.init_params::<f64>(&mut rng);
        let mut zeroed = params.unflatten(&Tensor::zeros(vec![params.total_elements()])).unwrap();
        // re-install random stem and head
        let mut stem_w = None;
        let mut head_w = None;
        for (name, tensor) in params.iter() {
            if name == "stem.weight" {
                stem_w = Some(tensor.clone());
            }
            if name == "head.weight" {
                head_w = Some(tensor.clone());
            }
        }
        let head_rand = Tensor::<f64>::randn(head_w.unwrap().shape().to_vec(), &mut rng);
        for i in 0..zeroed.len() {
            if zeroed.name(i) == "stem.weight" {
                *zeroed.get_mut(i) = stem_w.clone().unwrap();
            }
            if zeroed.name(i) == "head.weight" {
                *zeroed.get_mut(i) = head_rand.clone();
            }
        }

        let x = Tensor::<f64>::randn(vec![2, 1, 8, 8], &mut rng);
        let y = Tensor::<f64>::randn(vec![1, 1, 8, 8], &mut rng);
        let out = model.predict(&zeroed, &y, 3, &x).unwrap();

        // reference: head(stem(y)) by direct convolution
        let stem_spec = ConvSpec::pointwise(1, 4);
        let head_spec = ConvSpec::pointwise(4, 1);
        let y3 = y.reshape(vec![1, 8, 8]).unwrap();
        let mid = crate::numerics::ops::conv2d(
            &y3,
            &stem_spec,
            &stem_w.unwrap(),
            &Tensor::zeros(vec![4]),
        )
        .unwrap();
        let want = crate::numerics::ops::conv2d(
            &mid,
            &head_spec,
            &head_rand,
            &Tensor::zeros(vec![1]),
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = model.init_params::<f32>(&mut rng);
        let x = Tensor::<f32>::randn(vec![2, 1, 8, 8], &mut rng);
        let y_t = Tensor::<f32>::randn(vec![1, 1, 8, 8], &mut rng);
        let a = model.predict(&params, &y_t, 7, &x).unwrap();
        let b = model.predict(&params, &y_t, 7, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn pyramid_reuse_matches_full_forward() {
        let model = Model::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = model.init_params::<f64>(&mut rng);
        let x = Tensor::<f64>::randn(vec![2, 1, 8, 8], &mut rng);
        let y_t = Tensor::<f64>::randn(vec![1, 1, 8, 8], &mut rng);
        let full = model.predict(&params, &y_t, 9, &x).unwrap();
        let pyr = model.condition_pyramid(&params, &x).unwrap();
        let reused = model.predict_with_pyramid(&params, &y_t, 9, &pyr).unwrap();
        assert_eq!(full.data(), reused.data());
    }

    #[test]
    fn checkpoint_name_round_trip() {
        let model = Model::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = model.init_params::<f32>(&mut rng);
        let map: std::collections::HashMap<String, Tensor<f32>> = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let rebuilt = model.params_from_named(map).unwrap();
        for i in 0..params.len() {
            assert_eq!(params.name(i), rebuilt.name(i));
            assert_eq!(params.get(i).data(), rebuilt.get(i).data());
        }
        // a missing tensor is reported by name
        let mut short: std::collections::HashMap<String, Tensor<f32>> = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        short.remove("head.weight");
        assert!(matches!(
            model.params_from_named(short),
            Err(Error::MissingTensor(n)) if n == "head.weight"
        ));
    }
}
