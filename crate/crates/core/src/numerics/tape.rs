//! Reverse-mode autodiff over the kernels in [`ops`](super::ops).
//!
//! A [`Tape`] is an append-only list of nodes; node indices are handed out
//! as [`VarId`]s. Children always have larger indices than their parents, so
//! a single reverse sweep over the node list is a topological traversal.
//! Tapes are cheap to build and are used per forward pass (training builds
//! one tape per batch element).

use super::ops::{self, ConvSpec, LayerNormCache, PoolMode};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, T),
    /// `x[C,H,W] + b[C]` broadcast over the spatial dims.
    AddBias(VarId, VarId),
    /// `x[C,H,W] * g[C,1,1]` broadcast over the spatial dims.
    MulGate(VarId, VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        spec: ConvSpec,
    },
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        cache: LayerNormCache<T>,
    },
    PoolMean(VarId),
    PoolMax {
        x: VarId,
        argmax: Vec<usize>,
    },
    PixelShuffle {
        x: VarId,
        r: usize,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    Silu(VarId),
    SliceChannels {
        x: VarId,
        start: usize,
        len: usize,
    },
    ConcatChannels(VarId, VarId),
    Sum(VarId),
    /// `mean(|pred - target|^p)`; the target is a constant.
    MeanPowLoss {
        pred: VarId,
        target: Tensor<T>,
        p: u32,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Tape that errors if any op produces a non-finite element. Used by
    /// tests; the training loop instead checks the final loss.
    pub fn checked() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<VarId> {
        if self.check_finite {
            value.ensure_finite("tape op output")?;
        }
        self.nodes.push(Node { value, op });
        Ok(VarId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: VarId, k: T) -> Result<VarId> {
        let v = self.value(x).scale(k);
        self.push(v, Op::Scale(x, k))
    }

    /// Broadcast-add a per-channel vector (`[C]` or `[C,1,1]`) onto `[C,H,W]`.
    pub fn add_bias(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (c, hw) = Self::channel_layout(xv, bv, "add_bias")?;
        let mut out = xv.data().to_vec();
        for ch in 0..c {
            let bvc = bv.data()[ch];
            for v in &mut out[ch * hw..(ch + 1) * hw] {
                *v = *v + bvc;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(v, Op::AddBias(x, b))
    }

    /// Broadcast-multiply a per-channel gate (`[C]` or `[C,1,1]`) onto `[C,H,W]`.
    pub fn mul_gate(&mut self, x: VarId, g: VarId) -> Result<VarId> {
        let xv = self.value(x);
        let gv = self.value(g);
        let (c, hw) = Self::channel_layout(xv, gv, "mul_gate")?;
        let mut out = xv.data().to_vec();
        for ch in 0..c {
            let gc = gv.data()[ch];
            for v in &mut out[ch * hw..(ch + 1) * hw] {
                *v = *v * gc;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(v, Op::MulGate(x, g))
    }

    fn channel_layout(x: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
        if x.rank() != 3 {
            return Err(Error::shape(op, format!("x {:?}, expected [C,H,W]", x.shape())));
        }
        let c = x.shape()[0];
        let per_channel_ok = b.shape() == [c] || b.shape() == [c, 1, 1];
        if !per_channel_ok {
            return Err(Error::shape(
                op,
                format!("broadcast operand {:?}, expected [{}] or [{},1,1]", b.shape(), c, c),
            ));
        }
        Ok((c, x.shape()[1] * x.shape()[2]))
    }

    pub fn conv2d(&mut self, x: VarId, spec: ConvSpec, w: VarId, b: VarId) -> Result<VarId> {
        let v = ops::conv2d(self.value(x), &spec, self.value(w), self.value(b))?;
        self.push(v, Op::Conv2d { x, w, b, spec })
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let (v, cache) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(v, Op::LayerNorm { x, gamma, beta, cache })
    }

    pub fn pool_global(&mut self, x: VarId, mode: PoolMode) -> Result<VarId> {
        let (v, argmax) = ops::pool_global(self.value(x), mode)?;
        let op = match mode {
            PoolMode::Mean => Op::PoolMean(x),
            PoolMode::Max => Op::PoolMax { x, argmax },
        };
        self.push(v, op)
    }

    pub fn pixel_shuffle(&mut self, x: VarId, r: usize) -> Result<VarId> {
        let v = ops::pixel_shuffle(self.value(x), r)?;
        self.push(v, Op::PixelShuffle { x, r })
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let v = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(v, Op::Linear { x, w, b })
    }

    pub fn silu(&mut self, x: VarId) -> Result<VarId> {
        let v = ops::silu(self.value(x));
        self.push(v, Op::Silu(x))
    }

    /// Contiguous channel slice `x[start..start+len, :, :]`.
    pub fn slice_channels(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let xv = self.value(x);
        if xv.rank() != 3 || start + len > xv.shape()[0] {
            return Err(Error::shape(
                "slice_channels",
                format!("range {}..{} of {:?}", start, start + len, xv.shape()),
            ));
        }
        let hw = xv.shape()[1] * xv.shape()[2];
        let data = xv.data()[start * hw..(start + len) * hw].to_vec();
        let v = Tensor::new(vec![len, xv.shape()[1], xv.shape()[2]], data)?;
        self.push(v, Op::SliceChannels { x, start, len })
    }

    /// Concatenate along the channel axis; spatial dims must match.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[1..] != bv.shape()[1..] {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let v = Tensor::new(
            vec![av.shape()[0] + bv.shape()[0], av.shape()[1], av.shape()[2]],
            data,
        )?;
        self.push(v, Op::ConcatChannels(a, b))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(x))
    }

    /// `mean(|pred - target|^p)` over all elements, `p` in `{1, 2}`.
    pub fn mean_pow_loss(&mut self, pred: VarId, target: &Tensor<T>, p: u32) -> Result<VarId> {
        if !matches!(p, 1 | 2) {
            return Err(Error::InvalidConfig(format!("loss exponent p must be 1 or 2, got {}", p)));
        }
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(
                "mean_pow_loss",
                format!("pred {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        let n = T::from_f64(pv.len() as f64);
        let mut acc = T::zero();
        for (&a, &b) in pv.data().iter().zip(target.data()) {
            let d = a - b;
            acc = acc + if p == 2 { d * d } else { d.abs() };
        }
        self.push(
            Tensor::scalar(acc / n),
            Op::MeanPowLoss {
                pred,
                target: target.clone(),
                p,
            },
        )
    }

    /// Reverse sweep from a scalar output; returns per-node gradients.
    pub fn backward(&self, out: VarId) -> Result<Grads<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    Self::accum(&mut grads, *a, g.clone())?;
                    Self::accum(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    Self::accum(&mut grads, *a, g.clone())?;
                    Self::accum(&mut grads, *b, g.scale(-T::one()))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), "mul_bwd", |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), "mul_bwd", |x, y| x * y)?;
                    Self::accum(&mut grads, *a, ga)?;
                    Self::accum(&mut grads, *b, gb)?;
                }
                Op::Scale(x, k) => {
                    Self::accum(&mut grads, *x, g.scale(*k))?;
                }
                Op::AddBias(x, b) => {
                    let bv = self.value(*b);
                    let c = bv.data().len();
                    let hw = g.len() / c;
                    let mut db = vec![T::zero(); c];
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for &v in &g.data()[ch * hw..(ch + 1) * hw] {
                            acc = acc + v;
                        }
                        db[ch] = acc;
                    }
                    Self::accum(&mut grads, *x, g)?;
                    Self::accum(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?)?;
                }
                Op::MulGate(x, gate) => {
                    let xv = self.value(*x);
                    let gv = self.value(*gate);
                    let c = gv.data().len();
                    let hw = xv.len() / c;
                    let mut dx = g.data().to_vec();
                    let mut dg = vec![T::zero(); c];
                    for ch in 0..c {
                        let gc = gv.data()[ch];
                        let mut acc = T::zero();
                        for i2 in ch * hw..(ch + 1) * hw {
                            acc = acc + g.data()[i2] * xv.data()[i2];
                            dx[i2] = dx[i2] * gc;
                        }
                        dg[ch] = acc;
                    }
                    Self::accum(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                    Self::accum(&mut grads, *gate, Tensor::new(gv.shape().to_vec(), dg)?)?;
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), spec, self.value(*w), &g)?;
                    Self::accum(&mut grads, *x, dx)?;
                    Self::accum(&mut grads, *w, dw)?;
                    Self::accum(&mut grads, *b, db)?;
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (dx, dgamma, dbeta) =
                        ops::layer_norm_backward(self.value(*x), self.value(*gamma), cache, &g)?;
                    Self::accum(&mut grads, *x, dx)?;
                    Self::accum(&mut grads, *gamma, dgamma)?;
                    Self::accum(&mut grads, *beta, dbeta)?;
                }
                Op::PoolMean(x) => {
                    let xv = self.value(*x);
                    let c = xv.shape()[0];
                    let hw = xv.shape()[1] * xv.shape()[2];
                    let inv = T::from_f64(1.0 / hw as f64);
                    let mut dx = vec![T::zero(); xv.len()];
                    for ch in 0..c {
                        let gv = g.data()[ch] * inv;
                        for v in &mut dx[ch * hw..(ch + 1) * hw] {
                            *v = gv;
                        }
                    }
                    Self::accum(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::PoolMax { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = vec![T::zero(); xv.len()];
                    for (ch, &idx) in argmax.iter().enumerate() {
                        dx[idx] = g.data()[ch];
                    }
                    Self::accum(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::PixelShuffle { x, r } => {
                    let dx = ops::pixel_unshuffle(&g, *r)?;
                    Self::accum(&mut grads, *x, dx)?;
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &g)?;
                    Self::accum(&mut grads, *x, dx)?;
                    Self::accum(&mut grads, *w, dw)?;
                    Self::accum(&mut grads, *b, db)?;
                }
                Op::Silu(x) => {
                    let dx = ops::silu_backward(self.value(*x), &g)?;
                    Self::accum(&mut grads, *x, dx)?;
                }
                Op::SliceChannels { x, start, len } => {
                    let xv = self.value(*x);
                    let hw = xv.shape()[1] * xv.shape()[2];
                    let mut dx = vec![T::zero(); xv.len()];
                    dx[start * hw..(start + len) * hw].copy_from_slice(g.data());
                    Self::accum(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::ConcatChannels(a, b) => {
                    let an = self.value(*a).len();
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = Tensor::new(av.shape().to_vec(), g.data()[..an].to_vec())?;
                    let gb = Tensor::new(bv.shape().to_vec(), g.data()[an..].to_vec())?;
                    Self::accum(&mut grads, *a, ga)?;
                    Self::accum(&mut grads, *b, gb)?;
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let dx = Tensor::full(xv.shape().to_vec(), g.data()[0]);
                    Self::accum(&mut grads, *x, dx)?;
                }
                Op::MeanPowLoss { pred, target, p } => {
                    let pv = self.value(*pred);
                    let inv_n = T::from_f64(1.0 / pv.len() as f64);
                    let gs = g.data()[0];
                    let two = T::from_f64(2.0);
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| {
                            let d = a - b;
                            let dd = if *p == 2 {
                                two * d
                            } else if d > T::zero() {
                                T::one()
                            } else if d < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            gs * dd * inv_n
                        })
                        .collect();
                    Self::accum(&mut grads, *pred, Tensor::new(pv.shape().to_vec(), data)?)?;
                }
            }
        }
        Ok(Grads { grads })
    }

    fn accum(grads: &mut [Option<Tensor<T>>], id: VarId, g: Tensor<T>) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => {
                if existing.shape() != g.shape() {
                    return Err(Error::shape(
                        "grad_accum",
                        format!("{:?} vs {:?}", existing.shape(), g.shape()),
                    ));
                }
                for (d, s) in existing.data_mut().iter_mut().zip(g.data()) {
                    *d = *d + *s;
                }
            }
            slot @ None => {
                *slot = Some(g);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient w.r.t. a node, if it received any (unreached nodes have none).
    pub fn wrt(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient w.r.t. a node, or zeros of its shape.
    pub fn wrt_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let out = tape.sum(sq).unwrap();
        assert_eq!(tape.value(out).data()[0], 5.0);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        // y = x + x => dy/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn checked_tape_rejects_nonfinite() {
        let mut tape = Tape::<f64>::checked();
        let x = tape.leaf(Tensor::scalar(1e308));
        // 1e308 + 1e308 overflows to inf
        assert!(tape.add(x, x).is_err());
    }
}
