//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a record to the tape when at least
//! one of its inputs requires a gradient. [`Tape::backward`] replays those
//! records in exact reverse order and may run only once per tape.

use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::wavelet::{self, SubBandVars};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * sigmoid(x)`.
    #[default]
    Silu,
    Relu,
}

impl Activation {
    fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Relu => x.max(T::zero()),
        }
    }

    fn derivative<T: Float>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Operation families, used for fault injection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv2d,
    Add,
    Mul,
    Scale,
    Sum,
    Activation,
    Tanh,
    Upsample,
    Dwt2,
    Idwt2,
    Split,
    Clamp,
    Reparameterize,
    Kl,
    MeanAbsError,
    MeanSquaredError,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown op kind '{s}'")))
    }
}

enum Op<T> {
    Conv2d { x: usize, w: usize, b: Option<usize>, out: usize, geom: ConvGeom },
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { x: usize, out: usize, factor: T },
    Sum { x: usize, out: usize },
    Activation { x: usize, out: usize, kind: Activation },
    Tanh { x: usize, out: usize },
    Upsample { x: usize, out: usize },
    Dwt2 { x: usize, outs: [usize; 4] },
    Idwt2 { bands: [usize; 4], out: usize },
    Split { x: usize, outs: [usize; 2], at: usize },
    Clamp { x: usize, out: usize, lo: T, hi: T },
    Reparameterize { mean: usize, log_var: usize, out: usize, noise: Vec<T> },
    Kl { mean: usize, log_var: usize, out: usize },
    MeanAbsError { a: usize, b: usize, out: usize },
    MeanSquaredError { a: usize, b: usize, out: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Activation { .. } => OpKind::Activation,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Dwt2 { .. } => OpKind::Dwt2,
            Op::Idwt2 { .. } => OpKind::Idwt2,
            Op::Split { .. } => OpKind::Split,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Reparameterize { .. } => OpKind::Reparameterize,
            Op::Kl { .. } => OpKind::Kl,
            Op::MeanAbsError { .. } => OpKind::MeanAbsError,
            Op::MeanSquaredError { .. } => OpKind::MeanSquaredError,
        }
    }
}

pub struct Tape<T: Float = f32> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    leaf: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op<T>>,
    consumed: bool,
    fault: Option<(OpKind, T)>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            requires: Vec::new(),
            leaf: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    /// Scale every input gradient produced by `kind`'s backward rule by `factor`.
    ///
    /// Exists to give the gradient checker a negative control.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, T::lit(factor)));
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, leaf: bool) -> Var {
        self.values.push(value);
        self.requires.push(requires_grad);
        self.leaf.push(leaf);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, true)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.0 < self.values.len() {
            Ok(v.0)
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor; zeros when nothing flowed into `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.values[v.0].shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Kinds of the recorded operations, in recording order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.ops.iter().map(Op::kind).collect()
    }

    fn output(&mut self, value: Tensor<T>, inputs: &[usize]) -> (usize, bool) {
        let req = inputs.iter().any(|&i| self.requires[i]);
        let v = self.push(value, req, false);
        (v.0, req)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.values[a].shape(), self.values[b].shape())));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, make: impl FnOnce(usize, usize) -> Op<T>) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.values[xi].map(f);
        let (out, req) = self.output(value, &[xi]);
        if req {
            self.ops.push(make(xi, out));
        }
        Ok(Var(out))
    }

    fn scalar_out(&mut self, value: T, inputs: &[usize], op: impl FnOnce(usize) -> Op<T>) -> Var {
        let (out, req) = self.output(Tensor::scalar(value), inputs);
        if req {
            self.ops.push(op(out));
        }
        Var(out)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(weight)?);
        let bi = bias.map(|b| self.check(b)).transpose()?;
        let geom = ConvGeom::new(
            self.values[xi].dims4("conv2d")?,
            self.values[wi].shape(),
            bi.map(|b| self.values[b].shape()),
            stride,
            padding,
        )?;
        let data =
            conv::forward(&geom, self.values[xi].data(), self.values[wi].data(), bi.map(|b| self.values[b].data()));
        let value = Tensor::new(geom.out_shape().to_vec(), data)?;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        let (out, req) = self.output(value, &inputs);
        if req {
            self.ops.push(Op::Conv2d { x: xi, w: wi, b: bi, out, geom });
        }
        Ok(Var(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ai, bi)?;
        let data = self.values[ai].data().iter().zip(self.values[bi].data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.values[ai].shape().to_vec(), data)?;
        let (out, req) = self.output(value, &[ai, bi]);
        if req {
            self.ops.push(Op::Add { a: ai, b: bi, out });
        }
        Ok(Var(out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ai, bi)?;
        let data = self.values[ai].data().iter().zip(self.values[bi].data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.values[ai].shape().to_vec(), data)?;
        let (out, req) = self.output(value, &[ai, bi]);
        if req {
            self.ops.push(Op::Mul { a: ai, b: bi, out });
        }
        Ok(Var(out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        self.unary(x, |v| v * f, |x, out| Op::Scale { x, out, factor: f })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let total = self.values[xi].data().iter().copied().sum();
        Ok(self.scalar_out(total, &[xi], |out| Op::Sum { x: xi, out }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.unary(x, |v| kind.apply(v), |x, out| Op::Activation { x, out, kind })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), |x, out| Op::Tanh { x, out })
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let [n, c, h, w] = self.values[xi].dims4("upsample2x")?;
        let src = self.values[xi].data();
        let mut data = Vec::with_capacity(n * c * h * w * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    data.push(v);
                    data.push(v);
                }
            }
        }
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], data)?;
        let (out, req) = self.output(value, &[xi]);
        if req {
            self.ops.push(Op::Upsample { x: xi, out });
        }
        Ok(Var(out))
    }

    pub fn dwt2(&mut self, x: Var) -> Result<SubBandVars> {
        let xi = self.check(x)?;
        let set = wavelet::dwt2(&self.values[xi])?;
        let (h, w) = (set.source_height, set.source_width);
        let mut outs = [0usize; 4];
        let mut req = false;
        for (slot, band) in outs.iter_mut().zip([set.ll, set.lh, set.hl, set.hh]) {
            let (o, r) = self.output(band, &[xi]);
            *slot = o;
            req = r;
        }
        if req {
            self.ops.push(Op::Dwt2 { x: xi, outs });
        }
        Ok(SubBandVars {
            ll: Var(outs[0]),
            lh: Var(outs[1]),
            hl: Var(outs[2]),
            hh: Var(outs[3]),
            source_height: h,
            source_width: w,
        })
    }

    pub fn idwt2(&mut self, bands: &SubBandVars) -> Result<Var> {
        let idx = [self.check(bands.ll)?, self.check(bands.lh)?, self.check(bands.hl)?, self.check(bands.hh)?];
        let set = wavelet::SubBandSet {
            ll: self.values[idx[0]].clone(),
            lh: self.values[idx[1]].clone(),
            hl: self.values[idx[2]].clone(),
            hh: self.values[idx[3]].clone(),
            source_height: bands.source_height,
            source_width: bands.source_width,
        };
        let value = wavelet::idwt2(&set)?;
        let (out, req) = self.output(value, &idx);
        if req {
            self.ops.push(Op::Idwt2 { bands: idx, out });
        }
        Ok(Var(out))
    }

    /// Split along the channel axis into `[0, at)` and `[at, C)`.
    pub fn split_channels(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let xi = self.check(x)?;
        let [n, c, h, w] = self.values[xi].dims4("split_channels")?;
        if at == 0 || at >= c {
            return Err(Error::shape("split_channels", format!("cannot split {c} channels at {at}")));
        }
        let plane = h * w;
        let src = self.values[xi].data();
        let mut first = Vec::with_capacity(n * at * plane);
        let mut second = Vec::with_capacity(n * (c - at) * plane);
        for item in src.chunks(c * plane) {
            first.extend_from_slice(&item[..at * plane]);
            second.extend_from_slice(&item[at * plane..]);
        }
        let a = Tensor::new(vec![n, at, h, w], first)?;
        let b = Tensor::new(vec![n, c - at, h, w], second)?;
        let (oa, req) = self.output(a, &[xi]);
        let (ob, _) = self.output(b, &[xi]);
        if req {
            self.ops.push(Op::Split { x: xi, outs: [oa, ob], at });
        }
        Ok((Var(oa), Var(ob)))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(x, |v| v.max(l).min(h), |x, out| Op::Clamp { x, out, lo: l, hi: h })
    }

    /// `mean + exp(0.5 * log_var) * noise`, with `noise` held fixed.
    pub fn reparameterize(&mut self, mean: Var, log_var: Var, noise: Tensor<T>) -> Result<Var> {
        let (mi, li) = (self.check(mean)?, self.check(log_var)?);
        self.same_shape("reparameterize", mi, li)?;
        if noise.shape() != self.values[mi].shape() {
            return Err(Error::shape(
                "reparameterize",
                format!("noise {:?} vs mean {:?}", noise.shape(), self.values[mi].shape()),
            ));
        }
        let half = T::lit(0.5);
        let data = self.values[mi]
            .data()
            .iter()
            .zip(self.values[li].data())
            .zip(noise.data())
            .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
            .collect();
        let value = Tensor::new(self.values[mi].shape().to_vec(), data)?;
        let (out, req) = self.output(value, &[mi, li]);
        if req {
            self.ops.push(Op::Reparameterize { mean: mi, log_var: li, out, noise: noise.into_data() });
        }
        Ok(Var(out))
    }

    /// KL(N(mean, exp(log_var)) || N(0, I)), summed over latent elements and
    /// averaged over the batch axis.
    pub fn kl_divergence(&mut self, mean: Var, log_var: Var) -> Result<Var> {
        let (mi, li) = (self.check(mean)?, self.check(log_var)?);
        self.same_shape("kl_divergence", mi, li)?;
        let batch = T::lit(self.values[mi].shape()[0] as f64);
        let half = T::lit(0.5);
        let total: T = self.values[mi]
            .data()
            .iter()
            .zip(self.values[li].data())
            .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
            .sum();
        Ok(self.scalar_out(total / batch, &[mi, li], |out| Op::Kl { mean: mi, log_var: li, out }))
    }

    pub fn mean_abs_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("mean_abs_error", ai, bi)?;
        let n = T::lit(self.values[ai].numel() as f64);
        let total: T = self.values[ai].data().iter().zip(self.values[bi].data()).map(|(&x, &y)| (x - y).abs()).sum();
        Ok(self.scalar_out(total / n, &[ai, bi], |out| Op::MeanAbsError { a: ai, b: bi, out }))
    }

    pub fn mean_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("mean_squared_error", ai, bi)?;
        let n = T::lit(self.values[ai].numel() as f64);
        let total: T =
            self.values[ai].data().iter().zip(self.values[bi].data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.scalar_out(total / n, &[ai, bi], |out| Op::MeanSquaredError { a: ai, b: bi, out }))
    }

    /// Populate gradients of `loss` with respect to every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let li = self.check(loss)?;
        if !self.values[li].is_scalar() {
            return Err(Error::NonScalarLoss(self.values[li].shape().to_vec()));
        }
        self.consumed = true;
        if !self.requires[li] {
            return Ok(());
        }
        self.grads[li] = Some(vec![T::one()]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            let contributions = self.backward_op(op);
            for (idx, mut g) in contributions {
                if let Some((kind, factor)) = self.fault {
                    if kind == op.kind() {
                        g.iter_mut().for_each(|v| *v *= factor);
                    }
                }
                self.accumulate(idx, g);
            }
        }
        for i in 0..self.grads.len() {
            if !self.leaf[i] {
                self.grads[i] = None;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, g: Vec<T>) {
        if !self.requires[idx] {
            return;
        }
        match &mut self.grads[idx] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(g),
        }
    }

    fn take_grad(&mut self, idx: usize) -> Option<Vec<T>> {
        if self.leaf[idx] {
            self.grads[idx].clone()
        } else {
            self.grads[idx].take()
        }
    }

    fn backward_op(&mut self, op: &Op<T>) -> Vec<(usize, Vec<T>)> {
        let mut out = Vec::new();
        match *op {
            Op::Conv2d { x, w, b, out: o, ref geom } => {
                let Some(g) = self.take_grad(o) else { return out };
                let need = (self.requires[x], self.requires[w], b.is_some_and(|b| self.requires[b]));
                let grads = conv::backward(geom, self.values[x].data(), self.values[w].data(), &g, need);
                out.extend(grads.input.map(|d| (x, d)));
                out.extend(grads.weight.map(|d| (w, d)));
                if let (Some(b), Some(d)) = (b, grads.bias) {
                    out.push((b, d));
                }
            }
            Op::Add { a, b, out: o } => {
                let Some(g) = self.take_grad(o) else { return out };
                out.push((a, g.clone()));
                out.push((b, g));
            }
            Op::Mul { a, b, out: o } => {
                let Some(g) = self.take_grad(o) else { return out };
                let (av, bv) = (self.values[a].data(), self.values[b].data());
                out.push((a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                out.push((b, g.iter().zip(av).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale { x, out: o, factor } => {
                let Some(g) = self.take_grad(o) else { return out };
                out.push((x, g.into_iter().map(|v| v * factor).collect()));
            }
            Op::Sum { x, out: o } => {
                let Some(g) = self.take_grad(o) else { return out };
                out.push((x, vec![g[0]; self.values[x].numel()]));
            }
            Op::Activation { x, out: o, kind } => {
                let Some(g) = self.take_grad(o) else { return out };
                let xv = self.values[x].data();
                out.push((x, g.iter().zip(xv).map(|(&g, &v)| g * kind.derivative(v)).collect()));
            }
            Op::Tanh { x, out: o } => {
                let Some(g) = self.take_grad(o) else { return out };
                let yv = self.values[o].data();
                out.push((x, g.iter().zip(yv).map(|(&g, &y)| g * (T::one() - y * y)).collect()));
            }
            Op::Upsample { x, out: o } => {
                let Some(g) = self.take_grad(o) else { return out };
                let [_, _, h, w] = self.values[x].dims4("upsample2x").expect("rank checked in forward");
                let mut dx = vec![T::zero(); self.values[x].numel()];
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            plane[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                        }
                    }
                }
                out.push((x, dx));
            }
            Op::Dwt2 { x, outs } => {
                let bands = outs.map(|o| self.take_grad(o));
                if bands.iter().all(Option::is_none) {
                    return out;
                }
                let dims = self.values[outs[0]].dims4("dwt2").expect("rank checked in forward");
                let len = self.values[outs[0]].numel();
                let bands = bands.map(|b| b.unwrap_or_else(|| vec![T::zero(); len]));
                let [_, _, h, w] = self.values[x].dims4("dwt2").expect("rank checked in forward");
                let dx = wavelet::dwt2_adjoint([&bands[0], &bands[1], &bands[2], &bands[3]], dims, h, w);
                out.push((x, dx));
            }
            Op::Idwt2 { bands, out: o } => {
                let Some(g) = self.take_grad(o) else { return out };
                let dims = self.values[bands[0]].dims4("idwt2").expect("rank checked in forward");
                let [_, _, h, w] = self.values[o].dims4("idwt2").expect("rank checked in forward");
                let grads = wavelet::idwt2_adjoint(&g, dims, h, w);
                out.extend(bands.into_iter().zip(grads));
            }
            Op::Split { x, outs, at } => {
                let ga = self.take_grad(outs[0]);
                let gb = self.take_grad(outs[1]);
                if ga.is_none() && gb.is_none() {
                    return out;
                }
                let [n, c, h, w] = self.values[x].dims4("split_channels").expect("rank checked in forward");
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                for (item, chunk) in dx.chunks_mut(c * plane).enumerate() {
                    if let Some(ga) = &ga {
                        chunk[..at * plane].copy_from_slice(&ga[item * at * plane..(item + 1) * at * plane]);
                    }
                    if let Some(gb) = &gb {
                        let len = (c - at) * plane;
                        chunk[at * plane..].copy_from_slice(&gb[item * len..(item + 1) * len]);
                    }
                }
                out.push((x, dx));
            }
            Op::Clamp { x, out: o, lo, hi } => {
                let Some(g) = self.take_grad(o) else { return out };
                let xv = self.values[x].data();
                out.push((
                    x,
                    g.iter().zip(xv).map(|(&g, &v)| if v >= lo && v <= hi { g } else { T::zero() }).collect(),
                ));
            }
            Op::Reparameterize { mean, log_var, out: o, ref noise } => {
                let Some(g) = self.take_grad(o) else { return out };
                let half = T::lit(0.5);
                let lv = self.values[log_var].data();
                let dlv = g.iter().zip(lv).zip(noise).map(|((&g, &lv), &e)| g * half * (lv * half).exp() * e).collect();
                out.push((mean, g));
                out.push((log_var, dlv));
            }
            Op::Kl { mean, log_var, out: o } => {
                let Some(g) = self.take_grad(o) else { return out };
                let scale = g[0] / T::lit(self.values[mean].shape()[0] as f64);
                let half = T::lit(0.5);
                out.push((mean, self.values[mean].data().iter().map(|&m| scale * m).collect()));
                out.push((
                    log_var,
                    self.values[log_var].data().iter().map(|&lv| scale * half * (lv.exp() - T::one())).collect(),
                ));
            }
            Op::MeanAbsError { a, b, out: o } => {
                let Some(g) = self.take_grad(o) else { return out };
                let scale = g[0] / T::lit(self.values[a].numel() as f64);
                let da: Vec<T> = self.values[a]
                    .data()
                    .iter()
                    .zip(self.values[b].data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((b, da.iter().map(|&v| -v).collect()));
                out.push((a, da));
            }
            Op::MeanSquaredError { a, b, out: o } => {
                let Some(g) = self.take_grad(o) else { return out };
                let scale = T::lit(2.0) * g[0] / T::lit(self.values[a].numel() as f64);
                let da: Vec<T> =
                    self.values[a].data().iter().zip(self.values[b].data()).map(|(&x, &y)| scale * (x - y)).collect();
                out.push((b, da.iter().map(|&v| -v).collect()));
                out.push((a, da));
            }
        }
        out
    }
}
