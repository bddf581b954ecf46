//! Minimal define-by-run differentiable compute engine.
//!
//! A `Tape` owns every tensor created during one forward pass; operations
//! append nodes eagerly and `backward` runs a single reverse sweep over the
//! creation order. The graph is rebuilt each pass, so training steps are
//! allocate-forward-backward-drop.
//!
//! Storage is `f32` in production; every op is generic over [`Element`] so
//! the same graph can be replayed in `f64` when gradient checks need the
//! extra headroom.

mod adam;
mod conv;
pub mod gradcheck;
mod serialize;

pub use adam::{AdamConfig, AdamState};
pub use serialize::{read_named_tensors, write_named_tensors};

use ndarray::{Array2, ArrayD, ArrayView2, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use conv::ConvGeometry;

/// Scalar type the engine can run in: `f32` for training, `f64` for
/// verification passes.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

impl Element for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv3d { x: TensorId, w: TensorId, b: TensorId, stride: usize, padding: usize },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Matmul { a: TensorId, b: TensorId },
    Relu { x: TensorId },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    MaxPool3d { x: TensorId, argmax: Vec<u32> },
    Upsample3d { x: TensorId },
    ConcatChannels { a: TensorId, b: TensorId, a_channels: usize },
    Add { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: T },
    /// `scale (elementwise constant) * x + shift`; only `x` gets gradient.
    Affine { x: TensorId, scale: ArrayD<T> },
    MeanAll { x: TensorId },
    SumAll { x: TensorId },
    AddN { xs: Vec<TensorId> },
    MaeLoss { pred: TensorId, target: TensorId },
    BceWithLogits { logit: TensorId, label: T },
}

struct Node<T: Element> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run computation tape.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients accumulate on it over
    /// `backward` calls when `requires_grad` is set.
    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> TensorId {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: T) -> TensorId {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v), false)
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> T {
        *self.nodes[id.0]
            .value
            .iter()
            .next()
            .expect("scalar tensors are non-empty")
    }

    pub fn grad(&self, id: TensorId) -> Option<&ArrayD<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Cross-correlation of `[N, C, D, H, W]` input with `[Co, C, kd, kh, kw]`
    /// weights plus per-channel bias; stride 1 or 2, symmetric zero padding.
    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidParameter(format!(
                "conv3d stride must be 1 or 2, got {stride}"
            )));
        }
        let geom = self.conv_geometry(x, w, stride, padding)?;
        let bias = &self.nodes[b.0].value;
        if bias.shape() != [geom.out_channels] {
            return Err(Error::ShapeMismatch(format!(
                "conv3d bias shape {:?} does not match {} output channels",
                bias.shape(),
                geom.out_channels
            )));
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let batch = xv.shape()[0];
        let in_sz = geom.in_channels * geom.in_voxels();
        let out_sz = geom.out_channels * geom.out_voxels();
        let [od, oh, ow] = geom.out_spatial;

        let x_slice = xv.as_slice().expect("tape tensors are standard layout");
        let w2d = ArrayView2::from_shape(
            (geom.out_channels, geom.col_rows()),
            wv.as_slice().expect("tape tensors are standard layout"),
        )
        .expect("weight reshape");
        let bias_slice = bias.as_slice().expect("tape tensors are standard layout");

        let mut out = vec![T::zero(); batch * out_sz];
        for s in 0..batch {
            let cols = conv::im2col(&x_slice[s * in_sz..(s + 1) * in_sz], &geom);
            conv::gemm_into(w2d, &cols, bias_slice, &mut out[s * out_sz..(s + 1) * out_sz]);
        }
        let value = ArrayD::from_shape_vec(
            IxDyn(&[batch, geom.out_channels, od, oh, ow]),
            out,
        )
        .expect("conv output shape");
        let req = self.requires(&[x, w, b]);
        Ok(self.push(value, req, Op::Conv3d { x, w, b, stride, padding }))
    }

    fn conv_geometry(
        &self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeometry> {
        let xs = self.nodes[x.0].value.shape();
        let ws = self.nodes[w.0].value.shape();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::ShapeMismatch(format!(
                "conv3d expects 5-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::ShapeMismatch(format!(
                "conv3d input channels {} do not match weight channels {}",
                xs[1], ws[1]
            )));
        }
        let in_spatial = [xs[2], xs[3], xs[4]];
        let kernel = [ws[2], ws[3], ws[4]];
        let mut out_spatial = [0usize; 3];
        for a in 0..3 {
            out_spatial[a] = ConvGeometry::out_dim(in_spatial[a], kernel[a], stride, padding)
                .ok_or_else(|| {
                    Error::ShapeMismatch(format!(
                        "conv3d kernel {kernel:?} larger than padded input {in_spatial:?} (padding {padding})"
                    ))
                })?;
        }
        Ok(ConvGeometry {
            in_channels: xs[1],
            out_channels: ws[0],
            in_spatial,
            kernel,
            out_spatial,
            stride,
            padding,
        })
    }

    /// `x [N, F] . w [F, G] + b [G]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xv = view2(&self.nodes[x.0].value)?;
        let wv = view2(&self.nodes[w.0].value)?;
        let bv = &self.nodes[b.0].value;
        if xv.ncols() != wv.nrows() || bv.shape() != [wv.ncols()] {
            return Err(Error::ShapeMismatch(format!(
                "linear shapes x{:?} w{:?} b{:?} are inconsistent",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = xv.dot(&wv);
        let bs = bv.as_slice().expect("tape tensors are standard layout");
        for mut row in out.rows_mut() {
            for (o, &bc) in row.iter_mut().zip(bs) {
                *o += bc;
            }
        }
        let req = self.requires(&[x, w, b]);
        Ok(self.push(out.into_dyn(), req, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let av = view2(&self.nodes[a.0].value)?;
        let bv = view2(&self.nodes[b.0].value)?;
        if av.ncols() != bv.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.dot(&bv).into_dyn();
        let req = self.requires(&[a, b]);
        Ok(self.push(out, req, Op::Matmul { a, b }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out = self.nodes[x.0].value.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let req = self.requires(&[x]);
        self.push(out, req, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out = self.nodes[x.0].value.mapv(|v| v.tanh());
        let req = self.requires(&[x]);
        self.push(out, req, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out = self.nodes[x.0].value.mapv(sigmoid_scalar);
        let req = self.requires(&[x]);
        self.push(out, req, Op::Sigmoid { x })
    }

    /// 2x2x2 max pooling with stride 2 on `[N, C, D, H, W]`; spatial dims
    /// must be even.
    pub fn maxpool3d_2x(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 5 {
            return Err(Error::ShapeMismatch(format!(
                "maxpool3d expects 5-d input, got {xs:?}"
            )));
        }
        let spatial = [xs[2], xs[3], xs[4]];
        if spatial.iter().any(|d| d % 2 != 0) {
            return Err(Error::ShapeMismatch(format!(
                "maxpool3d needs even spatial dims, got {spatial:?}"
            )));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let sample = channels * spatial.iter().product::<usize>();
        let xv = self.nodes[x.0].value.as_slice().expect("standard layout");
        let out_len = batch * sample / 8;
        let mut out = Vec::with_capacity(out_len);
        let mut argmax = Vec::with_capacity(out_len);
        for s in 0..batch {
            conv::maxpool_forward(
                &xv[s * sample..(s + 1) * sample],
                channels,
                spatial,
                &mut out,
                &mut argmax,
                s * sample,
            );
        }
        let value = ArrayD::from_shape_vec(
            IxDyn(&[batch, channels, spatial[0] / 2, spatial[1] / 2, spatial[2] / 2]),
            out,
        )
        .expect("pool output shape");
        let req = self.requires(&[x]);
        Ok(self.push(value, req, Op::MaxPool3d { x, argmax }))
    }

    /// Nearest-neighbor 2x upsampling of `[N, C, D, H, W]`.
    pub fn upsample_nearest3d(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 5 {
            return Err(Error::ShapeMismatch(format!(
                "upsample expects 5-d input, got {xs:?}"
            )));
        }
        let spatial = [xs[2], xs[3], xs[4]];
        let (batch, channels) = (xs[0], xs[1]);
        let sample = channels * spatial.iter().product::<usize>();
        let xv = self.nodes[x.0].value.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); batch * sample * 8];
        for s in 0..batch {
            conv::upsample_forward(
                &xv[s * sample..(s + 1) * sample],
                channels,
                spatial,
                &mut out[s * sample * 8..(s + 1) * sample * 8],
            );
        }
        let value = ArrayD::from_shape_vec(
            IxDyn(&[batch, channels, spatial[0] * 2, spatial[1] * 2, spatial[2] * 2]),
            out,
        )
        .expect("upsample output shape");
        let req = self.requires(&[x]);
        Ok(self.push(value, req, Op::Upsample3d { x }))
    }

    /// Concatenates two `[N, C, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let asx = self.nodes[a.0].value.shape().to_vec();
        let bsx = self.nodes[b.0].value.shape().to_vec();
        if asx.len() != bsx.len()
            || asx.len() < 2
            || asx[0] != bsx[0]
            || asx[2..] != bsx[2..]
        {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels shapes {asx:?} and {bsx:?} are incompatible"
            )));
        }
        let (batch, ca, cb) = (asx[0], asx[1], bsx[1]);
        let spatial: usize = asx[2..].iter().product();
        let av = self.nodes[a.0].value.as_slice().expect("standard layout");
        let bv = self.nodes[b.0].value.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(batch * (ca + cb) * spatial);
        for s in 0..batch {
            out.extend_from_slice(&av[s * ca * spatial..(s + 1) * ca * spatial]);
            out.extend_from_slice(&bv[s * cb * spatial..(s + 1) * cb * spatial]);
        }
        let mut shape = asx.clone();
        shape[1] = ca + cb;
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("concat shape");
        let req = self.requires(&[a, b]);
        Ok(self.push(value, req, Op::ConcatChannels { a, b, a_channels: ca }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add shapes {:?} and {:?} differ",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.requires(&[a, b]);
        Ok(self.push(out, req, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let out = self.nodes[x.0].value.mapv(|v| v * c);
        let req = self.requires(&[x]);
        self.push(out, req, Op::Scale { x, c })
    }

    /// Elementwise `scale * x + shift` with a constant scale tensor.
    pub fn affine(&mut self, x: TensorId, scale: ArrayD<T>, shift: T) -> Result<TensorId> {
        if scale.shape() != self.nodes[x.0].value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "affine scale shape {:?} does not match input {:?}",
                scale.shape(),
                self.nodes[x.0].value.shape()
            )));
        }
        let mut out = self.nodes[x.0].value.clone();
        out.zip_mut_with(&scale, |o, &s| *o = *o * s + shift);
        let req = self.requires(&[x]);
        Ok(self.push(out, req, Op::Affine { x, scale }))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        let n = T::from_f64(v.len() as f64);
        let sum = v.iter().fold(T::zero(), |acc, &e| acc + e);
        let out = ArrayD::from_elem(IxDyn(&[]), sum / n);
        let req = self.requires(&[x]);
        self.push(out, req, Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let sum = self.nodes[x.0].value.iter().fold(T::zero(), |acc, &e| acc + e);
        let out = ArrayD::from_elem(IxDyn(&[]), sum);
        let req = self.requires(&[x]);
        self.push(out, req, Op::SumAll { x })
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn add_n(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidParameter("add_n of zero tensors".into()))?;
        let shape = self.nodes[first.0].value.shape().to_vec();
        let mut out = self.nodes[first.0].value.clone();
        for id in &xs[1..] {
            if self.nodes[id.0].value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch("add_n shapes differ".into()));
            }
            out += &self.nodes[id.0].value;
        }
        let req = self.requires(xs);
        Ok(self.push(out, req, Op::AddN { xs: xs.to_vec() }))
    }

    /// Mean absolute error over all elements; subgradient 0 at exact ties.
    pub fn mae_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let p = &self.nodes[pred.0].value;
        let t = &self.nodes[target.0].value;
        if p.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mae_loss shapes {:?} and {:?} differ",
                p.shape(),
                t.shape()
            )));
        }
        let n = T::from_f64(p.len() as f64);
        let mut sum = T::zero();
        for (&a, &b) in p.iter().zip(t.iter()) {
            sum += (a - b).abs();
        }
        let out = ArrayD::from_elem(IxDyn(&[]), sum / n);
        let req = self.requires(&[pred, target]);
        Ok(self.push(out, req, Op::MaeLoss { pred, target }))
    }

    /// Numerically stable binary cross-entropy on a single logit.
    pub fn bce_with_logits(&mut self, logit: TensorId, label: u8) -> Result<TensorId> {
        if self.nodes[logit.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "bce_with_logits expects a scalar logit, got shape {:?}",
                self.nodes[logit.0].value.shape()
            )));
        }
        if label > 1 {
            return Err(Error::InvalidParameter(format!(
                "binary label must be 0 or 1, got {label}"
            )));
        }
        let z = self.scalar_value(logit);
        let y = T::from_f64(label as f64);
        // max(z, 0) - z*y + ln(1 + exp(-|z|))
        let loss = z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        let out = ArrayD::from_elem(IxDyn(&[]), loss);
        let req = self.requires(&[logit]);
        Ok(self.push(out, req, Op::BceWithLogits { logit, label: y }))
    }

    /// Reverse sweep from a scalar root; gradients accumulate on leaves
    /// (so a second call without re-seeding doubles them).
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        {
            let root_node = &mut self.nodes[root.0];
            let seed = ArrayD::from_elem(root_node.value.raw_dim(), T::one());
            match &mut root_node.grad {
                Some(g) => *g += &seed,
                None => root_node.grad = Some(seed),
            }
        }
        for i in (0..=root.0).rev() {
            self.backprop_node(i)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) -> Result<()> {
        if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
            return Ok(());
        }
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let Some(gout) = node.grad.take() else {
            return Ok(());
        };

        match &node.op {
            Op::Leaf => unreachable!("leaves are skipped above"),
            Op::Conv3d { x, w, b, stride, padding } => {
                backward_conv3d(before, &node.value, &gout, *x, *w, *b, *stride, *padding)?;
            }
            Op::Linear { x, w, b } => {
                let g2 = view2(&gout)?;
                let xv = view2(&before[x.0].value)?.to_owned();
                let wv = view2(&before[w.0].value)?.to_owned();
                let dx = before[x.0]
                    .requires_grad
                    .then(|| conv::gemm_owned(g2, wv.t()).into_dyn());
                let dw = before[w.0]
                    .requires_grad
                    .then(|| conv::gemm_owned(xv.t(), g2).into_dyn());
                let db = before[b.0].requires_grad.then(|| {
                    g2.sum_axis(ndarray::Axis(0)).into_dyn()
                });
                if let Some(d) = dx {
                    accumulate(before, *x, d);
                }
                if let Some(d) = dw {
                    accumulate(before, *w, d);
                }
                if let Some(d) = db {
                    accumulate(before, *b, d);
                }
            }
            Op::Matmul { a, b } => {
                let g2 = view2(&gout)?;
                let av = view2(&before[a.0].value)?.to_owned();
                let bv = view2(&before[b.0].value)?.to_owned();
                let da = before[a.0]
                    .requires_grad
                    .then(|| conv::gemm_owned(g2, bv.t()).into_dyn());
                let db = before[b.0]
                    .requires_grad
                    .then(|| conv::gemm_owned(av.t(), g2).into_dyn());
                if let Some(d) = da {
                    accumulate(before, *a, d);
                }
                if let Some(d) = db {
                    accumulate(before, *b, d);
                }
            }
            Op::Relu { x } => {
                let mut d = gout;
                d.zip_mut_with(&node.value, |g, &o| {
                    if o <= T::zero() {
                        *g = T::zero();
                    }
                });
                accumulate(before, *x, d);
            }
            Op::Tanh { x } => {
                let mut d = gout;
                d.zip_mut_with(&node.value, |g, &o| *g = *g * (T::one() - o * o));
                accumulate(before, *x, d);
            }
            Op::Sigmoid { x } => {
                let mut d = gout;
                d.zip_mut_with(&node.value, |g, &o| *g = *g * o * (T::one() - o));
                accumulate(before, *x, d);
            }
            Op::MaxPool3d { x, argmax } => {
                let mut dx = ArrayD::zeros(before[x.0].value.raw_dim());
                {
                    let dxs = dx.as_slice_mut().expect("standard layout");
                    let gs = gout.as_slice().expect("standard layout");
                    for (k, &src) in argmax.iter().enumerate() {
                        dxs[src as usize] += gs[k];
                    }
                }
                accumulate(before, *x, dx);
            }
            Op::Upsample3d { x } => {
                let xs = before[x.0].value.shape();
                let (batch, channels) = (xs[0], xs[1]);
                let spatial = [xs[2], xs[3], xs[4]];
                let sample = channels * spatial.iter().product::<usize>();
                let mut dx = vec![T::zero(); batch * sample];
                let gs = gout.as_slice().expect("standard layout");
                for s in 0..batch {
                    conv::upsample_backward(
                        &gs[s * sample * 8..(s + 1) * sample * 8],
                        channels,
                        spatial,
                        &mut dx[s * sample..(s + 1) * sample],
                    );
                }
                let dx = ArrayD::from_shape_vec(before[x.0].value.raw_dim(), dx)
                    .expect("upsample grad shape");
                accumulate(before, *x, dx);
            }
            Op::ConcatChannels { a, b, a_channels } => {
                let asx = before[a.0].value.shape().to_vec();
                let bsx = before[b.0].value.shape().to_vec();
                let batch = asx[0];
                let spatial: usize = asx[2..].iter().product();
                let (ca, cb) = (*a_channels, bsx[1]);
                let gs = gout.as_slice().expect("standard layout");
                let mut da = Vec::with_capacity(batch * ca * spatial);
                let mut db = Vec::with_capacity(batch * cb * spatial);
                for s in 0..batch {
                    let base = s * (ca + cb) * spatial;
                    da.extend_from_slice(&gs[base..base + ca * spatial]);
                    db.extend_from_slice(&gs[base + ca * spatial..base + (ca + cb) * spatial]);
                }
                if before[a.0].requires_grad {
                    let da = ArrayD::from_shape_vec(IxDyn(&asx), da).expect("concat grad");
                    accumulate(before, *a, da);
                }
                if before[b.0].requires_grad {
                    let db = ArrayD::from_shape_vec(IxDyn(&bsx), db).expect("concat grad");
                    accumulate(before, *b, db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if before[a.0].requires_grad {
                    accumulate(before, a, gout.clone());
                }
                if before[b.0].requires_grad {
                    accumulate(before, b, gout);
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                accumulate(before, *x, gout.mapv(|g| g * c));
            }
            Op::Affine { x, scale } => {
                let mut d = gout;
                d.zip_mut_with(scale, |g, &s| *g = *g * s);
                accumulate(before, *x, d);
            }
            Op::MeanAll { x } => {
                let g = *gout.iter().next().expect("scalar grad");
                let n = T::from_f64(before[x.0].value.len() as f64);
                let d = ArrayD::from_elem(before[x.0].value.raw_dim(), g / n);
                accumulate(before, *x, d);
            }
            Op::SumAll { x } => {
                let g = *gout.iter().next().expect("scalar grad");
                let d = ArrayD::from_elem(before[x.0].value.raw_dim(), g);
                accumulate(before, *x, d);
            }
            Op::AddN { xs } => {
                for id in xs.clone() {
                    if before[id.0].requires_grad {
                        accumulate(before, id, gout.clone());
                    }
                }
            }
            Op::MaeLoss { pred, target } => {
                let g = *gout.iter().next().expect("scalar grad");
                let n = T::from_f64(before[pred.0].value.len() as f64);
                let scale = g / n;
                let p = &before[pred.0].value;
                let t = &before[target.0].value;
                let mut d = p.clone();
                d.zip_mut_with(t, |dv, &tv| {
                    let diff = *dv - tv;
                    *dv = if diff > T::zero() {
                        scale
                    } else if diff < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    };
                });
                if before[target.0].requires_grad {
                    accumulate(before, *target, d.mapv(|v| -v));
                }
                if before[pred.0].requires_grad {
                    accumulate(before, *pred, d);
                }
            }
            Op::BceWithLogits { logit, label } => {
                let g = *gout.iter().next().expect("scalar grad");
                let z = *before[logit.0].value.iter().next().expect("scalar logit");
                let d = (sigmoid_scalar(z) - *label) * g;
                let d = ArrayD::from_elem(before[logit.0].value.raw_dim(), d);
                accumulate(before, *logit, d);
            }
        }
        Ok(())
    }
}

fn backward_conv3d<T: Element>(
    before: &mut [Node<T>],
    _out: &ArrayD<T>,
    gout: &ArrayD<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
    stride: usize,
    padding: usize,
) -> Result<()> {
    let xs = before[x.0].value.shape().to_vec();
    let ws = before[w.0].value.shape().to_vec();
    let geom = ConvGeometry {
        in_channels: xs[1],
        out_channels: ws[0],
        in_spatial: [xs[2], xs[3], xs[4]],
        kernel: [ws[2], ws[3], ws[4]],
        out_spatial: {
            let gs = gout.shape();
            [gs[2], gs[3], gs[4]]
        },
        stride,
        padding,
    };
    let batch = xs[0];
    let in_sz = geom.in_channels * geom.in_voxels();
    let out_sz = geom.out_channels * geom.out_voxels();
    let ov = geom.out_voxels();
    let need_dx = before[x.0].requires_grad;
    let need_dw = before[w.0].requires_grad;
    let need_db = before[b.0].requires_grad;

    let gs = gout.as_slice().expect("standard layout");
    let x_slice = before[x.0].value.as_slice().expect("standard layout");
    let w2d = ArrayView2::from_shape(
        (geom.out_channels, geom.col_rows()),
        before[w.0].value.as_slice().expect("standard layout"),
    )
    .expect("weight reshape");

    let mut dw2d = need_dw.then(|| Array2::<T>::zeros((geom.out_channels, geom.col_rows())));
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_sz]);
    let mut db = need_db.then(|| vec![T::zero(); geom.out_channels]);

    for s in 0..batch {
        let g2 = ArrayView2::from_shape(
            (geom.out_channels, ov),
            &gs[s * out_sz..(s + 1) * out_sz],
        )
        .expect("grad reshape");
        if let Some(acc) = dw2d.as_mut() {
            let cols = conv::im2col(&x_slice[s * in_sz..(s + 1) * in_sz], &geom);
            let contrib = conv::gemm_owned(g2, cols.t());
            conv::add_into(acc.view_mut(), &contrib);
        }
        if let Some(dxv) = dx.as_mut() {
            let dcols = conv::gemm_owned(w2d.t(), g2);
            conv::col2im_add(&dcols, &geom, &mut dxv[s * in_sz..(s + 1) * in_sz]);
        }
        if let Some(dbv) = db.as_mut() {
            for c in 0..geom.out_channels {
                let mut acc = T::zero();
                for &g in &gs[s * out_sz + c * ov..s * out_sz + (c + 1) * ov] {
                    acc += g;
                }
                dbv[c] += acc;
            }
        }
    }

    if let Some(dxv) = dx {
        let shape = before[x.0].value.raw_dim();
        accumulate(before, x, ArrayD::from_shape_vec(shape, dxv).expect("dx shape"));
    }
    if let Some(dwv) = dw2d {
        let shape = before[w.0].value.raw_dim();
        let flat: Vec<T> = dwv.into_iter().collect();
        accumulate(before, w, ArrayD::from_shape_vec(shape, flat).expect("dw shape"));
    }
    if let Some(dbv) = db {
        accumulate(before, b, ArrayD::from_shape_vec(IxDyn(&[geom.out_channels]), dbv).expect("db shape"));
    }
    Ok(())
}

fn accumulate<T: Element>(nodes: &mut [Node<T>], id: TensorId, contrib: ArrayD<T>) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => *g += &contrib,
        None => node.grad = Some(contrib),
    }
}

fn view2<T: Element>(a: &ArrayD<T>) -> Result<ArrayView2<'_, T>> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::ShapeMismatch(format!("expected 2-d tensor, got {:?}", a.shape())))
}

fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
