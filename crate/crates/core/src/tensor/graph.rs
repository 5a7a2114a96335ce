use super::kernels::{bilinear_taps, col2im, conv_out_extent, im2col, instance_stats, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution hyper-parameters. Padding is symmetric zero padding on every side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Square kernel with "same" padding `dilation*(k-1)/2` and stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Output spatial extents for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::shape("conv2d", format!("degenerate spec {self:?}")));
        }
        let ho = conv_out_extent(h, self.kernel_h, self.stride, self.dilation, self.padding);
        let wo = conv_out_extent(w, self.kernel_w, self.stride, self.dilation, self.padding);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(
                "conv2d",
                format!(
                    "dilated kernel {}x{} (dilation {}) exceeds padded input {}x{}",
                    self.dilation * (self.kernel_h - 1) + 1,
                    self.dilation * (self.kernel_w - 1) + 1,
                    self.dilation,
                    h + 2 * self.padding,
                    w + 2 * self.padding
                ),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Mean over H×W, giving `[N, C]`.
    GlobalAvg,
    /// Max over H×W, giving `[N, C]`.
    GlobalMax,
    /// Mean over channels, giving `[N, 1, H, W]`.
    ChannelAvg,
    /// Max over channels, giving `[N, 1, H, W]`.
    ChannelMax,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Geometry of the forward conv that this op is the adjoint of.
        geom: ConvGeom,
        in_channels: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    Resize {
        x: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    ScaleSpatial {
        x: Var,
        s: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Every op validates shapes eagerly and records what its backward rule needs.
/// A graph supports exactly one [`Graph::backward`]; afterwards only the leaf
/// gradients remain and a second call is an error.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Selection state of every piecewise op: ReLU input signs and max-pool
    /// winners. Two evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.nodes[a.0].value.data.iter().map(|&v| (v > T::zero()) as u32)),
                Op::Pool { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u32)),
                _ => {}
            }
        }
        out
    }

    /// Records an input. Only leaves created with `requires_grad` receive gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the loss with respect to a leaf, present only after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map(&self, v: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(v);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.map(a, |x| x * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let out = self.map(a, |x| x + k);
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let k = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.len());
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = match t.shape() {
            &[n, k] => (n, k),
            s => return Err(Error::shape("cross_entropy", format!("expected [N,K] logits, got {s:?}"))),
        };
        if targets.len() != n || targets.iter().any(|&c| c >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets in 0..{k} needed, got {targets:?}", n),
            ));
        }
        let mut probs = t.data().to_vec();
        let mut loss = T::zero();
        for (row, &c) in probs.chunks_mut(k).zip(targets) {
            softmax_in_place(row);
            loss = loss - row[c].max(T::min_positive_value()).ln();
        }
        loss = loss / T::from_usize(n);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Dilated, strided 2-D convolution. `weight` is `[O, C, kh, kw]`, `bias` is `[O]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("conv2d")?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        if self.shape(weight) != spec.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} does not match spec {:?}", self.shape(weight), spec.weight_shape()),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::shape("conv2d", format!("bias {:?}, expected [{}]", self.shape(b), spec.out_channels)));
            }
        }
        let (ho, wo) = spec.output_hw(h, w)?;
        let geom = ConvGeom {
            c,
            h,
            w,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            dilation: spec.dilation,
            pad: spec.padding,
            ho,
            wo,
        };
        let o = spec.out_channels;
        let (k, p) = (geom.patch_len(), geom.out_len());
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = vec![T::zero(); k * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            for s in 0..n {
                im2col(&xv[s * geom.in_len()..(s + 1) * geom.in_len()], &geom, &mut cols);
                T::gemm(o, k, p, wv, (k, 1), &cols, (p, 1), T::zero(), &mut out[s * o * p..(s + 1) * o * p], (p, 1));
            }
            if let Some(b) = bias {
                add_channel_bias(&mut out, self.value(b).data(), p);
            }
        }
        let value = Tensor {
            shape: vec![n, o, ho, wo],
            data: out,
        };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                geom,
                out_channels: o,
            },
            &inputs,
        ))
    }

    /// Transposed convolution (adjoint of a strided conv). `weight` is `[C_in, C_out, kh, kw]`;
    /// output extent is `(H-1)*stride + kh - 2*pad`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(x).dims4("conv_transpose2d")?;
        let (wc, cout, kh, kw) = self.value(weight).dims4("conv_transpose2d")?;
        if wc != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {cin} channels, weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv_transpose2d", "stride must be at least 1"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let ho = ((h - 1) * stride + kh).checked_sub(2 * pad).filter(|&v| v > 0);
        let wo = ((w - 1) * stride + kw).checked_sub(2 * pad).filter(|&v| v > 0);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv_transpose2d", format!("padding {pad} too large for kernel {kh}x{kw}"))),
        };
        // forward conv geometry: c_out×ho×wo -> c_in×h×w
        let geom = ConvGeom {
            c: cout,
            h: ho,
            w: wo,
            kh,
            kw,
            stride,
            dilation: 1,
            pad,
            ho: h,
            wo: w,
        };
        let (k, p) = (geom.patch_len(), geom.out_len());
        let mut out = vec![T::zero(); n * geom.in_len()];
        let mut cols = vec![T::zero(); k * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            for s in 0..n {
                T::gemm(k, cin, p, wv, (1, k), &xv[s * cin * p..(s + 1) * cin * p], (p, 1), T::zero(), &mut cols, (p, 1));
                col2im(&cols, &geom, &mut out[s * geom.in_len()..(s + 1) * geom.in_len()]);
            }
            if let Some(b) = bias {
                add_channel_bias(&mut out, self.value(b).data(), ho * wo);
            }
        }
        let value = Tensor {
            shape: vec![n, cout, ho, wo],
            data: out,
        };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w: weight,
                b: bias,
                geom,
                in_channels: cin,
            },
            &inputs,
        ))
    }

    /// Per-(sample, channel) standardization over H×W followed by a per-channel affine.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("instance_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "instance_norm",
                format!("gamma {:?} / beta {:?} must be [{c}]", self.shape(gamma), self.shape(beta)),
            ));
        }
        let plane = h * w;
        let (xhat, inv_std) = instance_stats(self.value(x).data(), n * c, plane, eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = *v * g[ch] + b[ch];
            }
        }
        let value = Tensor {
            shape: vec![n, c, h, w],
            data: out,
        };
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("pool")?;
        let xv = self.value(x).data();
        let plane = h * w;
        let mut argmax = Vec::new();
        let (shape, data) = match kind {
            PoolKind::GlobalAvg => {
                let m = T::from_usize(plane);
                let d = xv.chunks(plane).map(|p| p.iter().copied().sum::<T>() / m).collect();
                (vec![n, c], d)
            }
            PoolKind::GlobalMax => {
                let mut d = Vec::with_capacity(n * c);
                for p in xv.chunks(plane) {
                    let (i, v) = arg_max(p.iter().copied());
                    argmax.push(i);
                    d.push(v);
                }
                (vec![n, c], d)
            }
            PoolKind::ChannelAvg => {
                let m = T::from_usize(c);
                let mut d = vec![T::zero(); n * plane];
                for s in 0..n {
                    for ch in 0..c {
                        let src = &xv[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        for (o, &v) in d[s * plane..(s + 1) * plane].iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
                d.iter_mut().for_each(|v| *v = *v / m);
                (vec![n, 1, h, w], d)
            }
            PoolKind::ChannelMax => {
                let mut d = Vec::with_capacity(n * plane);
                for s in 0..n {
                    for q in 0..plane {
                        let (i, v) = arg_max((0..c).map(|ch| xv[(s * c + ch) * plane + q]));
                        argmax.push(i);
                        d.push(v);
                    }
                }
                (vec![n, 1, h, w], d)
            }
        };
        Ok(self.push(Tensor { shape, data }, Op::Pool { x, kind, argmax }, &[x]))
    }

    /// Fully connected layer: `x` is `[N, I]`, `weight` is `[O, I]`, `bias` is `[O]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, i) = match self.shape(x) {
            &[n, i] => (n, i),
            s => return Err(Error::shape("dense", format!("expected [N,I] input, got {s:?}"))),
        };
        let o = match self.shape(weight) {
            &[o, wi] if wi == i => o,
            s => return Err(Error::shape("dense", format!("weight {s:?} incompatible with input width {i}"))),
        };
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("dense", format!("bias {:?}, expected [{o}]", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, i, o, self.value(x).data(), (i, 1), self.value(weight).data(), (1, i), T::zero(), &mut out, (o, 1));
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v = *v + bb;
                }
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(Tensor { shape: vec![n, o], data: out }, Op::Dense { x, w: weight, b: bias }, &inputs))
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_channels"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(p), self.shape(first)),
                ));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                data.extend_from_slice(&t.data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        Ok(self.push(Tensor { shape: vec![n, total, h, w], data }, Op::Concat(parts.to_vec()), parts))
    }

    /// Half-pixel bilinear resize of the spatial axes with edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "target extents must be positive"));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for (src, dst) in xv.chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let wy = T::from_f64(wy);
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let wx = T::from_f64(wx);
                    let top = src[y0 * w + x0] * (T::one() - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (T::one() - wx) + src[y1 * w + x1] * wx;
                    dst[oy * out_w + ox] = top * (T::one() - wy) + bot * wy;
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![n, c, out_h, out_w], data: out }, Op::Resize { x }, &[x]))
    }

    /// `x[n,c,h,w] * s[n,c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("scale_channels")?;
        if self.shape(s) != [n, c] {
            return Err(Error::shape("scale_channels", format!("scale {:?}, expected [{n}, {c}]", self.shape(s))));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(h * w).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * sv[i]);
        }
        Ok(self.push(Tensor { shape: vec![n, c, h, w], data }, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// `x[n,c,h,w] * s[n,0,h,w]`.
    pub fn scale_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("scale_spatial")?;
        if self.shape(s) != [n, 1, h, w] {
            return Err(Error::shape("scale_spatial", format!("map {:?}, expected [{n}, 1, {h}, {w}]", self.shape(s))));
        }
        let plane = h * w;
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let m = &sv[(i / c) * plane..(i / c + 1) * plane];
            chunk.iter_mut().zip(m).for_each(|(v, &k)| *v = *v * k);
        }
        Ok(self.push(Tensor { shape: vec![n, c, h, w], data }, Op::ScaleSpatial { x, s }, &[x, s]))
    }

    /// Reverse pass from a scalar loss. Populates gradients on every leaf that
    /// requires them and frees intermediate gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) || !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[id].take() else { continue };
            let mut acc = Accumulator {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            backprop(&self.nodes[id], &gy, &mut acc);
        }
        Ok(())
    }
}

struct Accumulator<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Float> Accumulator<'a, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn value(&self, v: Var) -> &'a Tensor<T> {
        let nodes: &'a [Node<T>] = self.nodes;
        &nodes[v.0].value
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first use.
    fn buf(&mut self, v: Var) -> &mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn add_map(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if self.wants(v) {
            for (i, g) in self.buf(v).iter_mut().enumerate() {
                *g = *g + f(i);
            }
        }
    }
}

fn backprop<T: Float>(node: &Node<T>, gy: &[T], acc: &mut Accumulator<'_, T>) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add_map(*a, |i| gy[i]);
            acc.add_map(*b, |i| gy[i]);
        }
        Op::Sub(a, b) => {
            acc.add_map(*a, |i| gy[i]);
            acc.add_map(*b, |i| -gy[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (acc.value(*a).data(), acc.value(*b).data());
            acc.add_map(*a, |i| gy[i] * bv[i]);
            acc.add_map(*b, |i| gy[i] * av[i]);
        }
        Op::Scale(a, k) => acc.add_map(*a, |i| gy[i] * *k),
        Op::Offset(a) | Op::Reshape(a) => acc.add_map(*a, |i| gy[i]),
        Op::Relu(a) => {
            let y = node.value.data();
            acc.add_map(*a, |i| if y[i] > T::zero() { gy[i] } else { T::zero() });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            acc.add_map(*a, |i| gy[i] * y[i] * (T::one() - y[i]));
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let k = *node.value.shape().last().unwrap();
            let dots: Vec<T> = y
                .chunks(k)
                .zip(gy.chunks(k))
                .map(|(yr, gr)| yr.iter().zip(gr).map(|(&p, &g)| p * g).sum())
                .collect();
            acc.add_map(*a, |i| y[i] * (gy[i] - dots[i / k]));
        }
        Op::Sum(a) => acc.add_map(*a, |_| gy[0]),
        Op::Mean(a) => {
            let m = T::from_usize(acc.value(*a).len());
            acc.add_map(*a, |_| gy[0] / m);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let k = acc.value(*logits).shape()[1];
            let n = T::from_usize(targets.len());
            acc.add_map(*logits, |i| {
                let hot = if targets[i / k] == i % k { T::one() } else { T::zero() };
                gy[0] * (probs[i] - hot) / n
            });
        }
        Op::Conv2d { x, w, b, geom, out_channels } => {
            let (o, k, p) = (*out_channels, geom.patch_len(), geom.out_len());
            let n = gy.len() / (o * p);
            if let Some(b) = b {
                if acc.wants(*b) {
                    let db = channel_sums(gy, o, p);
                    acc.add_map(*b, |i| db[i]);
                }
            }
            let want_w = acc.wants(*w);
            let want_x = acc.wants(*x);
            if !want_w && !want_x {
                return;
            }
            let xv = acc.value(*x).data();
            let wv = acc.value(*w).data();
            let mut cols = vec![T::zero(); k * p];
            let mut dw = if want_w { vec![T::zero(); o * k] } else { Vec::new() };
            let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            for s in 0..n {
                let g = &gy[s * o * p..(s + 1) * o * p];
                if want_w {
                    im2col(&xv[s * geom.in_len()..(s + 1) * geom.in_len()], geom, &mut cols);
                    T::gemm(o, p, k, g, (p, 1), &cols, (1, p), T::one(), &mut dw, (k, 1));
                }
                if want_x {
                    T::gemm(k, o, p, wv, (1, k), g, (p, 1), T::zero(), &mut cols, (p, 1));
                    col2im(&cols, geom, &mut dx[s * geom.in_len()..(s + 1) * geom.in_len()]);
                }
            }
            if want_w {
                acc.add_map(*w, |i| dw[i]);
            }
            if want_x {
                acc.add_map(*x, |i| dx[i]);
            }
        }
        Op::ConvTranspose2d { x, w, b, geom, in_channels } => {
            let cin = *in_channels;
            let (k, p) = (geom.patch_len(), geom.out_len());
            let out_len = geom.in_len();
            let n = gy.len() / out_len;
            if let Some(b) = b {
                if acc.wants(*b) {
                    let db = channel_sums(gy, geom.c, geom.h * geom.w);
                    acc.add_map(*b, |i| db[i]);
                }
            }
            let want_w = acc.wants(*w);
            let want_x = acc.wants(*x);
            if !want_w && !want_x {
                return;
            }
            let xv = acc.value(*x).data();
            let wv = acc.value(*w).data();
            let mut cols = vec![T::zero(); k * p];
            let mut dw = if want_w { vec![T::zero(); cin * k] } else { Vec::new() };
            let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            for s in 0..n {
                im2col(&gy[s * out_len..(s + 1) * out_len], geom, &mut cols);
                if want_x {
                    T::gemm(cin, k, p, wv, (k, 1), &cols, (p, 1), T::zero(), &mut dx[s * cin * p..(s + 1) * cin * p], (p, 1));
                }
                if want_w {
                    T::gemm(cin, p, k, &xv[s * cin * p..(s + 1) * cin * p], (p, 1), &cols, (1, p), T::one(), &mut dw, (k, 1));
                }
            }
            if want_w {
                acc.add_map(*w, |i| dw[i]);
            }
            if want_x {
                acc.add_map(*x, |i| dx[i]);
            }
        }
        Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
            let c = acc.value(*gamma).len();
            let planes = inv_std.len();
            let plane = xhat.len() / planes;
            let gv = acc.value(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); xhat.len()];
            let m = T::from_usize(plane);
            for q in 0..planes {
                let ch = q % c;
                let r = q * plane..(q + 1) * plane;
                let (g, xh) = (&gy[r.clone()], &xhat[r.clone()]);
                let sum_g: T = g.iter().copied().sum();
                let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                dbeta[ch] = dbeta[ch] + sum_g;
                dgamma[ch] = dgamma[ch] + sum_gx;
                let k = gv[ch] * inv_std[q] / m;
                for ((d, &gi), &xi) in dx[r].iter_mut().zip(g).zip(xh) {
                    *d = k * (m * gi - sum_g - xi * sum_gx);
                }
            }
            acc.add_map(*x, |i| dx[i]);
            acc.add_map(*gamma, |i| dgamma[i]);
            acc.add_map(*beta, |i| dbeta[i]);
        }
        Op::Pool { x, kind, argmax } => {
            if !acc.wants(*x) {
                return;
            }
            let (_, c, h, w) = acc.value(*x).dims4("pool").unwrap();
            let plane = h * w;
            let buf = acc.buf(*x);
            match kind {
                PoolKind::GlobalAvg => {
                    let m = T::from_usize(plane);
                    for (q, chunk) in buf.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = *v + gy[q] / m);
                    }
                }
                PoolKind::GlobalMax => {
                    for (q, &i) in argmax.iter().enumerate() {
                        buf[q * plane + i] = buf[q * plane + i] + gy[q];
                    }
                }
                PoolKind::ChannelAvg => {
                    let m = T::from_usize(c);
                    for (i, v) in buf.iter_mut().enumerate() {
                        let (s, q) = (i / (c * plane), i % plane);
                        *v = *v + gy[s * plane + q] / m;
                    }
                }
                PoolKind::ChannelMax => {
                    for (j, &ch) in argmax.iter().enumerate() {
                        let (s, q) = (j / plane, j % plane);
                        let i = (s * c + ch) * plane + q;
                        buf[i] = buf[i] + gy[j];
                    }
                }
            }
        }
        Op::Dense { x, w, b } => {
            let (n, i) = (acc.value(*x).shape()[0], acc.value(*x).shape()[1]);
            let o = acc.value(*w).shape()[0];
            if let Some(b) = b {
                let db: Vec<T> = (0..o).map(|j| (0..n).map(|s| gy[s * o + j]).sum()).collect();
                acc.add_map(*b, |j| db[j]);
            }
            if acc.wants(*x) {
                let wv = acc.value(*w).data();
                let buf = acc.buf(*x);
                T::gemm(n, o, i, gy, (o, 1), wv, (i, 1), T::one(), buf, (i, 1));
            }
            if acc.wants(*w) {
                let xv = acc.value(*x).data();
                let buf = acc.buf(*w);
                T::gemm(o, n, i, gy, (1, o), xv, (i, 1), T::one(), buf, (i, 1));
            }
        }
        Op::Concat(parts) => {
            let (n, total, h, w) = node.value.dims4("concat").unwrap();
            let plane = h * w;
            let mut offset = 0;
            for &p in parts {
                let pc = acc.value(p).shape()[1];
                if acc.wants(p) {
                    let buf = acc.buf(p);
                    for s in 0..n {
                        let src = &gy[(s * total + offset) * plane..(s * total + offset + pc) * plane];
                        let dst = &mut buf[s * pc * plane..(s + 1) * pc * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                }
                offset += pc;
            }
        }
        Op::Resize { x } => {
            if !acc.wants(*x) {
                return;
            }
            let (_, _, h, w) = acc.value(*x).dims4("resize").unwrap();
            let (_, _, oh, ow) = node.value.dims4("resize").unwrap();
            let ty = bilinear_taps(h, oh);
            let tx = bilinear_taps(w, ow);
            let buf = acc.buf(*x);
            for (dst, g) in buf.chunks_mut(h * w).zip(gy.chunks(oh * ow)) {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    let wy = T::from_f64(wy);
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let wx = T::from_f64(wx);
                        let v = g[oy * ow + ox];
                        let (top, bot) = (v * (T::one() - wy), v * wy);
                        dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - wx);
                        dst[y0 * w + x1] = dst[y0 * w + x1] + top * wx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - wx);
                        dst[y1 * w + x1] = dst[y1 * w + x1] + bot * wx;
                    }
                }
            }
        }
        Op::ScaleChannels { x, s } => {
            let plane = node.value.shape()[2] * node.value.shape()[3];
            let sv = acc.value(*s).data();
            acc.add_map(*x, |i| gy[i] * sv[i / plane]);
            if acc.wants(*s) {
                let xv = acc.value(*x).data();
                let ds: Vec<T> = xv
                    .chunks(plane)
                    .zip(gy.chunks(plane))
                    .map(|(xr, gr)| xr.iter().zip(gr).map(|(&a, &b)| a * b).sum())
                    .collect();
                acc.add_map(*s, |i| ds[i]);
            }
        }
        Op::ScaleSpatial { x, s } => {
            let (n, c, h, w) = node.value.dims4("scale_spatial").unwrap();
            let plane = h * w;
            let sv = acc.value(*s).data();
            acc.add_map(*x, |i| gy[i] * sv[(i / (c * plane)) * plane + i % plane]);
            if acc.wants(*s) {
                let xv = acc.value(*x).data();
                let mut ds = vec![T::zero(); n * plane];
                for (i, (&a, &g)) in xv.iter().zip(gy).enumerate() {
                    let j = (i / (c * plane)) * plane + i % plane;
                    ds[j] = ds[j] + a * g;
                }
                acc.add_map(*s, |i| ds[i]);
            }
        }
    }
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn channel_sums<T: Float>(g: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for (i, chunk) in g.chunks(plane).enumerate() {
        out[i % c] = out[i % c] + chunk.iter().copied().sum::<T>();
    }
    out
}

fn arg_max<T: Float>(values: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z = z + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / z);
}
