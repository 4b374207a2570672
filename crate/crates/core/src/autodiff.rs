//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order and `backward` is a single
//! reverse sweep. Leaves created with [`Graph::param`] accumulate gradients
//! across `backward` calls until [`Graph::zero_grad`].
//!
//! ```
//! use cascade_core::autodiff::Graph;
//! use cascade_core::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        c0: usize,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    SoftDice {
        p: Var,
        channels: Vec<usize>,
        target: Vec<bool>,
        roi: Vec<bool>,
        epsilon: T,
        overlap: T,
        total: T,
    },
    CrossEntropy {
        p: Var,
        classes: Vec<usize>,
        roi: Vec<bool>,
        clamp: T,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient buffer is filled by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims5(&self, v: Var, op: &'static str) -> Result<[usize; 5]> {
        self.value(v).dims5(op)
    }

    fn check_bias(&self, b: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            let shape = self.value(b).shape();
            if shape != [channels] {
                return Err(Error::shape(
                    op,
                    format!("bias has shape {shape:?}, expected [{channels}] (out-channels)"),
                ));
            }
        }
        Ok(())
    }

    /// 3-D cross-correlation. `w` is `[Cout, Cin, kD, kH, kW]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        const OP: &str = "conv3d";
        let [n, cin, d, h, wd] = self.dims5(x, OP)?;
        let [cout, wcin, kd, kh, kw] = self.dims5(w, OP)?;
        if wcin != cin {
            return Err(Error::shape(
                OP,
                format!("input channels: input has {cin}, kernel expects {wcin}"),
            ));
        }
        if stride.contains(&0) {
            return Err(Error::invalid("conv3d stride must be positive"));
        }
        self.check_bias(b, cout, OP)?;
        let big = [d, h, wd];
        let kernel = [kd, kh, kw];
        let mut small = [0; 3];
        for axis in 0..3 {
            small[axis] = ConvGeometry::out_extent(big[axis], kernel[axis], stride[axis], padding[axis])
                .ok_or_else(|| {
                    Error::shape(
                        OP,
                        format!(
                            "{}: size {} plus padding {} is smaller than kernel {}",
                            AXIS_NAMES[axis], big[axis], 2 * padding[axis], kernel[axis]
                        ),
                    )
                })?;
        }
        let geom = ConvGeometry {
            batch: n,
            big_channels: cin,
            small_channels: cout,
            big,
            small,
            kernel,
            stride,
            padding,
        };
        let mut out = Tensor::zeros(&[n, cout, small[0], small[1], small[2]]);
        conv::correlate(&geom, self.value(x).data(), self.value(w).data(), out.data_mut());
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed 3-D convolution, the adjoint of [`Graph::conv3d`] with the
    /// same stride and padding. `w` is `[Cin, Cout, kD, kH, kW]`, so one
    /// weight array serves a convolution and its transpose.
    pub fn conv3d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        const OP: &str = "conv3d_transpose";
        let [n, cin, d, h, wd] = self.dims5(x, OP)?;
        let [wcin, cout, kd, kh, kw] = self.dims5(w, OP)?;
        if wcin != cin {
            return Err(Error::shape(
                OP,
                format!("input channels: input has {cin}, kernel expects {wcin}"),
            ));
        }
        if stride.contains(&0) {
            return Err(Error::invalid("conv3d_transpose stride must be positive"));
        }
        self.check_bias(b, cout, OP)?;
        let small = [d, h, wd];
        let kernel = [kd, kh, kw];
        let mut big = [0; 3];
        for axis in 0..3 {
            let full = (small[axis] - 1) * stride[axis] + kernel[axis];
            if full <= 2 * padding[axis] {
                return Err(Error::shape(
                    OP,
                    format!("{}: padding {} consumes the whole output", AXIS_NAMES[axis], padding[axis]),
                ));
            }
            big[axis] = full - 2 * padding[axis];
        }
        let geom = ConvGeometry {
            batch: n,
            big_channels: cout,
            small_channels: cin,
            big,
            small,
            kernel,
            stride,
            padding,
        };
        let mut out = Tensor::zeros(&[n, cout, big[0], big[1], big[2]]);
        conv::scatter(&geom, self.value(x).data(), self.value(w).data(), out.data_mut());
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::ConvTranspose { x, w, b, geom }, rg))
    }

    /// Windowed maximum. Ties resolve to the first voxel in scan order.
    pub fn maxpool3d(&mut self, x: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        const OP: &str = "maxpool3d";
        let [n, c, d, h, w] = self.dims5(x, OP)?;
        if window.contains(&0) || stride.contains(&0) {
            return Err(Error::invalid("maxpool3d window and stride must be positive"));
        }
        let dims = [d, h, w];
        let mut out_dims = [0; 3];
        for axis in 0..3 {
            if dims[axis] < window[axis] || !(dims[axis] - window[axis]).is_multiple_of(stride[axis]) {
                return Err(Error::shape(
                    OP,
                    format!(
                        "{}: size {} not divisible into windows of {} with stride {}",
                        AXIS_NAMES[axis], dims[axis], window[axis], stride[axis]
                    ),
                ));
            }
            out_dims[axis] = (dims[axis] - window[axis]) / stride[axis] + 1;
        }
        let [od, oh, ow] = out_dims;
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
        let mut argmax = vec![0usize; out.numel()];
        let in_vol = d * h * w;
        let out_vol = od * oh * ow;
        for nc in 0..n * c {
            let base = nc * in_vol;
            for z in 0..od {
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut best = base + (z * stride[0] * h + y * stride[1]) * w + xw * stride[2];
                        for a in 0..window[0] {
                            for bb in 0..window[1] {
                                for cc in 0..window[2] {
                                    let i = base
                                        + ((z * stride[0] + a) * h + y * stride[1] + bb) * w
                                        + xw * stride[2]
                                        + cc;
                                    if src[i] > src[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        let o = nc * out_vol + (z * oh + y) * ow + xw;
                        out.data_mut()[o] = src[best];
                        argmax[o] = best;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbour repetition: each voxel tiles a `factor` block.
    pub fn repeat_upsample3d(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        const OP: &str = "repeat_upsample3d";
        let [n, c, d, h, w] = self.dims5(x, OP)?;
        if factor.contains(&0) {
            return Err(Error::invalid("repeat_upsample3d factor must be at least 1"));
        }
        let [fd, fh, fw] = factor;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
        let dst = out.data_mut();
        for nc in 0..n * c {
            let ib = nc * d * h * w;
            let ob = nc * od * oh * ow;
            for z in 0..od {
                for y in 0..oh {
                    let irow = ib + ((z / fd) * h + y / fh) * w;
                    let orow = ob + (z * oh + y) * ow;
                    for xw in 0..ow {
                        dst[orow + xw] = src[irow + xw / fw];
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    /// Per-channel batch normalization.
    ///
    /// In [`Mode::Train`] the batch statistics over `(N, D, H, W)` are used
    /// and returned so the caller can fold them into its running averages;
    /// in [`Mode::Infer`] `running` supplies mean and variance.
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        mode: Mode,
        epsilon: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        const OP: &str = "batchnorm3d";
        let [n, c, d, h, w] = self.dims5(x, OP)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    OP,
                    format!("{name} has shape {:?}, input has {c} channels", self.value(v).shape()),
                ));
            }
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(Error::shape(OP, format!("running statistics do not have {c} channels")));
        }
        let vol = d * h * w;
        let count = (n * vol) as f64;
        let src = self.value(x).data();
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => (0..c)
                .map(|ch| {
                    let mut s = 0.0;
                    for b in 0..n {
                        for &v in &src[(b * c + ch) * vol..][..vol] {
                            s += v.f64();
                        }
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for b in 0..n {
                        for &v in &src[(b * c + ch) * vol..][..vol] {
                            let dv = v.f64() - m;
                            ss += dv * dv;
                        }
                    }
                    (T::of(m), T::of(ss / count))
                })
                .unzip(),
            Mode::Infer => (running.0.to_vec(), running.1.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = Tensor::zeros(&[n, c, d, h, w]);
        let dst = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * vol;
                for i in off..off + vol {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    dst[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let batch_stats = mode == Mode::Train;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some(BatchStats { mean, var })))
    }

    /// `max(0, x)` with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Softmax across the channel axis of a 5-D tensor, per voxel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.dims5(x, "softmax_channels")?;
        if c == 0 {
            return Err(Error::shape("softmax_channels", "need at least one channel"));
        }
        let vol = d * h * w;
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, d, h, w]);
        let dst = out.data_mut();
        for b in 0..n {
            let base = b * c * vol;
            for i in 0..vol {
                let mut m = src[base + i];
                for ch in 1..c {
                    m = m.max(src[base + ch * vol + i]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[base + ch * vol + i] - m).exp();
                    dst[base + ch * vol + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    dst[base + ch * vol + i] /= z;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let vb = self.value(b).data();
        let data = self.value(a).data().iter().zip(vb).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Concatenate along channels; all other dimensions must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [n, ca, d, h, w] = self.dims5(a, OP)?;
        let [nb, cb, db, hb, wb] = self.dims5(b, OP)?;
        if (n, d, h, w) != (nb, db, hb, wb) {
            return Err(Error::shape(
                OP,
                format!("non-channel dims differ: {:?} vs {:?}", [n, d, h, w], [nb, db, hb, wb]),
            ));
        }
        let vol = d * h * w;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * vol);
        for i in 0..n {
            data.extend_from_slice(&va[i * ca * vol..(i + 1) * ca * vol]);
            data.extend_from_slice(&vb[i * cb * vol..(i + 1) * cb * vol]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, d, h, w], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(c0, c1)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SliceChannels { x, c0 }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(out, Op::Sum { x }, rg)
    }

    /// Smoothed soft-dice loss `1 - (2·Σ p·q + ε) / (Σ p + Σ q + ε)` over
    /// ROI voxels, where `p` is the per-voxel sum of `channels` of `probs`
    /// and `q` the binary target.
    pub fn soft_dice(
        &mut self,
        probs: Var,
        channels: &[usize],
        target: &[bool],
        roi: &[bool],
        epsilon: T,
    ) -> Result<Var> {
        const OP: &str = "soft_dice";
        let [n, c, d, h, w] = self.dims5(probs, OP)?;
        let vol = d * h * w;
        if n != 1 {
            return Err(Error::shape(OP, format!("batch must be 1, got {n}")));
        }
        if target.len() != vol || roi.len() != vol {
            return Err(Error::shape(
                OP,
                format!("target/roi hold {}/{} voxels, probabilities {vol}", target.len(), roi.len()),
            ));
        }
        if channels.is_empty() || channels.iter().any(|&ch| ch >= c) {
            return Err(Error::shape(OP, format!("channels {channels:?} outside 0..{c}")));
        }
        let p = self.value(probs).data();
        let mut overlap = T::zero();
        let mut total = T::zero();
        for i in 0..vol {
            if !roi[i] {
                continue;
            }
            let pr = channels.iter().fold(T::zero(), |acc, &ch| acc + p[ch * vol + i]);
            if target[i] {
                overlap += pr;
                total += T::one();
            }
            total += pr;
        }
        let two = T::of(2.0);
        let loss = T::one() - (two * overlap + epsilon) / (total + epsilon);
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                p: probs,
                channels: channels.to_vec(),
                target: target.to_vec(),
                roi: roi.to_vec(),
                epsilon,
                overlap,
                total,
            },
            rg,
        ))
    }

    /// Mean over ROI voxels of `-ln max(p[class], clamp)`.
    pub fn cross_entropy(&mut self, probs: Var, classes: &[usize], roi: &[bool], clamp: T) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let [n, c, d, h, w] = self.dims5(probs, OP)?;
        let vol = d * h * w;
        if n != 1 {
            return Err(Error::shape(OP, format!("batch must be 1, got {n}")));
        }
        if classes.len() != vol || roi.len() != vol {
            return Err(Error::shape(
                OP,
                format!("classes/roi hold {}/{} voxels, probabilities {vol}", classes.len(), roi.len()),
            ));
        }
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::shape(OP, format!("class index {bad} outside 0..{c}")));
        }
        let count = roi.iter().filter(|&&r| r).count();
        if count == 0 {
            return Err(Error::EmptyRoi);
        }
        let p = self.value(probs).data();
        let mut acc = T::zero();
        for i in 0..vol {
            if roi[i] {
                acc -= p[classes[i] * vol + i].max(clamp).ln();
            }
        }
        let loss = acc / T::of(count as f64);
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p: probs,
                classes: classes.to_vec(),
                roi: roi.to_vec(),
                clamp,
                count,
            },
            rg,
        ))
    }

    /// Which side of every piecewise branch (ReLU sign, max-pool winner,
    /// log clamp) each element took. Two evaluations of the same expression
    /// with equal patterns lie on one smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => out.extend(self.value(*x).data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                Op::CrossEntropy { p, classes, roi, clamp, .. } => {
                    let pv = self.value(*p).data();
                    let vol = roi.len();
                    out.extend((0..vol).filter(|&i| roi[i]).map(|i| usize::from(pv[classes[i] * vol + i] > *clamp)));
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`, accumulating into parameter
    /// gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut cot: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        cot[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = cot[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut cot[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for upstream cotangent `g`.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    conv::scatter(geom, g.data(), self.value(*w).data(), gx.data_mut());
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    let mut gw = Tensor::zeros(self.value(*w).shape());
                    conv::weight_grad(geom, self.value(*x).data(), g.data(), gw.data_mut());
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, channel_sums(g, geom.small_channels)));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    conv::correlate(geom, g.data(), self.value(*w).data(), gx.data_mut());
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    let mut gw = Tensor::zeros(self.value(*w).shape());
                    conv::weight_grad(geom, g.data(), self.value(*x).data(), gw.data_mut());
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, channel_sums(g, geom.big_channels)));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let dst = gx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dst[src] += gv;
                }
                out.push((*x, gx));
            }
            Op::Upsample { x, factor } => {
                let xs = self.value(*x).shape();
                let [n, c, d, h, w] = [xs[0], xs[1], xs[2], xs[3], xs[4]];
                let [fd, fh, fw] = *factor;
                let (od, oh, ow) = (d * fd, h * fh, w * fw);
                let mut gx = Tensor::zeros(xs);
                let dst = gx.data_mut();
                let src = g.data();
                for nc in 0..n * c {
                    let ib = nc * d * h * w;
                    let ob = nc * od * oh * ow;
                    for z in 0..od {
                        for y in 0..oh {
                            let irow = ib + ((z / fd) * h + y / fh) * w;
                            let orow = ob + (z * oh + y) * ow;
                            for xw in 0..ow {
                                dst[irow + xw / fw] += src[orow + xw];
                            }
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let vol: usize = shape[2..].iter().product();
                let gd = g.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * vol;
                        for i in off..off + vol {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let m = T::of((n * vol) as f64);
                    let mut gx = Tensor::zeros(shape);
                    let dst = gx.data_mut();
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * vol;
                            let k = gam[ch] * inv_std[ch];
                            if *batch_stats {
                                let mean_g = sum_g[ch] / m;
                                let mean_gx = sum_gx[ch] / m;
                                for i in off..off + vol {
                                    dst[i] = k * (gd[i] - mean_g - xhat[i] * mean_gx);
                                }
                            } else {
                                for i in off..off + vol {
                                    dst[i] = k * gd[i];
                                }
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor::from_vec(&[c], sum_gx).expect("channel vector")));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor::from_vec(&[c], sum_g).expect("channel vector")));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let data = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::from_vec(g.shape(), data).expect("same shape")));
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let s = g.shape();
                let (n, c) = (s[0], s[1]);
                let vol: usize = s[2..].iter().product();
                let gd = g.data();
                let mut gx = Tensor::zeros(s);
                let dst = gx.data_mut();
                for b in 0..n {
                    let base = b * c * vol;
                    for i in 0..vol {
                        let mut dotp = T::zero();
                        for ch in 0..c {
                            let j = base + ch * vol + i;
                            dotp += gd[j] * y[j];
                        }
                        for ch in 0..c {
                            let j = base + ch * vol + i;
                            dst[j] = y[j] * (gd[j] - dotp);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    out.push((*a, Tensor::from_vec(g.shape(), d).expect("same shape")));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va).map(|(&x, &y)| x * y).collect();
                    out.push((*b, Tensor::from_vec(g.shape(), d).expect("same shape")));
                }
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).shape()[1];
                let c = g.shape()[1];
                out.push((*a, g.slice_channels(0, ca).expect("concat split")));
                out.push((*b, g.slice_channels(ca, c).expect("concat split")));
            }
            Op::SliceChannels { x, c0 } => {
                let xs = self.value(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let vol: usize = xs[2..].iter().product();
                let k = g.shape()[1];
                let mut gx = Tensor::zeros(xs);
                for b in 0..n {
                    let src = &g.data()[b * k * vol..(b + 1) * k * vol];
                    let start = (b * c + c0) * vol;
                    gx.data_mut()[start..start + k * vol].copy_from_slice(src);
                }
                out.push((*x, gx));
            }
            Op::Scale { x, factor } => out.push((*x, g.map(|v| v * *factor))),
            Op::Sum { x } => {
                out.push((*x, Tensor::full(self.value(*x).shape(), g.item())));
            }
            Op::SoftDice {
                p,
                channels,
                target,
                roi,
                epsilon,
                overlap,
                total,
            } => {
                let shape = self.value(*p).shape();
                let vol: usize = shape[2..].iter().product();
                let two = T::of(2.0);
                let denom = *total + *epsilon;
                let numer = two * *overlap + *epsilon;
                let upstream = g.item();
                let mut gp = Tensor::zeros(shape);
                let dst = gp.data_mut();
                for i in 0..vol {
                    if !roi[i] {
                        continue;
                    }
                    let q = if target[i] { T::one() } else { T::zero() };
                    let d = -(two * q * denom - numer) / (denom * denom) * upstream;
                    for &ch in channels {
                        dst[ch * vol + i] += d;
                    }
                }
                out.push((*p, gp));
            }
            Op::CrossEntropy {
                p,
                classes,
                roi,
                clamp,
                count,
            } => {
                let pv = self.value(*p).data();
                let shape = self.value(*p).shape();
                let vol: usize = shape[2..].iter().product();
                let scale = g.item() / T::of(*count as f64);
                let mut gp = Tensor::zeros(shape);
                let dst = gp.data_mut();
                for i in 0..vol {
                    if !roi[i] {
                        continue;
                    }
                    let j = classes[i] * vol + i;
                    if pv[j] > *clamp {
                        dst[j] = -scale / pv[j];
                    }
                }
                out.push((*p, gp));
            }
        }
        out
    }
}

const AXIS_NAMES: [&str; 3] = ["depth", "height", "width"];

fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &[T]) {
    let s = out.shape();
    let (n, c) = (s[0], s[1]);
    let vol: usize = s[2..].iter().product();
    let data = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for v in &mut data[(b * c + ch) * vol..][..vol] {
                *v += bias[ch];
            }
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let s = g.shape();
    let n = s[0];
    let vol: usize = s[2..].iter().product();
    let mut sums = vec![T::zero(); channels];
    for b in 0..n {
        for (ch, acc) in sums.iter_mut().enumerate() {
            for &v in &g.data()[(b * channels + ch) * vol..][..vol] {
                *acc += v;
            }
        }
    }
    Tensor::from_vec(&[channels], sums).expect("channel vector")
}
