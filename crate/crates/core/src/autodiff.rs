//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records every operation as it executes. Handles ([`Var`]) are
//! indices into the tape, so operations can only reference earlier nodes and
//! the tape order is already topological. `backward` walks it once in
//! reverse, accumulating gradients additively across graph paths.
//!
//! The graph is rebuilt from scratch every training step; no state survives
//! a step except the parameter tensors the caller owns. A second `backward`
//! on the same graph is an error rather than a silent wrong answer.
//!
//! Every forward operation checks its output for NaN/Inf and fails loudly:
//! finite inputs must produce finite outputs.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    BroadcastMul {
        features: Var,
        gate: Var,
    },
    ConcatChannels(Var, Var),
    UpsampleNearest2x(Var),
    MaxPool2x2(Var),
    ReflectPad2d {
        input: Var,
        pad: usize,
    },
    /// Per-channel valid correlation with a fixed (non-learnable) 2-d kernel.
    FilterDepthwise {
        input: Var,
        kernel: Tensor<T>,
    },
    DiffH(Var),
    DiffV(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of recorded operations plus their values and gradients.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Inserts a tensor as a leaf. `requires_grad` marks it as a parameter
    /// that should receive a gradient during `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient buffer of `v`, if one was populated by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("operand shapes {:?} vs {:?}", sa, sb),
            ));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(
            "add",
            value,
            Op::Add(a, b),
            self.requires(a) || self.requires(b),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(
            "sub",
            value,
            Op::Sub(a, b),
            self.requires(a) || self.requires(b),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(
            "mul",
            value,
            Op::Mul(a, b),
            self.requires(a) || self.requires(b),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x / y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(
            "div",
            value,
            Op::Div(a, b),
            self.requires(a) || self.requires(b),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add_scalar", value, Op::AddScalar(a), self.requires(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul_scalar", value, Op::MulScalar(a, c), self.requires(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -T::ONE)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.max(T::ZERO))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(a), self.requires(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                // Split by sign for numerical stability.
                if x >= T::ZERO {
                    T::ONE / (T::ONE + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::ONE + e)
                }
            })
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("sigmoid", value, Op::Sigmoid(a), self.requires(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.abs()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("abs", value, Op::Abs(a), self.requires(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * x).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("square", value, Op::Square(a), self.requires(a))
    }

    // ── Structural ──────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot reshape {:?} into {:?}",
                    self.value(a).shape(),
                    shape
                ),
            ));
        }
        let value = Tensor::new(shape, self.value(a).data().to_vec())?;
        self.push("reshape", value, Op::Reshape(a), self.requires(a))
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity((ca + cb) * na * plane);
        let da = self.value(a).data();
        let db = self.value(b).data();
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let value = Tensor::new([na, ca + cb, ha, wa], data)?;
        self.push(
            "concat_channels",
            value,
            Op::ConcatChannels(a, b),
            self.requires(a) || self.requires(b),
        )
    }

    // ── Convolution and friends ─────────────────────────────────────────

    /// 2-d cross-correlation with zero padding.
    ///
    /// `input` is `[N, Cin, H, W]`, `weight` `[Cout, Cin, kH, kW]` with odd
    /// kernel extents, `bias` `[Cout]`. Output spatial size is
    /// `(H + 2·padding − kH) / stride + 1` and likewise for width.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (_, cin, h, wd) = x.dims4()?;
        let (cout, cin_w, kh, kw) = w.dims4()?;
        if cin != cin_w {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {}", cin, cin_w),
            ));
        }
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", b.shape(), cout),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel extents must be odd, got {}x{}", kh, kw),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "padded input {}x{} smaller than kernel {}x{}",
                    h + 2 * padding,
                    wd + 2 * padding,
                    kh,
                    kw
                ),
            ));
        }
        let value = conv2d_forward(x, w, b, stride, padding)?;
        let requires = self.requires(input) || self.requires(weight) || self.requires(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            requires,
        )
    }

    /// Fully connected layer: `input [N, K] · weightᵀ [K, M] + bias [M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.value(input).dims2()?;
        let (m, kw) = self.value(weight).dims2()?;
        if k != kw {
            return Err(Error::shape(
                "linear",
                format!("input width {} vs weight width {}", k, kw),
            ));
        }
        if self.value(bias).shape() != [m] {
            return Err(Error::shape(
                "linear",
                format!(
                    "bias shape {:?}, expected [{}]",
                    self.value(bias).shape(),
                    m
                ),
            ));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            let xr = &x[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = b[j] + dot(xr, &w[j * k..(j + 1) * k]);
            }
        }
        let value = Tensor::new([n, m], out)?;
        let requires = self.requires(input) || self.requires(weight) || self.requires(bias);
        self.push(
            "linear",
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            requires,
        )
    }

    /// Mean over the spatial extent: `[N, C, H, W] → [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::invalid(
                "global_avg_pool",
                "spatial extents must be at least 1",
            ));
        }
        let plane = h * w;
        let inv = T::ONE / T::from_f64(plane as f64);
        let x = self.value(input).data();
        let mut out = vec![T::ZERO; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for &v in &x[i * plane..(i + 1) * plane] {
                acc += v;
            }
            *o = acc * inv;
        }
        let value = Tensor::new([n, c, 1, 1], out)?;
        self.push(
            "global_avg_pool",
            value,
            Op::GlobalAvgPool(input),
            self.requires(input),
        )
    }

    /// Multiplies a per-channel gate `[N, C, 1, 1]` into `[N, C, H, W]`.
    pub fn broadcast_mul(&mut self, features: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(features).dims4()?;
        let gs = self.value(gate).shape();
        if gs != [n, c, 1, 1] {
            return Err(Error::shape(
                "broadcast_mul",
                format!("gate shape {:?}, expected [{}, {}, 1, 1]", gs, n, c),
            ));
        }
        let plane = h * w;
        let f = self.value(features).data();
        let g = self.value(gate).data();
        let mut out = vec![T::ZERO; f.len()];
        for i in 0..n * c {
            let gv = g[i];
            for (o, &v) in out[i * plane..(i + 1) * plane]
                .iter_mut()
                .zip(&f[i * plane..(i + 1) * plane])
            {
                *o = v * gv;
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        let requires = self.requires(features) || self.requires(gate);
        self.push(
            "broadcast_mul",
            value,
            Op::BroadcastMul { features, gate },
            requires,
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest_2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let x = self.value(input).data();
        let mut out = vec![T::ZERO; n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for i in 0..n * c {
            let src = &x[i * h * w..(i + 1) * h * w];
            let dst = &mut out[i * oh * ow..(i + 1) * oh * ow];
            for oy in 0..oh {
                let sy = oy / 2;
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[sy * w + ox / 2];
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        self.push(
            "upsample_nearest_2x",
            value,
            Op::UpsampleNearest2x(input),
            self.requires(input),
        )
    }

    /// 2x2 max pooling with stride 2; requires even spatial extents.
    pub fn max_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool_2x2",
                format!("spatial extents {}x{} must be even", h, w),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for i in 0..n * c {
            let src = &x[i * h * w..(i + 1) * h * w];
            let dst = &mut out[i * oh * ow..(i + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let a = src[(2 * oy) * w + 2 * ox];
                    let b = src[(2 * oy) * w + 2 * ox + 1];
                    let c2 = src[(2 * oy + 1) * w + 2 * ox];
                    let d = src[(2 * oy + 1) * w + 2 * ox + 1];
                    dst[oy * ow + ox] = a.max(b).max(c2.max(d));
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        self.push(
            "max_pool_2x2",
            value,
            Op::MaxPool2x2(input),
            self.requires(input),
        )
    }

    /// Mirror padding (without repeating the border sample) on both spatial
    /// axes. Requires `pad < min(H, W)`.
    pub fn reflect_pad2d(&mut self, input: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if pad >= h || pad >= w {
            return Err(Error::invalid(
                "reflect_pad2d",
                format!("pad {} too large for {}x{} input", pad, h, w),
            ));
        }
        if pad == 0 {
            return self.reshape(input, [n, c, h, w]);
        }
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let x = self.value(input).data();
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for i in 0..n * c {
            let src = &x[i * h * w..(i + 1) * h * w];
            let dst = &mut out[i * oh * ow..(i + 1) * oh * ow];
            for oy in 0..oh {
                let sy = reflect_index(oy as isize - pad as isize, h);
                for ox in 0..ow {
                    let sx = reflect_index(ox as isize - pad as isize, w);
                    dst[oy * ow + ox] = src[sy * w + sx];
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        self.push(
            "reflect_pad2d",
            value,
            Op::ReflectPad2d { input, pad },
            self.requires(input),
        )
    }

    /// Correlates every channel with the same fixed 2-d kernel (valid
    /// extent, no padding). The kernel is a constant: no gradient flows to
    /// it, only through the input.
    pub fn filter_depthwise(&mut self, input: Var, kernel: &Tensor<T>) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (kh, kw) = kernel.dims2()?;
        if h < kh || w < kw {
            return Err(Error::shape(
                "filter_depthwise",
                format!("input {}x{} smaller than kernel {}x{}", h, w, kh, kw),
            ));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let x = self.value(input).data();
        let k = kernel.data();
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for i in 0..n * c {
            let src = &x[i * h * w..(i + 1) * h * w];
            let dst = &mut out[i * oh * ow..(i + 1) * oh * ow];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = k[ky * kw + kx];
                    for oy in 0..oh {
                        let srow = &src[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        self.push(
            "filter_depthwise",
            value,
            Op::FilterDepthwise {
                input,
                kernel: kernel.clone(),
            },
            self.requires(input),
        )
    }

    /// Horizontal forward difference `out[y, x] = in[y, x+1] − in[y, x]`,
    /// zero in the last column.
    pub fn diff_h(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if w < 2 || h < 2 {
            return Err(Error::invalid(
                "diff_h",
                format!("spatial extents {}x{} must be at least 2", h, w),
            ));
        }
        let x = self.value(input).data();
        let mut out = vec![T::ZERO; x.len()];
        for i in 0..n * c {
            for y in 0..h {
                let row = i * h * w + y * w;
                for xx in 0..w - 1 {
                    out[row + xx] = x[row + xx + 1] - x[row + xx];
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        self.push("diff_h", value, Op::DiffH(input), self.requires(input))
    }

    /// Vertical forward difference; zero in the last row.
    pub fn diff_v(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if w < 2 || h < 2 {
            return Err(Error::invalid(
                "diff_v",
                format!("spatial extents {}x{} must be at least 2", h, w),
            ));
        }
        let x = self.value(input).data();
        let mut out = vec![T::ZERO; x.len()];
        for i in 0..n * c {
            for y in 0..h - 1 {
                let row = i * h * w + y * w;
                for xx in 0..w {
                    out[row + xx] = x[row + w + xx] - x[row + xx];
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        self.push("diff_v", value, Op::DiffV(input), self.requires(input))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let mut acc = T::ZERO;
        for &v in self.value(input).data() {
            acc += v;
        }
        self.push(
            "sum_all",
            Tensor::scalar(acc),
            Op::SumAll(input),
            self.requires(input),
        )
    }

    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        if n == 0 {
            return Err(Error::invalid(
                "mean_all",
                "cannot take the mean of an empty tensor",
            ));
        }
        let mut acc = T::ZERO;
        for &v in self.value(input).data() {
            acc += v;
        }
        let mean = acc / T::from_f64(n as f64);
        self.push(
            "mean_all",
            Tensor::scalar(mean),
            Op::MeanAll(input),
            self.requires(input),
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populates `d(loss)/d(node)` on every gradient-tracking node reachable
    /// from `loss`. `loss` must be a scalar produced by a recorded op. Can
    /// run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if matches!(node.op, Op::Leaf) {
            return Err(Error::DetachedGraph);
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let contributions = self.backward_step(i);
            for (target, contrib) in contributions {
                self.accumulate(target, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contrib: Vec<T>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[target.0];
        match node.grad.as_mut() {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(&contrib) {
                    *gv += *cv;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Computes the gradient contributions node `i` sends to its inputs.
    fn backward_step(&self, i: usize) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_deref().expect("caller checked grad presence");
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        let mut send = |this: &Self, v: Var, data: Vec<T>| {
            if this.requires(v) {
                out.push((v, data));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(self, *a, g.to_vec());
                send(self, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(self, *a, g.to_vec());
                send(self, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(self, *a, zip_map(g, bv, |gv, b| gv * b));
                send(self, *b, zip_map(g, av, |gv, a| gv * a));
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(self, *a, zip_map(g, bv, |gv, b| gv / b));
                if self.requires(*b) {
                    let mut db = vec![T::ZERO; bv.len()];
                    for k in 0..bv.len() {
                        db[k] = -g[k] * av[k] / (bv[k] * bv[k]);
                    }
                    send(self, *b, db);
                }
            }
            Op::AddScalar(a) => send(self, *a, g.to_vec()),
            Op::MulScalar(a, c) => send(self, *a, g.iter().map(|&v| v * *c).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(
                    self,
                    *a,
                    zip_map(g, x, |gv, xv| if xv > T::ZERO { gv } else { T::ZERO }),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(self, *a, zip_map(g, y, |gv, yv| gv * yv * (T::ONE - yv)));
            }
            Op::Abs(a) => {
                // Subgradient 0 at the origin.
                let x = self.value(*a).data();
                send(
                    self,
                    *a,
                    zip_map(g, x, |gv, xv| {
                        if xv > T::ZERO {
                            gv
                        } else if xv < T::ZERO {
                            -gv
                        } else {
                            T::ZERO
                        }
                    }),
                );
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::from_f64(2.0);
                send(self, *a, zip_map(g, x, |gv, xv| two * xv * gv));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                if self.requires(*input) {
                    send(
                        self,
                        *input,
                        conv2d_backward_input(x, w, g, *stride, *padding),
                    );
                }
                if self.requires(*weight) {
                    send(
                        self,
                        *weight,
                        conv2d_backward_weight(x, w, g, *stride, *padding),
                    );
                }
                if self.requires(*bias) {
                    let (n, _, h2, w2) = x.dims4().unwrap();
                    let (cout, _, kh, kw) = w.dims4().unwrap();
                    let oh = (h2 + 2 * padding - kh) / stride + 1;
                    let ow = (w2 + 2 * padding - kw) / stride + 1;
                    let mut db = vec![T::ZERO; cout];
                    for ni in 0..n {
                        for (co, dbv) in db.iter_mut().enumerate() {
                            let base = (ni * cout + co) * oh * ow;
                            let mut acc = T::ZERO;
                            for &gv in &g[base..base + oh * ow] {
                                acc += gv;
                            }
                            *dbv += acc;
                        }
                    }
                    send(self, *bias, db);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let (n, k) = self.value(*input).dims2().unwrap();
                let (m, _) = self.value(*weight).dims2().unwrap();
                if self.requires(*input) {
                    let mut dx = vec![T::ZERO; n * k];
                    for i2 in 0..n {
                        for j in 0..m {
                            let gv = g[i2 * m + j];
                            let wr = &w[j * k..(j + 1) * k];
                            for (dxv, &wv) in dx[i2 * k..(i2 + 1) * k].iter_mut().zip(wr) {
                                *dxv += gv * wv;
                            }
                        }
                    }
                    send(self, *input, dx);
                }
                if self.requires(*weight) {
                    let mut dw = vec![T::ZERO; m * k];
                    for i2 in 0..n {
                        let xr = &x[i2 * k..(i2 + 1) * k];
                        for j in 0..m {
                            let gv = g[i2 * m + j];
                            for (dwv, &xv) in dw[j * k..(j + 1) * k].iter_mut().zip(xr) {
                                *dwv += gv * xv;
                            }
                        }
                    }
                    send(self, *weight, dw);
                }
                if self.requires(*bias) {
                    let mut db = vec![T::ZERO; m];
                    for i2 in 0..n {
                        for j in 0..m {
                            db[j] += g[i2 * m + j];
                        }
                    }
                    send(self, *bias, db);
                }
            }
            Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = self.value(*a).dims4().unwrap();
                let plane = h * w;
                let inv = T::ONE / T::from_f64(plane as f64);
                let mut dx = vec![T::ZERO; n * c * plane];
                for i2 in 0..n * c {
                    let gv = g[i2] * inv;
                    for d in &mut dx[i2 * plane..(i2 + 1) * plane] {
                        *d += gv;
                    }
                }
                send(self, *a, dx);
            }
            Op::BroadcastMul { features, gate } => {
                let f = self.value(*features).data();
                let gv = self.value(*gate).data();
                let (n, c, h, w) = self.value(*features).dims4().unwrap();
                let plane = h * w;
                if self.requires(*features) {
                    let mut df = vec![T::ZERO; f.len()];
                    for i2 in 0..n * c {
                        let gate_v = gv[i2];
                        for (d, &gg) in df[i2 * plane..(i2 + 1) * plane]
                            .iter_mut()
                            .zip(&g[i2 * plane..(i2 + 1) * plane])
                        {
                            *d = gg * gate_v;
                        }
                    }
                    send(self, *features, df);
                }
                if self.requires(*gate) {
                    let mut dg = vec![T::ZERO; n * c];
                    for i2 in 0..n * c {
                        dg[i2] = dot(
                            &g[i2 * plane..(i2 + 1) * plane],
                            &f[i2 * plane..(i2 + 1) * plane],
                        );
                    }
                    send(self, *gate, dg);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().unwrap();
                let (_, cb, _, _) = self.value(*b).dims4().unwrap();
                let plane = h * w;
                if self.requires(*a) {
                    let mut da = vec![T::ZERO; n * ca * plane];
                    for n2 in 0..n {
                        let src = &g[n2 * (ca + cb) * plane..n2 * (ca + cb) * plane + ca * plane];
                        da[n2 * ca * plane..(n2 + 1) * ca * plane].copy_from_slice(src);
                    }
                    send(self, *a, da);
                }
                if self.requires(*b) {
                    let mut db = vec![T::ZERO; n * cb * plane];
                    for n2 in 0..n {
                        let src =
                            &g[n2 * (ca + cb) * plane + ca * plane..(n2 + 1) * (ca + cb) * plane];
                        db[n2 * cb * plane..(n2 + 1) * cb * plane].copy_from_slice(src);
                    }
                    send(self, *b, db);
                }
            }
            Op::UpsampleNearest2x(a) => {
                let (n, c, h, w) = self.value(*a).dims4().unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![T::ZERO; n * c * h * w];
                for i2 in 0..n * c {
                    let gp = &g[i2 * oh * ow..(i2 + 1) * oh * ow];
                    let dp = &mut dx[i2 * h * w..(i2 + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dp[(oy / 2) * w + ox / 2] += gp[oy * ow + ox];
                        }
                    }
                }
                send(self, *a, dx);
            }
            Op::MaxPool2x2(a) => {
                let (n, c, h, w) = self.value(*a).dims4().unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let x = self.value(*a).data();
                let mut dx = vec![T::ZERO; x.len()];
                for i2 in 0..n * c {
                    let src = &x[i2 * h * w..(i2 + 1) * h * w];
                    let gp = &g[i2 * oh * ow..(i2 + 1) * oh * ow];
                    let dp = &mut dx[i2 * h * w..(i2 + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            // Route to the first maximal element, scanning
                            // row-major; deterministic on ties.
                            let idx = [
                                (2 * oy) * w + 2 * ox,
                                (2 * oy) * w + 2 * ox + 1,
                                (2 * oy + 1) * w + 2 * ox,
                                (2 * oy + 1) * w + 2 * ox + 1,
                            ];
                            let mut best = idx[0];
                            for &cand in &idx[1..] {
                                if src[cand] > src[best] {
                                    best = cand;
                                }
                            }
                            dp[best] += gp[oy * ow + ox];
                        }
                    }
                }
                send(self, *a, dx);
            }
            Op::ReflectPad2d { input, pad } => {
                let (n, c, h, w) = self.value(*input).dims4().unwrap();
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![T::ZERO; n * c * h * w];
                for i2 in 0..n * c {
                    let gp = &g[i2 * oh * ow..(i2 + 1) * oh * ow];
                    let dp = &mut dx[i2 * h * w..(i2 + 1) * h * w];
                    for oy in 0..oh {
                        let sy = reflect_index(oy as isize - *pad as isize, h);
                        for ox in 0..ow {
                            let sx = reflect_index(ox as isize - *pad as isize, w);
                            dp[sy * w + sx] += gp[oy * ow + ox];
                        }
                    }
                }
                send(self, *input, dx);
            }
            Op::FilterDepthwise { input, kernel } => {
                let (n, c, h, w) = self.value(*input).dims4().unwrap();
                let (kh, kw) = kernel.dims2().unwrap();
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let k = kernel.data();
                let mut dx = vec![T::ZERO; n * c * h * w];
                for i2 in 0..n * c {
                    let gp = &g[i2 * oh * ow..(i2 + 1) * oh * ow];
                    let dp = &mut dx[i2 * h * w..(i2 + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = k[ky * kw + kx];
                            for oy in 0..oh {
                                let grow = &gp[oy * ow..(oy + 1) * ow];
                                let drow = &mut dp[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                                for (d, &gg) in drow.iter_mut().zip(grow) {
                                    *d += kv * gg;
                                }
                            }
                        }
                    }
                }
                send(self, *input, dx);
            }
            Op::DiffH(a) => {
                let (n, c, h, w) = self.value(*a).dims4().unwrap();
                let mut dx = vec![T::ZERO; n * c * h * w];
                for i2 in 0..n * c {
                    for y in 0..h {
                        let row = i2 * h * w + y * w;
                        for xx in 0..w - 1 {
                            let gv = g[row + xx];
                            dx[row + xx + 1] += gv;
                            dx[row + xx] -= gv;
                        }
                    }
                }
                send(self, *a, dx);
            }
            Op::DiffV(a) => {
                let (n, c, h, w) = self.value(*a).dims4().unwrap();
                let mut dx = vec![T::ZERO; n * c * h * w];
                for i2 in 0..n * c {
                    for y in 0..h - 1 {
                        let row = i2 * h * w + y * w;
                        for xx in 0..w {
                            let gv = g[row + xx];
                            dx[row + w + xx] += gv;
                            dx[row + xx] -= gv;
                        }
                    }
                }
                send(self, *a, dx);
            }
            Op::Reshape(a) => send(self, *a, g.to_vec()),
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                send(self, *a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let gv = g[0] / T::from_f64(n as f64);
                send(self, *a, vec![gv; n]);
            }
        }
        out
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes; the lane split is fixed, keeping results deterministic.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Valid output range along one axis for a given kernel offset, such that
/// `o·stride + k − padding` stays inside `[0, extent)`.
fn valid_range(
    out_extent: usize,
    extent: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let max_in = extent as isize - 1 + padding as isize - k as isize;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = ((max_in as usize) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, _, kh, kw) = w.dims4()?;
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(wd, kw, stride, padding);
    let xd = x.data();
    let wd_ = w.data();
    let bd = b.data();
    let mut out = vec![T::ZERO; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            let dst = &mut out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            dst.fill(bd[co]);
            for ci in 0..cin {
                let src = &xd[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                let ker = &wd_[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let srow = &src[iy * wd..(iy + 1) * wd];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for kx in 0..kw {
                            let kv = ker[ky * kw + kx];
                            let (ox_lo, ox_hi) = valid_range(ow, wd, kx, stride, padding);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let s = &srow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (d, &sv) in drow[ox_lo..ox_hi].iter_mut().zip(s) {
                                    *d += kv * sv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    drow[ox] += kv * srow[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, cout, oh, ow], out)
}

fn conv2d_backward_input<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(wd, kw, stride, padding);
    let wd_ = w.data();
    let mut dx = vec![T::ZERO; n * cin * h * wd];
    for ni in 0..n {
        for co in 0..cout {
            let gp = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let dst = &mut dx[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                let ker = &wd_[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let grow = &gp[oy * ow..(oy + 1) * ow];
                        let drow = &mut dst[iy * wd..(iy + 1) * wd];
                        for kx in 0..kw {
                            let kv = ker[ky * kw + kx];
                            let (ox_lo, ox_hi) = valid_range(ow, wd, kx, stride, padding);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                for (d, &gv) in drow[ix0..ix0 + (ox_hi - ox_lo)]
                                    .iter_mut()
                                    .zip(&grow[ox_lo..ox_hi])
                                {
                                    *d += kv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    drow[ox * stride + kx - padding] += kv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(wd, kw, stride, padding);
    let xd = x.data();
    let mut dw = vec![T::ZERO; cout * cin * kh * kw];
    for ni in 0..n {
        for co in 0..cout {
            let gp = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let src = &xd[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                let dker = &mut dw[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, padding);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(ow, wd, kx, stride, padding);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = T::ZERO;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let grow = &gp[oy * ow + ox_lo..oy * ow + ox_hi];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                acc +=
                                    dot(grow, &src[iy * wd + ix0..iy * wd + ix0 + (ox_hi - ox_lo)]);
                            } else {
                                let srow = &src[iy * wd..(iy + 1) * wd];
                                for (o, &gv) in (ox_lo..ox_hi).zip(grow) {
                                    acc += gv * srow[o * stride + kx - padding];
                                }
                            }
                        }
                        dker[ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}
