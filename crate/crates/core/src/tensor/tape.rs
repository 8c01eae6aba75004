use super::kernels::{col2im, im2col, Geometry};
use super::{Element, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    AvgPool2(Var),
    Add(Var, Var),
    Scale(Var, T),
    ConcatChannels(Var, Var),
    WeightedSum(Var, Vec<T>),
    BceWithLogits(Var, T),
    MseToConst(Var, T),
    L1(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, which is a topological order by construction.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Shape>,
    visited: usize,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Move a value out of the tape, leaving an empty placeholder.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape();
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, shape[1], 0, 0]))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant copy of `v`: same value, no gradient path back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn checked(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<(), TensorError> {
        if let Some(b) = b {
            let s = self.shape(b);
            if s != [1, channels, 1, 1] {
                return Err(shape_err(op, format!("bias {s:?}, expected [1, {channels}, 1, 1]")));
            }
        }
        Ok(())
    }

    /// Zero-padded cross-correlation. Output size is
    /// `floor((H + 2 pad - k) / stride) + 1`; trailing input rows/cols that
    /// do not fill a full window are ignored.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(w);
        if wcin != cin || k != k2 || k == 0 || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} vs weight {:?}, stride {stride}", self.shape(x), self.shape(w)),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd} (pad {pad})")));
        }
        self.check_bias("conv2d", b, cout)?;
        let g = Geometry {
            channels: cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let (rows, ncol) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); n * cout * ncol];
        let mut cols = vec![T::zero(); rows * ncol];
        for i in 0..n {
            im2col(&xs[i * cin * h * wd..(i + 1) * cin * h * wd], &g, &mut cols);
            let o = &mut out[i * cout * ncol..(i + 1) * cout * ncol];
            T::gemm(cout, rows, ncol, T::one(), ws, rows as isize, 1, &cols, ncol as isize, 1, T::zero(), o, ncol as isize, 1);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), cout, ncol);
        }
        let value = Tensor::from_vec([n, cout, g.ho, g.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.checked("conv2d", value, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    /// Transposed convolution; weight layout `[Cin, Cout, k, k]`.
    /// Output size is `(H - 1) stride - 2 pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let [n, cin, h, wd] = self.shape(x);
        let [wcin, cout, k, k2] = self.shape(w);
        if wcin != cin || k != k2 || k == 0 || stride == 0 || h == 0 || wd == 0 {
            return Err(shape_err(
                "conv_transpose2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        let ho = ((h - 1) * stride + k).checked_sub(2 * pad);
        let wo = ((wd - 1) * stride + k).checked_sub(2 * pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err("conv_transpose2d", format!("padding {pad} too large")));
        };
        if ho == 0 || wo == 0 {
            return Err(shape_err("conv_transpose2d", "empty output".into()));
        }
        self.check_bias("conv_transpose2d", b, cout)?;
        let g = Geometry {
            channels: cout,
            h: ho,
            w: wo,
            k,
            stride,
            pad,
            ho: h,
            wo: wd,
        };
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let (rows, ncol) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let mut cols = vec![T::zero(); rows * ncol];
        for i in 0..n {
            // cols = W^T x_i, W viewed as [Cin, Cout*k*k]
            let xi = &xs[i * cin * ncol..(i + 1) * cin * ncol];
            T::gemm(rows, cin, ncol, T::one(), ws, 1, rows as isize, xi, ncol as isize, 1, T::zero(), &mut cols, ncol as isize, 1);
            col2im(&cols, &g, &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), cout, ho * wo);
        }
        let value = Tensor::from_vec([n, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.checked("conv_transpose2d", value, Op::ConvTranspose2d { x, w, b, stride, pad }, &inputs)
    }

    /// Per-`(n, c)` standardization (population variance) then per-channel
    /// affine. `gain` and `bias` have shape `[1, C, 1, 1]`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != [1, c, 1, 1] {
                return Err(shape_err("instance_norm", format!("affine {:?} for {c} channels", self.shape(p))));
            }
        }
        let m = h * w;
        if m == 0 {
            return Err(shape_err("instance_norm", "empty spatial extent".into()));
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let mf = T::from_f64(m as f64);
        let epsf = T::from_f64(eps);
        let mut out = vec![T::zero(); xs.len()];
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for (s, plane) in xs.chunks_exact(m).enumerate() {
            let ch = s % c;
            let mean = plane.iter().copied().sum::<T>() / mf;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let inv = T::one() / (var + epsf).sqrt();
            inv_std[s] = inv;
            for (j, &v) in plane.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat[s * m + j] = xh;
                out[s * m + j] = gs[ch] * xh + bs[ch];
            }
        }
        let value = Tensor::from_vec([n, c, h, w], out)?;
        self.checked(
            "instance_norm",
            value,
            Op::InstanceNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.checked("relu", value, Op::Relu(x), &[x])
    }

    /// `x` for `x > 0`, `slope * x` otherwise (so the derivative at 0 is `slope`).
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, TensorError> {
        let s = T::from_f64(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { s * v });
        self.checked("leaky_relu", value, Op::LeakyRelu(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v.tanh());
        self.checked("tanh", value, Op::Tanh(x), &[x])
    }

    /// 2x2 mean pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddPool { h, w });
        }
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in xs.chunks_exact(h * w) {
            for r in 0..ho {
                let top = &plane[2 * r * w..(2 * r + 1) * w];
                let bot = &plane[(2 * r + 1) * w..(2 * r + 2) * w];
                for q in 0..wo {
                    out.push((top[2 * q] + top[2 * q + 1] + bot[2 * q] + bot[2 * q + 1]) * quarter);
                }
            }
        }
        let value = Tensor::from_vec([n, c, ho, wo], out)?;
        self.checked("avg_pool2", value, Op::AvgPool2(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        self.checked("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let cf = T::from_f64(c);
        let value = self.value(x).map(|v| v * cf);
        self.checked("scale", value, Op::Scale(x, cf), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err("concat_channels", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let m = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * m);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * m..(i + 1) * ca * m]);
            out.extend_from_slice(&db[i * cb * m..(i + 1) * cb * m]);
        }
        let value = Tensor::from_vec([n, ca + cb, h, w], out)?;
        self.checked("concat_channels", value, Op::ConcatChannels(a, b), &[a, b])
    }

    /// `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var, TensorError> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err("weighted_sum", format!("{:?} vs {:?}", self.shape(x), weights.shape())));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        self.checked("weighted_sum", Tensor::scalar(s), Op::WeightedSum(x, weights.data().to_vec()), &[x])
    }

    /// Mean binary cross-entropy against a constant target, in the stable
    /// form `max(z, 0) - t z + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Result<Var, TensorError> {
        let t = T::from_f64(target);
        let zs = self.value(x).data();
        let total: T = zs
            .iter()
            .map(|&z| z.max(T::zero()) - t * z + (-z.abs()).exp().ln_1p())
            .sum();
        let mean = total / T::from_f64(zs.len() as f64);
        self.checked("bce_with_logits", Tensor::scalar(mean), Op::BceWithLogits(x, t), &[x])
    }

    /// Mean squared distance to a constant.
    pub fn mse_to_const(&mut self, x: Var, target: f64) -> Result<Var, TensorError> {
        let t = T::from_f64(target);
        let zs = self.value(x).data();
        let mean = zs.iter().map(|&z| (z - t) * (z - t)).sum::<T>() / T::from_f64(zs.len() as f64);
        self.checked("mse_to_const", Tensor::scalar(mean), Op::MseToConst(x, t), &[x])
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("l1", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mean = da.iter().zip(db).map(|(&p, &q)| (p - q).abs()).sum::<T>() / T::from_f64(da.len() as f64);
        self.checked("l1", Tensor::scalar(mean), Op::L1(a, b), &[a, b])
    }

    /// Reverse sweep from a single-element `loss`. Each recorded node is
    /// visited at most once; nodes that do not require gradients are skipped.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::NotScalar { op: "backward", numel });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            visited += 1;
            self.backward_node(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            visited,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), TensorError> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let [n, cin, h, wd] = self.shape(x);
                let [cout, _, k, _] = self.shape(w);
                let [_, _, ho, wo] = node.value.shape();
                let g = Geometry {
                    channels: cin,
                    h,
                    w: wd,
                    k,
                    stride,
                    pad,
                    ho,
                    wo,
                };
                let (rows, ncol) = (g.rows(), g.cols());
                let xs = self.value(x).data();
                let ws = self.value(w).data();
                let mut cols = vec![T::zero(); rows * ncol];
                let mut dw = self.wants(w).then(|| vec![T::zero(); cout * rows]);
                let mut dx = self.wants(x).then(|| vec![T::zero(); xs.len()]);
                for i in 0..n {
                    let gyi = &gy[i * cout * ncol..(i + 1) * cout * ncol];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xs[i * cin * h * wd..(i + 1) * cin * h * wd], &g, &mut cols);
                        // dW += gy_i cols^T
                        T::gemm(cout, ncol, rows, T::one(), gyi, ncol as isize, 1, &cols, 1, ncol as isize, T::one(), dw, rows as isize, 1);
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols = W^T gy_i
                        T::gemm(rows, cout, ncol, T::one(), ws, 1, rows as isize, gyi, ncol as isize, 1, T::zero(), &mut cols, ncol as isize, 1);
                        col2im(&cols, &g, &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd]);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], dw);
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    accumulate(&mut grads[b.0], channel_sums(gy, n, cout, ncol));
                }
            }
            &Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let [n, cin, h, wd] = self.shape(x);
                let [_, cout, k, _] = self.shape(w);
                let [_, _, ho, wo] = node.value.shape();
                let g = Geometry {
                    channels: cout,
                    h: ho,
                    w: wo,
                    k,
                    stride,
                    pad,
                    ho: h,
                    wo: wd,
                };
                let (rows, ncol) = (g.rows(), g.cols());
                let xs = self.value(x).data();
                let ws = self.value(w).data();
                let mut cols = vec![T::zero(); rows * ncol];
                let mut dw = self.wants(w).then(|| vec![T::zero(); cin * rows]);
                let mut dx = self.wants(x).then(|| vec![T::zero(); xs.len()]);
                for i in 0..n {
                    im2col(&gy[i * cout * ho * wo..(i + 1) * cout * ho * wo], &g, &mut cols);
                    let xi = &xs[i * cin * ncol..(i + 1) * cin * ncol];
                    if let Some(dw) = dw.as_mut() {
                        // dW += x_i dcols^T
                        T::gemm(cin, ncol, rows, T::one(), xi, ncol as isize, 1, &cols, 1, ncol as isize, T::one(), dw, rows as isize, 1);
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dx_i = W dcols
                        let dxi = &mut dx[i * cin * ncol..(i + 1) * cin * ncol];
                        T::gemm(cin, rows, ncol, T::one(), ws, rows as isize, 1, &cols, ncol as isize, 1, T::zero(), dxi, ncol as isize, 1);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], dw);
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    accumulate(&mut grads[b.0], channel_sums(gy, n, cout, ho * wo));
                }
            }
            Op::InstanceNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = self.shape(*x);
                let m = h * w;
                let mf = T::from_f64(m as f64);
                let gs = self.value(*gain).data();
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut dx = self.wants(*x).then(|| vec![T::zero(); n * c * m]);
                for s in 0..n * c {
                    let ch = s % c;
                    let gys = &gy[s * m..(s + 1) * m];
                    let xh = &xhat[s * m..(s + 1) * m];
                    let sum_gy: T = gys.iter().copied().sum();
                    let sum_gy_xh: T = gys.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    dgain[ch] = dgain[ch] + sum_gy_xh;
                    dbias[ch] = dbias[ch] + sum_gy;
                    if let Some(dx) = dx.as_mut() {
                        // dxhat = gy * gain
                        let scale = gs[ch] * inv_std[s] / mf;
                        for j in 0..m {
                            dx[s * m + j] = scale * (mf * gys[j] - sum_gy - xh[j] * sum_gy_xh);
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*gain) {
                    accumulate(&mut grads[gain.0], dgain);
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], dbias);
                }
            }
            &Op::Relu(x) => {
                let xs = self.value(x).data();
                let d = gy.iter().zip(xs).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                accumulate(&mut grads[x.0], d);
            }
            &Op::LeakyRelu(x, s) => {
                let xs = self.value(x).data();
                let d = gy.iter().zip(xs).map(|(&g, &v)| if v > T::zero() { g } else { g * s }).collect();
                accumulate(&mut grads[x.0], d);
            }
            &Op::Tanh(x) => {
                let ys = node.value.data();
                let d = gy.iter().zip(ys).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                accumulate(&mut grads[x.0], d);
            }
            &Op::AvgPool2(x) => {
                let [n, c, h, w] = self.shape(x);
                let wo = w / 2;
                let quarter = T::from_f64(0.25);
                let mut d = vec![T::zero(); n * c * h * w];
                for (p, plane) in d.chunks_exact_mut(h * w).enumerate() {
                    let gp = &gy[p * (h / 2) * wo..(p + 1) * (h / 2) * wo];
                    for r in 0..h {
                        for q in 0..w {
                            plane[r * w + q] = gp[(r / 2) * wo + q / 2] * quarter;
                        }
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], gy.to_vec());
                }
            }
            &Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], gy.iter().map(|&g| g * c).collect());
            }
            &Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = self.shape(a);
                let cb = self.shape(b)[1];
                let m = h * w;
                let stride = (ca + cb) * m;
                if self.wants(a) {
                    let d = (0..n).flat_map(|i| gy[i * stride..i * stride + ca * m].iter().copied()).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if self.wants(b) {
                    let d = (0..n)
                        .flat_map(|i| gy[i * stride + ca * m..(i + 1) * stride].iter().copied())
                        .collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::WeightedSum(x, weights) => {
                let g = gy[0];
                accumulate(&mut grads[x.0], weights.iter().map(|&w| w * g).collect());
            }
            &Op::BceWithLogits(x, t) => {
                let zs = self.value(x).data();
                let k = gy[0] / T::from_f64(zs.len() as f64);
                let d = zs.iter().map(|&z| (sigmoid(z) - t) * k).collect();
                accumulate(&mut grads[x.0], d);
            }
            &Op::MseToConst(x, t) => {
                let zs = self.value(x).data();
                let k = gy[0] * T::from_f64(2.0 / zs.len() as f64);
                let d = zs.iter().map(|&z| (z - t) * k).collect();
                accumulate(&mut grads[x.0], d);
            }
            &Op::L1(a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let k = gy[0] / T::from_f64(da.len() as f64);
                let sign: Vec<T> = da
                    .iter()
                    .zip(db)
                    .map(|(&p, &q)| {
                        if p > q {
                            k
                        } else if p < q {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(b) {
                    accumulate(&mut grads[b.0], sign.iter().map(|&s| -s).collect());
                }
                if self.wants(a) {
                    accumulate(&mut grads[a.0], sign);
                }
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], channels: usize, plane: usize) {
    for (p, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let b = bias[p % channels];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn channel_sums<T: Element>(gy: &[T], n: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for p in 0..n * channels {
        let s: T = gy[p * plane..(p + 1) * plane].iter().copied().sum();
        out[p % channels] = out[p % channels] + s;
    }
    out
}
