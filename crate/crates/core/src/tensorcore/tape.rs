use super::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{gemm, mat, mat_t};
use crate::spectral::{dct2_raw, idct2_raw};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool2d(Var, usize),
    GlobalAvgPool(Var),
    NormalizeChannels {
        x: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Dct2(Var),
    Idct2(Var),
    Reshape(Var),
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, in execution order, sufficient for one
/// reverse sweep. Every node's inputs precede it, so a reverse scan is a
/// valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Output length of a strided window sweep. Errors unless the padded extent
/// minus the kernel is an exact multiple of the stride.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit padded extent {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "extent {input} (pad {pad}) with kernel {kernel} is not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Maps each flat index of `out` to the flat index of a broadcast operand.
/// The operand shape is right-aligned against `out`; each of its dims must be
/// 1 or equal to the matching output dim.
struct Broadcast {
    out_shape: Vec<usize>,
    strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(out: &[usize], operand: &[usize]) -> Result<Self> {
        if operand.len() > out.len() {
            return Err(Error::Shape(format!("cannot broadcast {operand:?} into {out:?}")));
        }
        let offset = out.len() - operand.len();
        let mut strides = vec![0; out.len()];
        let mut acc = 1;
        for d in (0..operand.len()).rev() {
            let od = out[d + offset];
            let bd = operand[d];
            if bd == od {
                strides[d + offset] = if bd == 1 { 0 } else { acc };
            } else if bd != 1 {
                return Err(Error::Shape(format!("cannot broadcast {operand:?} into {out:?}")));
            }
            acc *= bd;
        }
        Ok(Self {
            out_shape: out.to_vec(),
            strides,
            same: out == operand,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.out_shape.iter().product();
        if self.same {
            for i in 0..total {
                f(i, i);
            }
            return;
        }
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let mut b = 0usize;
        for i in 0..total {
            f(i, b);
            for d in (0..rank).rev() {
                idx[d] += 1;
                b += self.strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                b -= self.strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::Shape(format!("{what} expects rank 4, got {s:?}"))),
    }
}

fn plane_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("{what} expects rank >= 2, got {s:?}")));
    }
    let h = s[s.len() - 2];
    let w = s[s.len() - 1];
    Ok((t.len() / (h * w).max(1), h, w))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Lowers one sample `[C,H,W]` into `[C·kh·kw, oh·ow]` patches.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.cols();
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if ii < 0 || ii >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &x[(ch * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, o) in out_row.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            *o = if jj < 0 || jj >= self.w as isize {
                                0.0
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto one sample `[C,H,W]`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.cols();
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(ch * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && (jj as usize) < self.w {
                                dst[jj as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

type PlaneKernel = fn(&[f64], usize, usize, &mut [f64]);

/// Applies a 2-D kernel to every trailing `H×W` plane of `v`.
fn planewise(v: &Tensor, what: &str, kernel: PlaneKernel) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(v, what)?;
    let mut out = vec![0.0; v.len()];
    for p in 0..planes {
        let r = p * h * w..(p + 1) * h * w;
        kernel(&v.data()[r.clone()], h, w, &mut out[r]);
    }
    Tensor::new(v.shape().to_vec(), out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` took part.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a + b`, with `b` broadcast into `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let bc = Broadcast::new(va.shape(), vb.shape())?;
        let mut out = va.data().to_vec();
        let bd = vb.data();
        bc.for_each(|i, j| out[i] += bd[j]);
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    /// `a ⊙ b`, with `b` broadcast into `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let bc = Broadcast::new(va.shape(), vb.shape())?;
        let mut out = va.data().to_vec();
        let bd = vb.data();
        bc.for_each(|i, j| out[i] *= bd[j]);
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&z| z.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&z| sigmoid(z)).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::Sigmoid(x), &[x], "sigmoid")
    }

    fn conv_geom(&self, x: Var, k: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let [n, c, h, w] = dims4(self.value(x), "conv2d input")?;
        let [f, kc, kh, kw] = dims4(self.value(k), "conv2d kernel")?;
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kc} channels, input has {c}"
            )));
        }
        let oh = conv_output_size(h, kh, stride, pad)?;
        let ow = conv_output_size(w, kw, stride, pad)?;
        Ok((
            n,
            f,
            ConvGeom {
                c,
                h,
                w,
                kh,
                kw,
                oh,
                ow,
                stride,
                pad,
            },
        ))
    }

    /// Zero-padded cross-correlation: `[N,C,H,W] ⋆ [F,C,kh,kw] → [N,F,H',W']`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, f, g) = self.conv_geom(x, k, stride, pad)?;
        let (rows, p) = (g.rows(), g.cols());
        let xin = self.value(x).data();
        let kd = self.value(k).data();
        let in_len = g.c * g.h * g.w;
        let mut out = vec![0.0; n * f * p];
        let mut cols = vec![0.0; rows * p];
        for s in 0..n {
            g.im2col(&xin[s * in_len..(s + 1) * in_len], &mut cols);
            gemm(
                f,
                rows,
                p,
                mat(kd),
                mat(&cols),
                0.0,
                &mut out[s * f * p..(s + 1) * f * p],
            );
        }
        let t = Tensor::new(vec![n, f, g.oh, g.ow], out)?;
        self.push(t, Op::Conv2d { x, k, stride, pad }, &[x, k], "conv2d")
    }

    /// Non-overlapping `size`x`size` mean pooling over the last two dims.
    pub fn avgpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "avgpool2d")?;
        let oh = conv_output_size(h, size, size, 0)?;
        let ow = conv_output_size(w, size, size, 0)?;
        let xd = self.value(x).data();
        let inv = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / size) * ow + j / size] += src[i * w + j];
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(t, Op::AvgPool2d(x, size), &[x], "avgpool2d")
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "global_avgpool")?;
        let hw = h * w;
        let out = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(vec![n, c], out)?;
        self.push(t, Op::GlobalAvgPool(x), &[x], "global_avgpool")
    }

    /// Per-channel standardization of `[N,C,H,W]` with statistics taken
    /// over batch and space (the normalizing half of batch norm).
    pub fn normalize_channels(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "normalize_channels")?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (k, plane) in xd.chunks_exact(hw).enumerate() {
            mean[k % c] += plane.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for (k, plane) in xd.chunks_exact(hw).enumerate() {
            let mu = mean[k % c];
            var[k % c] += plane.iter().map(|v| (v - mu).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xd.to_vec();
        for (k, plane) in out.chunks_exact_mut(hw).enumerate() {
            let (mu, is) = (mean[k % c], inv_std[k % c]);
            plane.iter_mut().for_each(|v| *v = (*v - mu) * is);
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let op = Op::NormalizeChannels { x, mean, var, inv_std };
        self.push(t, op, &[x], "normalize_channels")
    }

    /// Batch mean and (biased) variance per channel of a
    /// [`normalize_channels`](Self::normalize_channels) node.
    pub fn channel_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::NormalizeChannels { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// `x·Wᵀ + b` for `x: [N,D]`, `W: [O,D]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, d, o) = match (vx.shape(), vw.shape()) {
            ([n, d], [o, d2]) if d == d2 => (*n, *d, *o),
            (sx, sw) => return Err(Error::Shape(format!("linear: input {sx:?}, weight {sw:?}"))),
        };
        let mut out = vec![0.0; n * o];
        gemm(n, d, o, mat(vx.data()), mat_t(vw.data()), 0.0, &mut out);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [o] {
                return Err(Error::Shape(format!("linear bias {:?}, want [{o}]", vb.shape())));
            }
            for row in out.chunks_exact_mut(o) {
                row.iter_mut().zip(vb.data()).for_each(|(y, bb)| *y += bb);
            }
        }
        let t = Tensor::new(vec![n, o], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(t, Op::Linear { x, w, b }, &inputs, "linear")
    }

    /// Orthonormal 2-D DCT-II of every trailing `H×W` plane.
    pub fn dct2(&mut self, x: Var) -> Result<Var> {
        let t = planewise(self.value(x), "dct2", dct2_raw)?;
        self.push(t, Op::Dct2(x), &[x], "dct2")
    }

    /// Inverse of [`Tape::dct2`].
    pub fn idct2(&mut self, x: Var) -> Result<Var> {
        let t = planewise(self.value(x), "idct2", idct2_raw)?;
        self.push(t, Op::Idct2(x), &[x], "idct2")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x], "sum")
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class indices.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (n, k) = match *v.shape() {
            [n, k] => (n, k),
            ref s => return Err(Error::Shape(format!("softmax_xent logits {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in v.data().chunks_exact(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let t = Tensor::scalar(loss / n as f64);
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(t, op, &[logits], "softmax_xent")
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every node
    /// that depends on a `requires_grad` leaf. Previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g)?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of node {i}")));
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let gd = g.data();
        // ops only borrow their node; gradients for inputs are built first,
        // then accumulated, so the node table is never mutably aliased
        let mut pending: Vec<(Var, Tensor)> = Vec::with_capacity(2);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                let vb = self.value(*b);
                let mut gb = vec![0.0; vb.len()];
                Broadcast::new(g.shape(), vb.shape())?.for_each(|o, j| gb[j] += gd[o]);
                pending.push((*b, Tensor::new(vb.shape().to_vec(), gb)?));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let bc = Broadcast::new(va.shape(), vb.shape())?;
                let (ad, bd) = (va.data(), vb.data());
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                bc.for_each(|o, j| {
                    ga[o] = gd[o] * bd[j];
                    gb[j] += gd[o] * ad[o];
                });
                pending.push((*a, Tensor::new(va.shape().to_vec(), ga)?));
                pending.push((*b, Tensor::new(vb.shape().to_vec(), gb)?));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let gx = vx
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&z, &gg)| if z > 0.0 { gg } else { 0.0 })
                    .collect();
                pending.push((*x, Tensor::new(vx.shape().to_vec(), gx)?));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let gx = y.iter().zip(gd).map(|(&s, &gg)| gg * s * (1.0 - s)).collect();
                pending.push((*x, Tensor::new(g.shape().to_vec(), gx)?));
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (n, f, geo) = self.conv_geom(*x, *k, *stride, *pad)?;
                let (rows, p) = (geo.rows(), geo.cols());
                let (vx, vk) = (self.value(*x), self.value(*k));
                let in_len = geo.c * geo.h * geo.w;
                let mut gk = vec![0.0; vk.len()];
                let mut gx = vec![0.0; vx.len()];
                let mut cols = vec![0.0; rows * p];
                let mut dcols = vec![0.0; rows * p];
                for s in 0..n {
                    let go = &gd[s * f * p..(s + 1) * f * p];
                    geo.im2col(&vx.data()[s * in_len..(s + 1) * in_len], &mut cols);
                    gemm(f, p, rows, mat(go), mat_t(&cols), 1.0, &mut gk);
                    gemm(rows, f, p, mat_t(vk.data()), mat(go), 0.0, &mut dcols);
                    geo.col2im(&dcols, &mut gx[s * in_len..(s + 1) * in_len]);
                }
                pending.push((*x, Tensor::new(vx.shape().to_vec(), gx)?));
                pending.push((*k, Tensor::new(vk.shape().to_vec(), gk)?));
            }
            Op::AvgPool2d(x, size) => {
                let vx = self.value(*x);
                let [_, _, h, w] = dims4(vx, "avgpool2d")?;
                let (oh, ow) = (h / size, w / size);
                let inv = 1.0 / (size * size) as f64;
                let mut gx = vec![0.0; vx.len()];
                for (plane, dst) in gx.chunks_exact_mut(h * w).enumerate() {
                    let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                    for r in 0..h {
                        for c in 0..w {
                            dst[r * w + c] = src[(r / size) * ow + c / size] * inv;
                        }
                    }
                }
                pending.push((*x, Tensor::new(vx.shape().to_vec(), gx)?));
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let [_, _, h, w] = dims4(vx, "global_avgpool")?;
                let hw = h * w;
                let mut gx = vec![0.0; vx.len()];
                for (plane, dst) in gx.chunks_exact_mut(hw).enumerate() {
                    dst.fill(gd[plane] / hw as f64);
                }
                pending.push((*x, Tensor::new(vx.shape().to_vec(), gx)?));
            }
            Op::NormalizeChannels { x, inv_std, .. } => {
                let y = self.nodes[i].value.data();
                let [n, c, h, w] = dims4(g, "normalize_channels backward")?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gy = vec![0.0; c];
                for (k, (gp, yp)) in gd.chunks_exact(hw).zip(y.chunks_exact(hw)).enumerate() {
                    sum_g[k % c] += gp.iter().sum::<f64>();
                    sum_gy[k % c] += gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>();
                }
                let mut gx = vec![0.0; gd.len()];
                for (k, ((dst, gp), yp)) in gx
                    .chunks_exact_mut(hw)
                    .zip(gd.chunks_exact(hw))
                    .zip(y.chunks_exact(hw))
                    .enumerate()
                {
                    let ch = k % c;
                    let (a, b, is) = (sum_g[ch] / m, sum_gy[ch] / m, inv_std[ch]);
                    for ((d, gg), yy) in dst.iter_mut().zip(gp).zip(yp) {
                        *d = is * (gg - a - yy * b);
                    }
                }
                pending.push((*x, Tensor::new(g.shape().to_vec(), gx)?));
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, d) = (vx.shape()[0], vx.shape()[1]);
                let o = vw.shape()[0];
                let mut gx = vec![0.0; n * d];
                let mut gw = vec![0.0; o * d];
                gemm(n, o, d, mat(gd), mat(vw.data()), 0.0, &mut gx);
                gemm(o, n, d, mat_t(gd), mat(vx.data()), 0.0, &mut gw);
                pending.push((*x, Tensor::new(vx.shape().to_vec(), gx)?));
                pending.push((*w, Tensor::new(vw.shape().to_vec(), gw)?));
                if let Some(b) = b {
                    let mut gb = vec![0.0; o];
                    for row in gd.chunks_exact(o) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    pending.push((*b, Tensor::new(vec![o], gb)?));
                }
            }
            // the transforms are orthonormal, so each one's adjoint is the other
            Op::Dct2(x) => pending.push((*x, planewise(g, "dct2 backward", idct2_raw)?)),
            Op::Idct2(x) => pending.push((*x, planewise(g, "idct2 backward", dct2_raw)?)),
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                pending.push((*x, g.reshaped(shape)?));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                pending.push((*x, Tensor::full(shape, gd[0])));
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let shape = self.value(*logits).shape().to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = gd[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * k + l] -= scale;
                }
                pending.push((*logits, Tensor::new(shape, gl)?));
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [n, c, h, w] = dims4(x, "x").unwrap();
        let [f, _, kh, kw] = dims4(k, "k").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for s in 0..n {
            for o in 0..f {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let ii = (i * stride + a) as isize - pad as isize;
                                    let jj = (j * stride + b) as isize - pad as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * c + ch) * h + ii as usize) * w + jj as usize]
                                        * k.data()[((o * c + ch) * kh + a) * kw + b];
                                }
                            }
                        }
                        out[((s * f + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, f, oh, ow], out).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn conv_all_ones() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let k = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let xv = rand_tensor(&[2, 1, 4, 5], &mut rng);
        let x = t.constant(xv.clone());
        let k = t.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y), &xv);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let kv = rand_tensor(&[3, 2, 3, 3], &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let k = t.constant(kv.clone());
            let y = t.conv2d(x, k, stride, pad).unwrap();
            let want = conv_oracle(&xv, &kv, stride, pad);
            assert_eq!(t.value(y).shape(), want.shape());
            assert!(close(t.value(y).data(), want.data(), 1e-12));
        }
    }

    #[test]
    fn conv_geometry_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let k = t.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(matches!(t.conv2d(x, k, 2, 0), Err(Error::Shape(_))));
        let big = t.constant(Tensor::zeros(vec![1, 1, 7, 7]));
        assert!(matches!(t.conv2d(x, big, 1, 1), Err(Error::Shape(_))));
        let wrong_c = t.constant(Tensor::zeros(vec![1, 2, 1, 1]));
        assert!(t.conv2d(x, wrong_c, 1, 0).is_err());
        assert_eq!(conv_output_size(45, 3, 2, 1).unwrap(), 23);
        assert_eq!(conv_output_size(12, 4, 2, 1).unwrap(), 6);
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![5], vec![0.0, -1.0, 2.0, 1000.0, -1000.0]).unwrap());
        let s = t.sigmoid(x).unwrap();
        let r = t.relu(x).unwrap();
        let sv = t.value(s).data().to_vec();
        assert_eq!(sv[0], 0.5);
        assert!(sv.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!((sv[3] - 1.0).abs() < 1e-15 && sv[4] < 1e-300);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0, 1000.0, 0.0]);
    }

    #[test]
    fn broadcast_rules() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(vec![2, 3, 2, 2], 1.0));
        let b = t.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.add(a, b).unwrap();
        assert_eq!(&t.value(y).data()[..4], &[2.0; 4]);
        assert_eq!(&t.value(y).data()[8..12], &[4.0; 4]);
        let s = t.constant(Tensor::scalar(2.0));
        let z = t.mul(a, s).unwrap();
        assert!(t.value(z).data().iter().all(|&v| v == 2.0));
        let bad = t.constant(Tensor::zeros(vec![2, 2, 2, 2]));
        assert!(matches!(t.add(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_linear_xent() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(vec![1, 2, 4, 4], 0.7));
        let g = t.global_avgpool(c).unwrap();
        assert!(close(t.value(g).data(), &[0.7, 0.7], 1e-15));
        let p = t.avgpool2d(c, 2).unwrap();
        assert_eq!(t.value(p).shape(), &[1, 2, 2, 2]);
        assert!(matches!(t.avgpool2d(c, 3), Err(Error::Shape(_))));

        let x = t.constant(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 4.0]).unwrap());
        let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = t.constant(Tensor::zeros(vec![2]));
        let y = t.linear(x, eye, Some(zb)).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());

        let logits = t.constant(Tensor::zeros(vec![1, 2]));
        let l = t.softmax_xent(logits, &[0]).unwrap();
        assert!((t.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(t.softmax_xent(logits, &[2]), Err(Error::InvalidArgument(_))));
        let huge = t.constant(Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap());
        let l = t.softmax_xent(huge, &[1]).unwrap();
        assert!((t.value(l).item().unwrap() - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv = rand_tensor(&[3, 4], &mut rng);
        let mut t = Tape::new();
        let x = t.param(xv.clone());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

        let mut t = Tape::new();
        let x = t.param(xv.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        let want: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad(x).unwrap().data(), &want[..]);

        assert!(matches!(t.backward(sq), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dct_layers_share_kernel_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rand_tensor(&[6, 7], &mut rng);
        let mut t = Tape::new();
        let x = t.param(xv.clone());
        let d = t.dct2(x).unwrap();
        let plane = crate::plane::Plane::new(6, 7, xv.data().to_vec()).unwrap();
        let direct = crate::spectral::dct2(&plane).unwrap();
        assert_eq!(t.value(d).data(), direct.coeffs().as_slice());
        let back = t.idct2(d).unwrap();
        assert!(close(t.value(back).data(), xv.data(), 1e-9));

        let s = t.sum(d).unwrap();
        t.backward(s).unwrap();
        let ones = crate::spectral::Spectrum::from_coeffs(crate::plane::Plane::filled(6, 7, 1.0)).unwrap();
        let want = crate::spectral::idct2(&ones).unwrap();
        assert!(close(t.grad(x).unwrap().data(), want.as_slice(), 1e-9));
    }

    #[test]
    fn normalize_channels_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv = rand_tensor(&[3, 2, 4, 5], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let y = t.normalize_channels(x, 0.0).unwrap();
        let (mean, var) = t.channel_stats(y).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|s| xv.data()[(s * 2 + ch) * 20..(s * 2 + ch + 1) * 20].to_vec())
                .collect();
            let mu = vals.iter().sum::<f64>() / 60.0;
            let v = vals.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / 60.0;
            assert!((mean[ch] - mu).abs() < 1e-12 && (var[ch] - v).abs() < 1e-12);
            let ys: Vec<f64> = (0..3)
                .flat_map(|s| t.value(y).data()[(s * 2 + ch) * 20..(s * 2 + ch + 1) * 20].to_vec())
                .collect();
            let ym = ys.iter().sum::<f64>() / 60.0;
            let yv = ys.iter().map(|a| (a - ym).powi(2)).sum::<f64>() / 60.0;
            assert!(ym.abs() < 1e-12 && (yv - 1.0).abs() < 1e-9);
        }
        assert!(t.channel_stats(x).is_none());
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(vec![2], 1e300));
        assert!(matches!(t.mul(x, x), Err(Error::NonFinite(_))));
    }

    /// Builds `loss = Σ wᵢ · op(inputs)ᵢ` with a fixed random projection so
    /// every output element contributes to the gradient.
    fn check_op(
        seed: u64,
        shapes: &[Vec<usize>],
        op: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> std::result::Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let eval = |ins: &[Tensor], proj: Option<&Tensor>| -> (f64, Tape, Vec<Var>, Tensor) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
            let y = op(&mut t, &vars).unwrap();
            let shape = t.value(y).shape().to_vec();
            let p = match proj {
                Some(p) => p.clone(),
                None => {
                    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                    rand_tensor(&shape, &mut r)
                }
            };
            let pv = t.constant(p.clone());
            let prod = t.mul(y, pv).unwrap();
            let loss = t.sum(prod).unwrap();
            (t.value(loss).item().unwrap(), t, vars, p)
        };
        let (_, mut tape, vars, proj) = eval(&inputs, None);
        let loss_var = Var(tape.len() - 1);
        tape.backward(loss_var).unwrap();
        let h = 1e-5;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[vi]).unwrap().data().to_vec();
            for (e, &a) in analytic.iter().enumerate().take(input.len()) {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[e] -= h;
                let fd = (eval(&plus, Some(&proj)).0 - eval(&minus, Some(&proj)).0) / (2.0 * h);
                let err = (a - fd).abs();
                if err > 1e-7 && err / a.abs().max(fd.abs()) > 1e-4 {
                    return Err(format!("input {vi} elem {e}: analytic {a} vs fd {fd}"));
                }
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn grad_conv(seed in any::<u64>(), stride in 1usize..=2) {
            let r = check_op(seed, &[vec![2, 2, 5, 5], vec![3, 2, 3, 3]], &|t, v| t.conv2d(v[0], v[1], stride, 1));
            prop_assert!(r.is_ok(), "{:?}", r);
        }

        #[test]
        fn grad_elementwise(seed in any::<u64>()) {
            let r = check_op(seed, &[vec![2, 3, 4], vec![3, 1]], &|t, v| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(a, v[1])?;
                let s = t.sigmoid(m)?;
                let q = t.mul(s, a)?;
                t.relu(q)
            });
            prop_assert!(r.is_ok(), "{:?}", r);
        }

        #[test]
        fn grad_pool_linear_xent(seed in any::<u64>()) {
            let r = check_op(seed, &[vec![2, 3, 4, 4], vec![2, 3], vec![2]], &|t, v| {
                let p = t.avgpool2d(v[0], 2)?;
                let g = t.global_avgpool(p)?;
                let l = t.linear(g, v[1], Some(v[2]))?;
                let xe = t.softmax_xent(l, &[0, 1])?;
                let two = t.constant(Tensor::scalar(1.0));
                t.mul(xe, two)
            });
            prop_assert!(r.is_ok(), "{:?}", r);
        }

        #[test]
        fn grad_normalize_channels(seed in any::<u64>()) {
            let r = check_op(seed, &[vec![3, 2, 3, 4], vec![2, 1, 1]], &|t, v| {
                let y = t.normalize_channels(v[0], 1e-5)?;
                t.mul(y, v[1])
            });
            prop_assert!(r.is_ok(), "{:?}", r);
        }

        #[test]
        fn grad_spectral(seed in any::<u64>()) {
            let r = check_op(seed, &[vec![2, 1, 5, 6], vec![5, 6]], &|t, v| {
                let d = t.dct2(v[0])?;
                let m = t.mul(d, v[1])?;
                let i = t.idct2(m)?;
                let r = t.reshape(i, &[2, 30])?;
                t.sigmoid(r)
            });
            prop_assert!(r.is_ok(), "{:?}", r);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut t = Tape::new();
            let x = t.param(rand_tensor(&[2, 2, 6, 6], &mut rng));
            let k = t.param(rand_tensor(&[3, 2, 3, 3], &mut rng));
            let y = t.conv2d(x, k, 1, 1).unwrap();
            let r = t.relu(y).unwrap();
            let s = t.sum(r).unwrap();
            t.backward(s).unwrap();
            (t.grad(x).unwrap().clone(), t.grad(k).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
