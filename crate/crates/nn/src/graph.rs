//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Graph`] lives for one forward/backward pass. Every operation appends a
//! node holding its output value; [`Graph::backward`] walks the tape in reverse
//! and returns the gradients of the leaves. Dropping the graph frees all
//! intermediate activations.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::kernels::{self, ConvGeometry};
use crate::param::{ParamId, Parameter};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    ChannelScale { x: Var, s: Var },
    GlobalAvgPool(Var),
    AvgPool { x: Var, k: usize },
    MatVec { w: Var, x: Var },
    Concat(Var, Var),
    Upsample { x: Var, factor: usize },
    PadReplicate { x: Var, pad: usize },
    Gather { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    BceWithLogits { z: Var, target: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    params_frozen: bool,
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding the current value of `p`. Repeated calls for the same
    /// parameter return the same node so gradients accumulate across uses.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if p.frozen || self.params_frozen {
            return self.input(p.value.clone());
        }
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.leaf(p.value.clone());
        self.params.insert(p.id(), v);
        v
    }

    /// While set, [`Graph::param`] inserts parameters as constants. Used to
    /// evaluate one network inside another network's objective.
    pub fn set_params_frozen(&mut self, frozen: bool) {
        self.params_frozen = frozen;
    }

    /// Copies the value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "{what}: operand shapes differ ({:?} vs {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn hwc(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        self.value(v).hwc().map_err(|_| {
            NnError::Shape(format!("{what}: expected [height, width, channels], got {:?}", self.shape(v)))
        })
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    /// 2-D convolution of an `[h, w, c_in]` input with `[k, k, c_in, c_out]`
    /// kernels and optional `[c_out]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (in_h, in_w, c_in) = self.hwc(x, "conv2d input")?;
        let (k, c_out) = match *self.shape(w) {
            [k1, k2, ci, co] if k1 == k2 => {
                if ci != c_in {
                    return Err(NnError::Shape(format!(
                        "conv2d: input channel axis has {c_in} channels but kernels expect {ci}"
                    )));
                }
                (k1, co)
            }
            ref s => {
                return Err(NnError::Shape(format!("conv2d: kernels must be [k, k, c_in, c_out], got {s:?}")))
            }
        };
        if k % 2 == 0 {
            return Err(NnError::InvalidArgument(format!("conv2d: kernel size {k} is not odd")));
        }
        if stride == 0 {
            return Err(NnError::InvalidArgument("conv2d: stride must be positive".into()));
        }
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(NnError::Shape(format!(
                "conv2d: spatial axes {in_h}x{in_w} too small for kernel {k} with padding {pad}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(NnError::Shape(format!(
                    "conv2d: bias must be [{c_out}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeometry { in_h, in_w, c_in, c_out, k, stride, pad };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[geom.out_h(), geom.out_w(), c_out], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_map(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_map(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_map(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// `max(x, slope * x)` for `slope` in (0, 1).
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Normalizes every channel of an `[h, w, c]` tensor to zero mean and unit
    /// variance over its spatial positions.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (h, w, c) = self.hwc(x, "instance_norm")?;
        let n = (h * w) as f64;
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        for px in xs.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for px in xs.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(xs.len());
        for px in xs.chunks_exact(c) {
            for ((v, m), is) in px.iter().zip(&mean).zip(&inv_std) {
                out.push((v - m) * is);
            }
        }
        let value = Tensor::new(&[h, w, c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, rg))
    }

    /// `x * gamma + beta` with per-channel `[c]` gamma and beta.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, _, c) = self.hwc(x, "channel_affine")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NnError::Shape(format!(
                "channel_affine: gamma/beta must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|px| px.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::ChannelAffine { x, gamma, beta }, rg))
    }

    /// Scales channel `k` of an `[h, w, c]` tensor by `s[k]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, _, c) = self.hwc(x, "channel_scale")?;
        if self.shape(s) != [c] {
            return Err(NnError::Shape(format!(
                "channel_scale: gate vector must be [{c}], got {:?}",
                self.shape(s)
            )));
        }
        let gates = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|px| px.iter().zip(gates).map(|(v, g)| v * g))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::ChannelScale { x, s }, rg))
    }

    /// Mean over spatial positions: `[h, w, c] -> [c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.hwc(x, "global_avg_pool")?;
        let mut out = vec![0.0; c];
        for px in self.value(x).data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = (h * w) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Non-overlapping `k x k` average pooling. Spatial axes must be divisible by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (h, w, c) = self.hwc(x, "avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(NnError::Shape(format!("avg_pool: {h}x{w} is not divisible by window {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let xs = self.value(x).data();
        let mut out = vec![0.0; oh * ow * c];
        let norm = 1.0 / (k * k) as f64;
        for y in 0..h {
            for xx in 0..w {
                let src = &xs[(y * w + xx) * c..][..c];
                let dst = &mut out[((y / k) * ow + xx / k) * c..][..c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * norm;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[oh, ow, c], out)?, Op::AvgPool { x, k }, rg))
    }

    /// Matrix-vector product of a row-major `[out, in]` matrix with an `[in]` vector.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (out, n) = match *self.shape(w) {
            [o, n] => (o, n),
            ref s => return Err(NnError::Shape(format!("matvec: matrix must be rank 2, got {s:?}"))),
        };
        if self.shape(x) != [n] {
            return Err(NnError::Shape(format!(
                "matvec: vector must be [{n}], got {:?}",
                self.shape(x)
            )));
        }
        let y = kernels::matvec(self.value(w).data(), self.value(x).data(), out);
        let rg = self.any_grad(&[w, x]);
        Ok(self.push(Tensor::new(&[out], y)?, Op::MatVec { w, x }, rg))
    }

    /// Concatenates two `[h, w, _]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ha, wa, ca) = self.hwc(a, "concat")?;
        let (hb, wb, cb) = self.hwc(b, "concat")?;
        if (ha, wa) != (hb, wb) {
            return Err(NnError::Shape(format!(
                "concat: spatial axes differ ({ha}x{wa} vs {hb}x{wb})"
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ha * wa * (ca + cb));
        for (pa, pb) in da.chunks_exact(ca).zip(db.chunks_exact(cb)) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[ha, wa, ca + cb], out)?, Op::Concat(a, b), rg))
    }

    /// Nearest-neighbour resize by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = self.hwc(x, "upsample")?;
        if factor == 0 {
            return Err(NnError::InvalidArgument("upsample: factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for xx in 0..ow {
                out.extend_from_slice(&xs[((y / factor) * w + xx / factor) * c..][..c]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[oh, ow, c], out)?, Op::Upsample { x, factor }, rg))
    }

    /// Pads the spatial axes by repeating edge pixels.
    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (h, w, c) = self.hwc(x, "pad_replicate")?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(ph * pw * c);
        for y in 0..ph {
            let sy = y.saturating_sub(pad).min(h - 1);
            for xx in 0..pw {
                let sx = xx.saturating_sub(pad).min(w - 1);
                out.extend_from_slice(&xs[(sy * w + sx) * c..][..c]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[ph, pw, c], out)?, Op::PadReplicate { x, pad }, rg))
    }

    /// Selects flat elements of `x` into a rank-1 tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.value(x).data();
        if idx.is_empty() {
            return Err(NnError::InvalidArgument("gather: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xs.len()) {
            return Err(NnError::Shape(format!("gather: index {bad} out of range for {} elements", xs.len())));
        }
        let out = idx.iter().map(|&i| xs[i]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[idx.len()], out)?, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy of logits `z` against a constant label,
    /// computed in logit space so it stays finite for any finite logit.
    pub fn bce_with_logits(&mut self, z: Var, target: f64) -> Var {
        let loss = self.value(z).data().iter().map(|&z| bce_logit(z, target)).sum::<f64>()
            / self.value(z).numel() as f64;
        let rg = self.any_grad(&[z]);
        self.push(Tensor::scalar(loss), Op::BceWithLogits { z, target }, rg)
    }

    /// Mean squared difference between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(NnError::Shape(format!(
                "backward: root must hold one element, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaves: HashMap<Var, Tensor> = HashMap::new();
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(Var(i), Tensor::new(node.value.shape(), gy)?);
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Grads { leaves, params: self.params.clone() })
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Vec<f64>| accumulate(grads, v, g);
        let y = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let want_b = b.is_some_and(wants);
                let cg = kernels::conv2d_backward(val(x), val(w), gy, &geom, wants(x), wants(w), want_b);
                if let Some(dx) = cg.dx {
                    acc(x, dx);
                }
                if let Some(dw) = cg.dw {
                    acc(w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    acc(a, gy.to_vec());
                }
                if wants(b) {
                    acc(b, gy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(a, gy.to_vec());
                }
                if wants(b) {
                    acc(b, gy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, gy.iter().zip(val(b)).map(|(g, v)| g * v).collect());
                }
                if wants(b) {
                    acc(b, gy.iter().zip(val(a)).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale(a, s) => acc(a, gy.iter().map(|g| g * s).collect()),
            Op::AddScalar(a) => acc(a, gy.to_vec()),
            Op::Square(a) => acc(a, gy.iter().zip(val(a)).map(|(g, x)| 2.0 * g * x).collect()),
            Op::LeakyRelu(a, slope) => {
                acc(a, gy.iter().zip(val(a)).map(|(g, &x)| if x > 0.0 { *g } else { g * slope }).collect())
            }
            Op::Relu(a) => acc(a, gy.iter().zip(val(a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()),
            Op::Sigmoid(a) => acc(a, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Tanh(a) => acc(a, gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
            Op::InstanceNorm { x, ref inv_std } => {
                let c = inv_std.len();
                let n = (y.len() / c) as f64;
                let mut mean_g = vec![0.0; c];
                let mut mean_gy = vec![0.0; c];
                for (gp, yp) in gy.chunks_exact(c).zip(y.chunks_exact(c)) {
                    for k in 0..c {
                        mean_g[k] += gp[k];
                        mean_gy[k] += gp[k] * yp[k];
                    }
                }
                mean_g.iter_mut().chain(mean_gy.iter_mut()).for_each(|m| *m /= n);
                let mut dx = Vec::with_capacity(y.len());
                for (gp, yp) in gy.chunks_exact(c).zip(y.chunks_exact(c)) {
                    for k in 0..c {
                        dx.push(inv_std[k] * (gp[k] - mean_g[k] - yp[k] * mean_gy[k]));
                    }
                }
                acc(x, dx);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let c = self.nodes[gamma.0].value.numel();
                if wants(x) {
                    let g = val(gamma);
                    acc(x, gy.chunks_exact(c).flat_map(|gp| gp.iter().zip(g).map(|(a, b)| a * b)).collect());
                }
                if wants(gamma) {
                    let mut dg = vec![0.0; c];
                    for (gp, xp) in gy.chunks_exact(c).zip(val(x).chunks_exact(c)) {
                        for k in 0..c {
                            dg[k] += gp[k] * xp[k];
                        }
                    }
                    acc(gamma, dg);
                }
                if wants(beta) {
                    acc(beta, channel_sums(gy, c));
                }
            }
            Op::ChannelScale { x, s } => {
                let c = self.nodes[s.0].value.numel();
                if wants(x) {
                    let sv = val(s);
                    acc(x, gy.chunks_exact(c).flat_map(|gp| gp.iter().zip(sv).map(|(a, b)| a * b)).collect());
                }
                if wants(s) {
                    let mut ds = vec![0.0; c];
                    for (gp, xp) in gy.chunks_exact(c).zip(val(x).chunks_exact(c)) {
                        for k in 0..c {
                            ds[k] += gp[k] * xp[k];
                        }
                    }
                    acc(s, ds);
                }
            }
            Op::GlobalAvgPool(x) => {
                let n = self.nodes[x.0].value.numel() / gy.len();
                let scaled: Vec<f64> = gy.iter().map(|g| g / n as f64).collect();
                acc(x, (0..n).flat_map(|_| scaled.iter().copied()).collect());
            }
            Op::AvgPool { x, k } => {
                let shape = self.nodes[x.0].value.shape();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let ow = w / k;
                let norm = 1.0 / (k * k) as f64;
                let mut dx = Vec::with_capacity(h * w * c);
                for yy in 0..h {
                    for xx in 0..w {
                        let src = &gy[((yy / k) * ow + xx / k) * c..][..c];
                        dx.extend(src.iter().map(|g| g * norm));
                    }
                }
                acc(x, dx);
            }
            Op::MatVec { w, x } => {
                let n = self.nodes[x.0].value.numel();
                if wants(w) {
                    let xs = val(x);
                    acc(w, gy.iter().flat_map(|g| xs.iter().map(move |v| g * v)).collect());
                }
                if wants(x) {
                    let ws = val(w);
                    let mut dx = vec![0.0; n];
                    for (o, g) in gy.iter().enumerate() {
                        for (d, wv) in dx.iter_mut().zip(&ws[o * n..(o + 1) * n]) {
                            *d += g * wv;
                        }
                    }
                    acc(x, dx);
                }
            }
            Op::Concat(a, b) => {
                let ca = self.nodes[a.0].value.shape()[2];
                let cb = self.nodes[b.0].value.shape()[2];
                let mut da = Vec::with_capacity(gy.len() / (ca + cb) * ca);
                let mut db = Vec::with_capacity(gy.len() / (ca + cb) * cb);
                for px in gy.chunks_exact(ca + cb) {
                    da.extend_from_slice(&px[..ca]);
                    db.extend_from_slice(&px[ca..]);
                }
                if wants(a) {
                    acc(a, da);
                }
                if wants(b) {
                    acc(b, db);
                }
            }
            Op::Upsample { x, factor } => {
                let shape = self.nodes[x.0].value.shape();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let ow = w * factor;
                let mut dx = vec![0.0; h * w * c];
                for yy in 0..h * factor {
                    for xx in 0..ow {
                        let src = &gy[(yy * ow + xx) * c..][..c];
                        let dst = &mut dx[((yy / factor) * w + xx / factor) * c..][..c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                acc(x, dx);
            }
            Op::PadReplicate { x, pad } => {
                let shape = self.nodes[x.0].value.shape();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let pw = w + 2 * pad;
                let mut dx = vec![0.0; h * w * c];
                for yy in 0..h + 2 * pad {
                    let sy = yy.saturating_sub(pad).min(h - 1);
                    for xx in 0..pw {
                        let sx = xx.saturating_sub(pad).min(w - 1);
                        let src = &gy[(yy * pw + xx) * c..][..c];
                        let dst = &mut dx[(sy * w + sx) * c..][..c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                acc(x, dx);
            }
            Op::Gather { x, ref idx } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (&i, g) in idx.iter().zip(gy) {
                    dx[i] += g;
                }
                acc(x, dx);
            }
            Op::Sum(x) => acc(x, vec![gy[0]; self.nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(x, vec![gy[0] / n as f64; n]);
            }
            Op::BceWithLogits { z, target } => {
                let n = self.nodes[z.0].value.numel() as f64;
                acc(z, val(z).iter().map(|&v| gy[0] * (sigmoid(v) - target) / n).collect());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

fn channel_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for px in g.chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-(t log sigmoid(z) + (1 - t) log(1 - sigmoid(z)))` without forming the probability.
pub fn bce_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// Gradients of leaves produced by [`Graph::backward`].
pub struct Grads {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    /// Gradient of a leaf, or `None` when no gradient reached it.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, p: &Parameter) -> Option<&Tensor> {
        self.params.get(&p.id()).and_then(|v| self.leaves.get(v))
    }

    /// Sum of squared gradient entries over the given parameters.
    pub fn sq_norm(&self, params: &[&Parameter]) -> f64 {
        params
            .iter()
            .filter_map(|p| self.param(p))
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2], vec![2.0, -1.0]).unwrap());
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[2.0, -0.2]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let p = Parameter::new("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(&p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn frozen_params_are_constants() {
        let p = Parameter::new("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        g.set_params_frozen(true);
        let a = g.param(&p);
        g.set_params_frozen(false);
        assert!(!g.requires_grad(a));
        let y = g.square(a);
        assert!(g.backward(y).unwrap().param(&p).is_none());
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_axis() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[4, 4, 3]));
        let w = g.input(Tensor::zeros(&[3, 3, 2, 1]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
    }

    #[test]
    fn conv_identity_1x1() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.7).reshape(&[1, 1, 1]).unwrap());
        let w = g.input(Tensor::scalar(1.0).reshape(&[1, 1, 1, 1]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.7]);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        assert!(bce_logit(1e3, 1.0).abs() < 1e-12);
        assert!((bce_logit(-1e3, 1.0) - 1e3).abs() < 1e-9);
        assert!((bce_logit(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
