//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node whose inputs already exist, so append order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. The graph is consumed by
//! `backward`; a second call is a state error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, b: Var, wa: f32, wb: f32 },
    Scale { x: Var, factor: f32 },
    Relu { x: Var },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<f32> },
    SpatialMean { x: Var, area: usize },
    SegmentMean { x: Var, segments: Vec<usize> },
    Reshape { x: Var },
    Sum { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    KdKl { student: Var, target: Vec<f32>, softened: Vec<f32>, tau: f32 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
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

    /// Registers a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `var`.
    pub fn grad(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::State("graph already consumed by backward".into()));
        }
        Ok(())
    }

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.tracks(a) || self.tracks(b);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Adds `bias` (shape `[C]`) to every length-C slice along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_open()?;
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.tracks(x) || self.tracks(bias);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        self.same_shape(a, b, "add")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        self.same_shape(a, b, "mul")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// `wa·a + wb·b`.
    pub fn affine(&mut self, a: Var, b: Var, wa: f32, wb: f32) -> Result<Var> {
        self.check_open()?;
        self.same_shape(a, b, "affine")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| wa * x + wb * y)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::Affine { a, b, wa, wb }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        self.check_open()?;
        let out: Vec<f32> = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.tracks(x);
        Ok(self.push(value, Op::Scale { x, factor }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let out: Vec<f32> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.tracks(x);
        Ok(self.push(value, Op::Relu { x }, rg))
    }

    /// Valid (unpadded) 2-D cross-correlation.
    ///
    /// `x` is `[C×H×W]` or batched `[N×C×H×W]`; `kernel` is `[O×C×kh×kw]`;
    /// optional `bias` is `[O]`. Output is `[O×H'×W']` (or `[N×O×H'×W']`)
    /// with `H' = (H − kh)/stride + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        self.check_open()?;
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batched, n, c, h, w) = match xs.as_slice() {
            [c, h, w] => (false, 1, *c, *h, *w),
            [n, c, h, w] => (true, *n, *c, *h, *w),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d input must be 3-D or 4-D, got {:?}",
                    xs
                )))
            }
        };
        let [o, kc, kh, kw] = ks.as_slice() else {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be 4-D, got {:?}",
                ks
            )));
        };
        let (o, kh, kw) = (*o, *kh, *kw);
        if *kc != c {
            return Err(Error::Dimension(format!(
                "conv2d kernel {:?} expects {} input channels, input {:?} has {}",
                ks, kc, xs, c
            )));
        }
        if kh > h || kw > w {
            return Err(Error::Dimension(format!(
                "conv2d kernel {:?} larger than input {:?}",
                ks, xs
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::Dimension(format!(
                    "conv2d bias {:?} for {} output channels",
                    self.shape(b),
                    o
                )));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let np = geom.n * geom.positions();
        let mut y = vec![0.0f32; o * np];
        gemm(
            o,
            geom.patch(),
            np,
            self.value(kernel).data(),
            false,
            &cols,
            false,
            &mut y,
            0.0,
        );
        let p = geom.positions();
        let mut out = vec![0.0f32; n * o * p];
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        for ni in 0..n {
            for oi in 0..o {
                let bv = bias_data.as_ref().map_or(0.0, |b| b[oi]);
                let src = &y[oi * np + ni * p..oi * np + (ni + 1) * p];
                let dst = &mut out[(ni * o + oi) * p..(ni * o + oi + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let shape: Vec<usize> = if batched {
            vec![n, o, geom.oh, geom.ow]
        } else {
            vec![o, geom.oh, geom.ow]
        };
        let value = Tensor::new(&shape, out)?;
        let rg = self.tracks(x) || self.tracks(kernel) || bias.is_some_and(|b| self.tracks(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Mean over the trailing spatial axes: `[N×C×H×W] -> [N×C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "spatial_mean expects [N×C×H×W], got {:?}",
                s
            )));
        }
        let area = s[2] * s[3];
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(area)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / area as f64) as f32)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        let rg = self.tracks(x);
        Ok(self.push(value, Op::SpatialMean { x, area }, rg))
    }

    /// Mean over consecutive row groups of a `[R×D]` tensor.
    ///
    /// `segments` lists group sizes (each ≥ 1) summing to R; output is `[S×D]`.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        self.check_open()?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "segment_mean expects [R×D], got {:?}",
                s
            )));
        }
        if segments.iter().any(|&len| len == 0) || segments.iter().sum::<usize>() != s[0] {
            return Err(Error::Contract(format!(
                "segments {:?} do not partition {} rows",
                segments, s[0]
            )));
        }
        let d = s[1];
        let data = self.value(x).data();
        let mut out = vec![0.0f32; segments.len() * d];
        let mut row = 0;
        for (si, &len) in segments.iter().enumerate() {
            let dst = &mut out[si * d..(si + 1) * d];
            for j in 0..d {
                let mut acc = 0.0f64;
                for r in row..row + len {
                    acc += data[r * d + j] as f64;
                }
                dst[j] = (acc / len as f64) as f32;
            }
            row += len;
        }
        let value = Tensor::new(&[segments.len(), d], out)?;
        let rg = self.tracks(x);
        Ok(self.push(
            value,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_open()?;
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.tracks(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.tracks(x);
        Ok(self.push(Tensor::scalar(total as f32), Op::Sum { x }, rg))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let c = last_dim(self.shape(x))?;
        let out = softmax_rows(self.value(x).data(), c, 1.0);
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.tracks(x);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let c = last_dim(self.shape(x))?;
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(c) {
            let lse = log_sum_exp(row, 1.0);
            out.extend(row.iter().map(|&v| (v as f64 - lse) as f32));
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.tracks(x);
        Ok(self.push(value, Op::LogSoftmax { x }, rg))
    }

    /// Mean cross-entropy of `[B×C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_open()?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy logits {:?} with {} labels",
                s,
                labels.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!(
                "label {} out of range for {} classes",
                bad, c
            )));
        }
        let data = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &label) in data.chunks(c).zip(labels) {
            total += log_sum_exp(row, 1.0) - row[label] as f64;
        }
        let probs = softmax_rows(data, c, 1.0);
        let value = Tensor::scalar((total / b as f64) as f32);
        let rg = self.tracks(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Temperature-softened KL divergence rescaled by `tau²`.
    ///
    /// Value is `tau² · mean_B Σ_c p_c (log p_c − log q_c)` with
    /// `p = softmax(teacher/tau)` and `q = softmax(student/tau)`. The teacher
    /// is a plain tensor, so no gradient flows to it.
    pub fn kd_kl(&mut self, teacher_logits: &Tensor, student: Var, tau: f32) -> Result<Var> {
        self.check_open()?;
        if !(tau > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
        }
        let s = self.shape(student).to_vec();
        if teacher_logits.shape() != s.as_slice() || s.len() != 2 {
            return Err(Error::Dimension(format!(
                "kd_kl teacher {:?} vs student {:?}",
                teacher_logits.shape(),
                s
            )));
        }
        let (b, c) = (s[0], s[1]);
        let sd = self.value(student).data();
        let td = teacher_logits.data();
        let mut total = 0.0f64;
        for (srow, trow) in sd.chunks(c).zip(td.chunks(c)) {
            let lse_t = log_sum_exp(trow, tau);
            let lse_s = log_sum_exp(srow, tau);
            for (&tv, &sv) in trow.iter().zip(srow) {
                let log_p = tv as f64 / tau as f64 - lse_t;
                let log_q = sv as f64 / tau as f64 - lse_s;
                let p = log_p.exp();
                if p > 0.0 {
                    total += p * (log_p - log_q);
                }
            }
        }
        let t2 = tau as f64 * tau as f64;
        let value = Tensor::scalar((t2 * total / b as f64).max(0.0) as f32);
        let target = softmax_rows(td, c, tau);
        let softened = softmax_rows(sd, c, tau);
        let rg = self.tracks(student);
        Ok(self.push(
            value,
            Op::KdKl {
                student,
                target,
                softened,
                tau,
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        // Saved activations are no longer needed.
        for node in &mut self.nodes {
            match &mut node.op {
                Op::Conv2d { cols, .. } => *cols = Vec::new(),
                Op::CrossEntropy { probs, .. } => *probs = Vec::new(),
                _ => {}
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let tracks = |v: Var| nodes[v.0].requires_grad;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if tracks(*a) {
                    let bv = nodes[b.0].value.data();
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, bv, true, ga, 1.0);
                }
                if tracks(*b) {
                    let av = nodes[a.0].value.data();
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, av, true, g, false, gb, 1.0);
                }
            }
            Op::AddBias { x, bias } => {
                if tracks(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if tracks(*bias) {
                    let c = nodes[bias.0].value.numel();
                    let gb = slot(grads, *bias, c);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if tracks(*v) {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if tracks(*a) {
                    let bv = nodes[b.0].value.data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if tracks(*b) {
                    let av = nodes[a.0].value.data();
                    let gb = slot(grads, *b, g.len());
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Affine { a, b, wa, wb } => {
                for (v, w) in [(a, *wa), (b, *wb)] {
                    if tracks(*v) {
                        let gv = slot(grads, *v, g.len());
                        for (d, gi) in gv.iter_mut().zip(g) {
                            *d += w * gi;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if tracks(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (d, gi) in gx.iter_mut().zip(g) {
                        *d += factor * gi;
                    }
                }
            }
            Op::Relu { x } => {
                if tracks(*x) {
                    let out = nodes[id].value.data();
                    let gx = slot(grads, *x, g.len());
                    for ((d, gi), o) in gx.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let p = geom.positions();
                let np = geom.n * p;
                let o = geom.o;
                // Regroup dY from [N×O×P] to [O×(N·P)] to match `cols`.
                let mut gy = vec![0.0f32; o * np];
                for ni in 0..geom.n {
                    for oi in 0..o {
                        let src = &g[(ni * o + oi) * p..(ni * o + oi + 1) * p];
                        gy[oi * np + ni * p..oi * np + (ni + 1) * p].copy_from_slice(src);
                    }
                }
                if let Some(b) = bias {
                    if tracks(*b) {
                        let gb = slot(grads, *b, o);
                        for (oi, d) in gb.iter_mut().enumerate() {
                            *d += gy[oi * np..(oi + 1) * np]
                                .iter()
                                .map(|&v| v as f64)
                                .sum::<f64>() as f32;
                        }
                    }
                }
                if tracks(*kernel) {
                    let gk = slot(grads, *kernel, o * geom.patch());
                    gemm(o, np, geom.patch(), &gy, false, cols, true, gk, 1.0);
                }
                if tracks(*x) {
                    let kv = nodes[kernel.0].value.data();
                    let mut gcols = vec![0.0f32; geom.patch() * np];
                    gemm(geom.patch(), o, np, kv, true, &gy, false, &mut gcols, 0.0);
                    let gx = slot(grads, *x, geom.n * geom.c * geom.h * geom.w);
                    col2im_add(&gcols, geom, gx);
                }
            }
            Op::SpatialMean { x, area } => {
                if tracks(*x) {
                    let inv = 1.0 / *area as f32;
                    let gx = slot(grads, *x, g.len() * area);
                    for (chunk, gi) in gx.chunks_mut(*area).zip(g) {
                        for d in chunk {
                            *d += gi * inv;
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if tracks(*x) {
                    let d = nodes[x.0].value.shape()[1];
                    let rows: usize = segments.iter().sum();
                    let gx = slot(grads, *x, rows * d);
                    let mut row = 0;
                    for (si, &len) in segments.iter().enumerate() {
                        let inv = 1.0 / len as f32;
                        let gs = &g[si * d..(si + 1) * d];
                        for r in row..row + len {
                            for (dst, gv) in gx[r * d..(r + 1) * d].iter_mut().zip(gs) {
                                *dst += gv * inv;
                            }
                        }
                        row += len;
                    }
                }
            }
            Op::Reshape { x } => {
                if tracks(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Sum { x } => {
                if tracks(*x) {
                    let n = nodes[x.0].value.numel();
                    let gx = slot(grads, *x, n);
                    for d in gx {
                        *d += g[0];
                    }
                }
            }
            Op::Softmax { x } => {
                if tracks(*x) {
                    let y = nodes[id].value.data();
                    let c = *nodes[id].value.shape().last().unwrap();
                    let gx = slot(grads, *x, g.len());
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        for ((d, yi), gi) in gxr.iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot as f32);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if tracks(*x) {
                    let y = nodes[id].value.data();
                    let c = *nodes[id].value.shape().last().unwrap();
                    let gx = slot(grads, *x, g.len());
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let total: f64 = gr.iter().map(|&v| v as f64).sum();
                        for ((d, yi), gi) in gxr.iter_mut().zip(yr).zip(gr) {
                            *d += gi - yi.exp() * total as f32;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if tracks(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as f32;
                    let gl = slot(grads, *logits, b * c);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::KdKl {
                student,
                target,
                softened,
                tau,
            } => {
                if tracks(*student) {
                    let s = nodes[student.0].value.shape();
                    let b = s[0];
                    // d/dz [tau² · (−Σ p log q)] = tau · (q − p), averaged over rows.
                    let scale = g[0] * tau / b as f32;
                    let gs = slot(grads, *student, softened.len());
                    for ((d, q), p) in gs.iter_mut().zip(softened).zip(target) {
                        *d += scale * (q - p);
                    }
                }
            }
        }
    }
}

fn last_dim(shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(Error::Dimension(format!(
            "operation needs a nonempty last axis, got {:?}",
            shape
        ))),
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], var: Var, len: usize) -> &'a mut [f32] {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `log Σ exp(x/tau)` in 64-bit.
pub(crate) fn log_sum_exp(row: &[f32], tau: f32) -> f64 {
    let t = tau as f64;
    let max = row
        .iter()
        .map(|&v| v as f64 / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| (v as f64 / t - max).exp()).sum();
    max + s.ln()
}

/// Row-wise softmax of `data / tau`, rows of length `c`.
pub(crate) fn softmax_rows(data: &[f32], c: usize, tau: f32) -> Vec<f32> {
    let t = tau as f64;
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(c) {
        let max = row
            .iter()
            .map(|&v| v as f64 / t)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 / t - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / s) as f32));
    }
    out
}

/// `C[m×n] = A[m×k]·B[k×n] + beta·C`.
///
/// With `a_t`, A is stored row-major as `[k×m]`; with `b_t`, B is stored as
/// `[n×k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix `[C·kh·kw × N·H'·W']`.
fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let p = g.positions();
    let np = g.n * p;
    let mut cols = vec![0.0f32; g.patch() * np];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[r * np..(r + 1) * np];
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[ni * p..(ni + 1) * p];
                    for oy in 0..g.oh {
                        let src_row = &plane[(oy * g.stride + ki) * g.w..];
                        for ox in 0..g.ow {
                            dst[oy * g.ow + ox] = src_row[ox * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f32], g: &ConvGeom, gx: &mut [f32]) {
    let p = g.positions();
    let np = g.n * p;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[r * np..(r + 1) * np];
                for ni in 0..g.n {
                    let base = (ni * g.c + ci) * g.h * g.w;
                    let src = &src_row[ni * p..(ni + 1) * p];
                    for oy in 0..g.oh {
                        let row_base = base + (oy * g.stride + ki) * g.w + kj;
                        for ox in 0..g.ow {
                            gx[row_base + ox * g.stride] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4., 5., 6.]);

        let z = g.constant(Tensor::zeros(&[2, 2]));
        let c = g.constant(t(&[2, 2], &[7., -1., 2., 9.]));
        let y = g.matmul(z, c).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_kernel_and_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, one, None, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

        let k = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let y = g.conv2d(x, k, None, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_kernel_larger_than_input_fails() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, None, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_known_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.constant(t(&[3], &[1., 2., 3.]));
        let y = g.softmax(x).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (v, e) in g.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[1., -2., 3., 0.5]).with_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_grad());
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]).with_grad());
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        assert!(g.relu(x).is_err());
    }

    #[test]
    fn cross_entropy_label_range_checked() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(g.cross_entropy(z, &[0, 4]), Err(Error::Contract(_))));
        let l = g.cross_entropy(z, &[0, 3]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn segment_mean_requires_partition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        assert!(g.segment_mean(x, &[1, 1]).is_err());
        assert!(g.segment_mean(x, &[3, 0]).is_err());
        let y = g.segment_mean(x, &[1, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 4., 5.]);
    }
}
