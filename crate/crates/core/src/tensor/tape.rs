use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernels::{self, ConvGeometry};
use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    /// Non-overlapping max with stride equal to the window.
    Max { window: usize },
    GlobalAvg,
    GlobalMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub mode: Mode,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Train,
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    /// Output element `i` copies input element `index[i]` (max pooling).
    Gather { input: Var, index: Vec<usize> },
    GlobalAvg { input: Var, plane: usize },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu { input: Var },
    Sigmoid { input: Var },
    Identity { input: Var },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Dropout { input: Var, mask: Vec<T> },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
    ScaleChannels { x: Var, s: Var, plane: usize },
    Reshape { input: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Gather { .. } => "max_pool",
            Op::GlobalAvg { .. } => "global_avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Identity { .. } => "identity",
            Op::Dense { .. } => "dense",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "softmax_cross_entropy",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so the record is topologically
/// sorted by construction and `backward` is a single reverse sweep.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Rejects any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.grad.take()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        let mut value = Tensor::new(shape, data)?;
        if shape.is_empty() {
            value = Tensor::scalar(value.data()[0]);
        }
        value.requires_grad = requires_grad;
        if self.check_finite {
            value.check_finite(op.name())?;
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        let actual = self.shape(v).len();
        if actual != rank {
            return Err(Error::Dimension {
                op,
                axis: "rank",
                expected: rank,
                actual,
            });
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        params: Conv2dParams,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.shape(input),
            self.shape(kernel),
            params.stride,
            params.padding,
            params.groups,
        )?;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != geom.out_channels {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis: "bias length",
                    expected: geom.out_channels,
                    actual: bs.iter().product(),
                });
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.requires_grad(input)
            || self.requires_grad(kernel)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(
            &geom.output_shape(),
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        )
    }

    pub fn pool2d(&mut self, input: Var, pool: Pool) -> Result<Var> {
        self.expect_rank("pool2d", input, 4)?;
        let s = self.shape(input).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let rg = self.requires_grad(input);
        let x = self.value(input).data();
        match pool {
            Pool::Max { window } => {
                if window == 0 || window > h || window > w {
                    return Err(Error::geometry(format!(
                        "max pool window {window} exceeds {h}x{w} input"
                    )));
                }
                let (oh, ow) = (h / window, w / window);
                let mut out = Vec::with_capacity(n * c * oh * ow);
                let mut index = Vec::with_capacity(n * c * oh * ow);
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + oy * window * w + ox * window;
                            for dy in 0..window {
                                for dx in 0..window {
                                    let i = base + (oy * window + dy) * w + ox * window + dx;
                                    if x[i] > x[best] {
                                        best = i;
                                    }
                                }
                            }
                            out.push(x[best]);
                            index.push(best);
                        }
                    }
                }
                self.push(&[n, c, oh, ow], out, Op::Gather { input, index }, rg)
            }
            Pool::GlobalMax => {
                let plane = h * w;
                let mut out = Vec::with_capacity(n * c);
                let mut index = Vec::with_capacity(n * c);
                for p in 0..n * c {
                    let slice = &x[p * plane..][..plane];
                    let mut best = 0;
                    for (i, v) in slice.iter().enumerate() {
                        if *v > slice[best] {
                            best = i;
                        }
                    }
                    out.push(slice[best]);
                    index.push(p * plane + best);
                }
                self.push(&[n, c, 1, 1], out, Op::Gather { input, index }, rg)
            }
            Pool::GlobalAvg => {
                let plane = h * w;
                let scale = T::one() / T::of(plane as f64);
                let out: Vec<T> = x
                    .chunks_exact(plane)
                    .map(|p| kernels::sum(p) * scale)
                    .collect();
                self.push(&[n, c, 1, 1], out, Op::GlobalAvg { input, plane }, rg)
            }
        }
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats` as an exponential moving average; eval mode reads `stats`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        self.expect_rank("batch_norm", input, 4)?;
        if cfg.epsilon <= 0.0 {
            return Err(Error::validation("batch_norm epsilon must be positive"));
        }
        let s = self.shape(input).to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        for (v, axis) in [(gamma, "gamma length"), (beta, "beta length")] {
            let len = self.value(v).numel();
            if self.shape(v).len() != 1 || len != c {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    axis,
                    expected: c,
                    actual: len,
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dimension {
                op: "batch_norm",
                axis: "running stats length",
                expected: c,
                actual: stats.mean.len(),
            });
        }
        let count = n * plane;
        let eps = T::of(cfg.epsilon);
        let x = self.value(input).data();
        let batch_stats = cfg.mode == Mode::Train;
        let (mean, var): (Vec<T>, Vec<T>) = if batch_stats {
            let inv_count = T::one() / T::of(count as f64);
            let means: Vec<T> = kernels::channel_sums(x, n, c, plane)
                .into_iter()
                .map(|s| s * inv_count)
                .collect();
            let vars: Vec<T> = (0..c)
                .into_par_iter()
                .map(|ch| {
                    let mut acc = T::zero();
                    for b in 0..n {
                        for v in &x[(b * c + ch) * plane..][..plane] {
                            let d = *v - means[ch];
                            acc = acc + d * d;
                        }
                    }
                    acc * inv_count
                })
                .collect();
            (means, vars)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        xhat.par_chunks_mut(plane)
            .zip(out.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(idx, (xh, o))| {
                let ch = idx % c;
                let src = &x[idx * plane..][..plane];
                for ((xh, o), v) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
                    *xh = (*v - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *xh + bt[ch];
                }
            });
        if batch_stats {
            let m = T::of(cfg.momentum);
            let unbias = if count > 1 {
                T::of(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean[ch];
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * var[ch] * unbias;
            }
        }
        let rg = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(
            &s,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        let x = self.value(input).data();
        let (data, op) = match kind {
            Activation::Relu => (
                x.iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect(),
                Op::Relu { input },
            ),
            Activation::Sigmoid => (
                x.iter().map(|v| T::one() / (T::one() + (-*v).exp())).collect(),
                Op::Sigmoid { input },
            ),
            Activation::Identity => (x.to_vec(), Op::Identity { input }),
        };
        self.push(&shape, data, op, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// `input · weight + bias` for `input: [N, F]`, `weight: [F, K]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.expect_rank("dense", input, 2)?;
        self.expect_rank("dense", weight, 2)?;
        let (n, f) = (self.shape(input)[0], self.shape(input)[1]);
        let (wf, k) = (self.shape(weight)[0], self.shape(weight)[1]);
        if wf != f {
            return Err(Error::Dimension {
                op: "dense",
                axis: "inner features",
                expected: f,
                actual: wf,
            });
        }
        if let Some(b) = bias {
            let len = self.value(b).numel();
            if self.shape(b).len() != 1 || len != k {
                return Err(Error::Dimension {
                    op: "dense",
                    axis: "bias length",
                    expected: k,
                    actual: len,
                });
            }
        }
        let out = kernels::dense_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            f,
            k,
        );
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(&[n, k], out, Op::Dense { input, weight, bias }, rg)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 − rate)`.
    pub fn dropout(&mut self, input: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::validation(format!("dropout rate {rate} outside [0, 1)")));
        }
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        let x = self.value(input).data();
        if mode == Mode::Eval || rate == 0.0 {
            let data = x.to_vec();
            return self.push(&shape, data, Op::Identity { input }, rg);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = x.iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        self.push(&shape, data, Op::Dropout { input, mask }, rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.expect_rank("softmax_cross_entropy", logits, 2)?;
        let (n, k) = (self.shape(logits)[0], self.shape(logits)[1]);
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                axis: "batch",
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= k) {
            return Err(Error::validation(format!(
                "label {l} at position {i} is outside [0, {k})"
            )));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (row, (xr, pr)) in x.chunks_exact(k).zip(probs.chunks_exact_mut(k)).enumerate() {
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, v) in pr.iter_mut().zip(xr) {
                *p = (*v - max).exp();
                z = z + *p;
            }
            for p in pr.iter_mut() {
                *p = *p / z;
            }
            total = total + (max + z.ln() - xr[labels[row]]);
        }
        let loss = total / T::of(n as f64);
        let rg = self.requires_grad(logits);
        self.push(
            &[],
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::Dimension {
                op,
                axis: "rank",
                expected: sa.len(),
                actual: sb.len(),
            });
        }
        if let Some(i) = (0..sa.len()).find(|&i| sa[i] != sb[i]) {
            return Err(Error::Dimension {
                op,
                axis: ["axis 0", "axis 1", "axis 2", "axis 3"].get(i).copied().unwrap_or("axis ≥4"),
                expected: sa[i],
                actual: sb[i],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(&shape, data, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(&shape, data, Op::Mul { a, b }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = kernels::sum(self.value(input).data());
        let rg = self.requires_grad(input);
        self.push(&[], vec![total], Op::Sum { input }, rg)
    }

    /// Multiplies every `[H, W]` plane of `x: [N, C, H, W]` by `s[n, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        self.expect_rank("scale_channels", x, 4)?;
        self.expect_rank("scale_channels", s, 2)?;
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s);
        if ss[0] != xs[0] || ss[1] != xs[1] {
            return Err(Error::Dimension {
                op: "scale_channels",
                axis: if ss[0] != xs[0] { "batch" } else { "channels" },
                expected: if ss[0] != xs[0] { xs[0] } else { xs[1] },
                actual: if ss[0] != xs[0] { ss[0] } else { ss[1] },
            });
        }
        let plane = xs[2] * xs[3];
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .zip(sv)
            .flat_map(|(p, f)| p.iter().map(move |v| *v * *f))
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(s);
        self.push(&xs, data, Op::ScaleChannels { x, s, plane }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let have = self.value(input).numel();
        if numel != have {
            return Err(Error::Dimension {
                op: "reshape",
                axis: "element count",
                expected: have,
                actual: numel,
            });
        }
        let data = self.value(input).data().to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, Op::Reshape { input }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate into every recorded tensor with
    /// `requires_grad`; tensors outside the ancestry keep `grad == None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            for (target, contrib) in self.node_backward(i, &g) {
                if !self.requires_grad(target) {
                    continue;
                }
                match &mut pending[target.0] {
                    slot @ None => *slot = Some(contrib),
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a = *a + *c),
                }
            }
            let node = &mut self.nodes[i].value;
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a = *a + *c),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v).data();
        let wants = |v: Var| self.requires_grad(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                if wants(*input) {
                    out.push((*input, kernels::conv2d_backward_input(geom, g, val(*kernel))));
                }
                if wants(*kernel) {
                    out.push((*kernel, kernels::conv2d_backward_kernel(geom, g, val(*input))));
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let plane = geom.out_h * geom.out_w;
                    out.push((b, kernels::channel_sums(g, geom.batch, geom.out_channels, plane)));
                }
            }
            Op::Gather { input, index } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (gv, &j) in g.iter().zip(index) {
                    dx[j] = dx[j] + *gv;
                }
                out.push((*input, dx));
            }
            Op::GlobalAvg { input, plane } => {
                let scale = T::one() / T::of(*plane as f64);
                let dx = g
                    .iter()
                    .flat_map(|gv| std::iter::repeat_n(*gv * scale, *plane))
                    .collect();
                out.push((*input, dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*input);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let dbeta = kernels::channel_sums(g, n, c, plane);
                let dgamma = kernels::channel_dots(g, xhat, n, c, plane);
                if wants(*input) {
                    let gm = val(*gamma);
                    let count = T::of((n * plane) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    dx.par_chunks_mut(plane).enumerate().for_each(|(idx, d)| {
                        let ch = idx % c;
                        let gy = &g[idx * plane..][..plane];
                        let xh = &xhat[idx * plane..][..plane];
                        let k = gm[ch] * inv_std[ch];
                        if *batch_stats {
                            let (sb, sg) = (dbeta[ch] / count, dgamma[ch] / count);
                            for ((d, gv), xv) in d.iter_mut().zip(gy).zip(xh) {
                                *d = k * (*gv - sb - *xv * sg);
                            }
                        } else {
                            for (d, gv) in d.iter_mut().zip(gy) {
                                *d = k * *gv;
                            }
                        }
                    });
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu { input } => {
                let dx = g
                    .iter()
                    .zip(val(*input))
                    .map(|(gv, x)| if *x > T::zero() { *gv } else { T::zero() })
                    .collect();
                out.push((*input, dx));
            }
            Op::Sigmoid { input } => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, s)| *gv * *s * (T::one() - *s))
                    .collect();
                out.push((*input, dx));
            }
            Op::Identity { input } | Op::Reshape { input } => out.push((*input, g.to_vec())),
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (f, k) = (self.shape(*weight)[0], self.shape(*weight)[1]);
                let (dx, dw) = kernels::dense_backward(val(*input), val(*weight), g, f, k);
                out.push((*input, dx));
                out.push((*weight, dw));
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); k];
                    for row in g.chunks_exact(k) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d = *d + *v);
                    }
                    out.push((*b, db));
                }
            }
            Op::Dropout { input, mask } => {
                out.push((*input, g.iter().zip(mask).map(|(a, m)| *a * *m).collect()));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::of(n as f64);
                let mut dx: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    dx[row * k + l] = dx[row * k + l] - scale;
                }
                out.push((*logits, dx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                out.push((*a, g.iter().zip(val(*b)).map(|(x, y)| *x * *y).collect()));
                out.push((*b, g.iter().zip(val(*a)).map(|(x, y)| *x * *y).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![g[0]; self.value(*input).numel()]));
            }
            Op::ScaleChannels { x, s, plane } => {
                let sv = val(*s);
                let xv = val(*x);
                if wants(*x) {
                    let dx = g
                        .chunks_exact(*plane)
                        .zip(sv)
                        .flat_map(|(p, f)| p.iter().map(move |v| *v * *f))
                        .collect();
                    out.push((*x, dx));
                }
                let ds = g
                    .chunks_exact(*plane)
                    .zip(xv.chunks_exact(*plane))
                    .map(|(gp, xp)| kernels::dot(gp, xp))
                    .collect();
                out.push((*s, ds));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, k, None, Conv2dParams::default()).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_two_by_two_sum() {
        let mut tape = GradTape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, k, None, Conv2dParams::default()).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_stem_shape() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 256, 256]));
        let k = tape.constant(Tensor::zeros(&[32, 3, 3, 3]));
        let p = Conv2dParams {
            stride: 2,
            padding: 1,
            groups: 1,
        };
        let y = tape.conv2d(x, k, None, p).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 128, 128]);
    }

    #[test]
    fn conv_errors() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let err = tape.conv2d(x, k, None, Conv2dParams::default()).unwrap_err();
        assert!(err.to_string().contains("kernel input channels"), "{err}");

        let k = tape.constant(Tensor::zeros(&[4, 3, 5, 5]));
        let err = tape.conv2d(x, k, None, Conv2dParams::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidGeometry(_)));

        let k = tape.constant(Tensor::zeros(&[4, 1, 3, 3]));
        let grouped = Conv2dParams {
            groups: 2,
            ..Default::default()
        };
        assert!(tape.conv2d(x, k, None, grouped).is_err());
    }

    #[test]
    fn depthwise_conv_keeps_channels_separate() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 1, 1], &[3.0, 5.0]));
        let k = tape.constant(t(&[2, 1, 1, 1], &[2.0, 10.0]));
        let p = Conv2dParams {
            groups: 2,
            ..Default::default()
        };
        let y = tape.conv2d(x, k, None, p).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 50.0]);
    }

    #[test]
    fn pooling_examples() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.pool2d(x, Pool::Max { window: 2 }).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        assert!(tape.pool2d(x, Pool::Max { window: 3 }).is_err());

        let c = tape.constant(Tensor::full(&[1, 320, 8, 8], 0.25));
        let y = tape.pool2d(c, Pool::GlobalAvg).unwrap();
        assert_eq!(tape.shape(y), &[1, 320, 1, 1]);
        assert!(tape.value(y).data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = GradTape::<f64>::new();
        let cfg = BatchNormConfig {
            mode: Mode::Train,
            epsilon: 1e-5,
            momentum: 0.1,
        };
        let gamma = tape.constant(Tensor::ones(&[2]));
        let beta = tape.constant(Tensor::zeros(&[2]));

        let x = tape.constant(Tensor::full(&[2, 2, 3, 3], 7.0));
        let mut stats = RunningStats::new(2);
        let y = tape.batch_norm(x, gamma, beta, &mut stats, cfg).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        assert!((stats.mean[0] - 0.7).abs() < 1e-12);

        // mean 0, variance 1 per channel
        let x = tape.constant(t(&[2, 1, 1, 1], &[-1.0, 1.0]));
        let g1 = tape.constant(Tensor::ones(&[1]));
        let b1 = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let y = tape.batch_norm(x, g1, b1, &mut stats, cfg).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] + scale).abs() < 1e-12);

        let g0 = tape.constant(Tensor::zeros(&[1]));
        let b3 = tape.constant(Tensor::full(&[1], 3.0));
        let y = tape.batch_norm(x, g0, b3, &mut stats, cfg).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 3.0));

        let bad = tape.constant(Tensor::ones(&[3]));
        assert!(tape.batch_norm(x, bad, b1, &mut stats, cfg).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]).with_grad());
        let y = tape.relu(x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_examples() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.dense(x, eye, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(Tensor::zeros(&[1, 1280]));
        let w = tape.constant(Tensor::zeros(&[1280, 5]));
        let y = tape.dense(x, w, None).unwrap();
        assert_eq!(tape.shape(y), &[1, 5]);
        assert!(tape.dense(x, eye, None).is_err());
    }

    #[test]
    fn dropout_examples() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1000], 2.0));
        let y = tape.dropout(x, 0.4, Mode::Eval, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let y = tape.dropout(x, 0.0, Mode::Train, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        assert!(tape.dropout(x, 1.0, Mode::Train, 1).is_err());

        let ones = tape.constant(Tensor::ones(&[1_000_000]));
        let y = tape.dropout(ones, 0.4, Mode::Train, 42).unwrap();
        let kept = tape.value(y).data().iter().filter(|v| **v != 0.0).count();
        let density = kept as f64 / 1e6;
        assert!((0.599..=0.601).contains(&density), "{density}");
        let again = tape.dropout(ones, 0.4, Mode::Train, 42).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(again).data());
        let survivor = tape.value(y).data().iter().find(|v| **v != 0.0).unwrap();
        assert!((survivor - 1.0 / 0.6).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 5], 0.3));
        let l = tape.softmax_cross_entropy(x, &[2]).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);

        let x = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);

        let x = tape.constant(t(&[1, 2], &[800.0, 0.0]));
        let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-300);

        assert!(tape.softmax_cross_entropy(x, &[2]).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 1.5).with_grad());
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn tensors_outside_ancestry_have_no_grad() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let unused = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn fan_out_doubles_gradient() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]).with_grad());
        let w = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let x2 = tape.reshape(x, &[1, 3]).unwrap();
        let once = tape.dense(x2, w, None).unwrap();
        let l1 = tape.sum(once).unwrap();
        tape.backward(l1).unwrap();
        let single = tape.take_grad(x).unwrap();

        let twice = tape.add(once, once).unwrap();
        let l2 = tape.sum(twice).unwrap();
        tape.backward(l2).unwrap();
        let double = tape.grad(x).unwrap();
        for (s, d) in single.iter().zip(double) {
            assert_eq!(2.0 * s, *d);
        }
    }

    #[test]
    fn finite_checks_reject_overflow() {
        let mut tape = GradTape::<f32>::new().with_finite_checks(true);
        let x = tape.constant(Tensor::full(&[2], f32::MAX));
        assert!(matches!(tape.add(x, x), Err(Error::Numeric { .. })));
    }
}
