use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::plan::{DescribeRow, StagePlan};
use crate::error::{Error, Result};
use crate::tensor::{
    BatchNormConfig, Conv2dParams, GradTape, Mode, Pool, RunningStats, Scalar, Tensor, Var,
};

/// Global pooling applied before the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadPool {
    #[default]
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// Squeeze-excite width as a fraction of block input channels; 0 disables it.
    pub se_ratio: f64,
    pub dropout: f64,
    pub head_pool: HeadPool,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            se_ratio: 0.25,
            dropout: 0.4,
            head_pool: HeadPool::Avg,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes must be ≥ 2"));
        }
        if !(0.0..=1.0).contains(&self.se_ratio) {
            return Err(Error::validation("se_ratio must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout must lie in [0, 1)"));
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::validation("batch norm epsilon must be > 0 and momentum in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Running batch-norm statistics registered under `name` (the layer prefix).
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
    conv: Conv2dParams,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct SqueezeExcite {
    reduce: DenseLayer,
    expand: DenseLayer,
}

/// Inverted-residual block: optional 1×1 expansion, depthwise conv,
/// squeeze-excite, linear 1×1 projection, identity shortcut when shapes allow.
#[derive(Debug, Clone)]
pub struct MbConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: Option<SqueezeExcite>,
    project: ConvBn,
}

struct Builder<'a, T> {
    params: &'a mut Vec<Param<T>>,
    buffers: &'a mut Vec<Buffer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }

    /// Normal(0, 2/fan_in) truncated at two standard deviations.
    fn fan_in(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.truncated_normal() * std))
            .collect();
        let t = Tensor::new(shape, data).expect("shape and data agree");
        self.push(name, t)
    }

    /// `|z| / fan_in` with `z` standard normal truncated at 2, so each output
    /// starts as a positive weighted average of its inputs.
    fn half_normal(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.truncated_normal().abs() / fan_in as f64))
            .collect();
        let t = Tensor::new(shape, data).expect("shape and data agree");
        self.push(name, t)
    }

    fn truncated_normal(&mut self) -> f64 {
        loop {
            let z: f64 = self.rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                return z;
            }
        }
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize, conv: Conv2dParams) -> ConvBn {
        let cin_pg = cin / conv.groups;
        let weight = self.fan_in(
            format!("{prefix}.conv.weight"),
            &[cout, cin_pg, kernel, kernel],
            cin_pg * kernel * kernel,
        );
        let gamma = self.push(format!("{prefix}.bn.weight"), Tensor::ones(&[cout]));
        let beta = self.push(format!("{prefix}.bn.bias"), Tensor::zeros(&[cout]));
        self.buffers.push(Buffer {
            name: format!("{prefix}.bn"),
            stats: RunningStats::new(cout),
        });
        ConvBn {
            weight,
            gamma,
            beta,
            stats: self.buffers.len() - 1,
            conv,
        }
    }

    fn dense(&mut self, prefix: &str, fin: usize, fout: usize) -> DenseLayer {
        let weight = self.fan_in(format!("{prefix}.weight"), &[fin, fout], fin);
        let bias = self.push(format!("{prefix}.bias"), Tensor::zeros(&[fout]));
        DenseLayer { weight, bias }
    }
}

/// Tape handles for one forward pass.
struct Ctx<'a, T> {
    tape: &'a mut GradTape<T>,
    vars: &'a [Var],
    buffers: &'a mut [Buffer<T>],
    bn: BatchNormConfig,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv_bn(&mut self, layer: &ConvBn, x: Var, relu: bool) -> Result<Var> {
        let y = self.tape.conv2d(x, self.vars[layer.weight], None, layer.conv)?;
        let stats = &mut self.buffers[layer.stats].stats;
        let y = self
            .tape
            .batch_norm(y, self.vars[layer.gamma], self.vars[layer.beta], stats, self.bn)?;
        if relu {
            self.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    fn dense(&mut self, layer: &DenseLayer, x: Var) -> Result<Var> {
        self.tape
            .dense(x, self.vars[layer.weight], Some(self.vars[layer.bias]))
    }
}

impl MbConvBlock {
    fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        prefix: &str,
        shape: (usize, usize, usize, usize),
        stride: usize,
        se_ratio: f64,
    ) -> MbConvBlock {
        let (cin, cout, expansion, kernel) = shape;
        let hidden = cin * expansion;
        let expand = (expansion != 1).then(|| {
            b.conv_bn(&format!("{prefix}.expand"), cin, hidden, 1, Conv2dParams::default())
        });
        let dw = Conv2dParams {
            stride,
            padding: kernel / 2,
            groups: hidden,
        };
        let depthwise = b.conv_bn(&format!("{prefix}.dw"), hidden, hidden, kernel, dw);
        let se = (se_ratio > 0.0).then(|| {
            let squeezed = ((cin as f64 * se_ratio).floor() as usize).max(1);
            let reduce = DenseLayer {
                weight: b.half_normal(format!("{prefix}.se.reduce.weight"), &[hidden, squeezed], hidden),
                bias: b.push(format!("{prefix}.se.reduce.bias"), Tensor::zeros(&[squeezed])),
            };
            SqueezeExcite {
                reduce,
                expand: b.dense(&format!("{prefix}.se.expand"), squeezed, hidden),
            }
        });
        let project = b.conv_bn(&format!("{prefix}.project"), hidden, cout, 1, Conv2dParams::default());
        MbConvBlock {
            in_channels: cin,
            out_channels: cout,
            expansion,
            kernel,
            stride,
            expand,
            depthwise,
            se,
            project,
        }
    }

    /// Width of the depthwise stage.
    pub fn hidden_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let actual = ctx.tape.shape(x).get(1).copied().unwrap_or(0);
        if actual != self.in_channels {
            return Err(Error::Dimension {
                op: "mbconv",
                axis: "input channels",
                expected: self.in_channels,
                actual,
            });
        }
        let mut h = x;
        if let Some(expand) = &self.expand {
            h = ctx.conv_bn(expand, h, true)?;
        }
        h = ctx.conv_bn(&self.depthwise, h, true)?;
        if let Some(se) = &self.se {
            let n = ctx.tape.shape(h)[0];
            let c = self.hidden_channels();
            let s = ctx.tape.pool2d(h, Pool::GlobalAvg)?;
            let s = ctx.tape.reshape(s, &[n, c])?;
            let s = ctx.dense(&se.reduce, s)?;
            let s = ctx.tape.relu(s)?;
            let s = ctx.dense(&se.expand, s)?;
            let s = ctx.tape.sigmoid(s)?;
            h = ctx.tape.scale_channels(h, s)?;
        }
        h = ctx.conv_bn(&self.project, h, false)?;
        if self.has_residual() {
            h = ctx.tape.add(h, x)?;
        }
        Ok(h)
    }
}

/// A stand-alone inverted-residual block with its own parameters, mainly for
/// testing the block in isolation.
#[derive(Debug, Clone)]
pub struct MbConv<T> {
    pub block: MbConvBlock,
    pub params: Vec<Param<T>>,
    pub buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> MbConv<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        expansion: usize,
        kernel: usize,
        stride: usize,
        se_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || expansion == 0 || kernel % 2 == 0 || stride == 0 {
            return Err(Error::validation("invalid mbconv configuration"));
        }
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut b = Builder {
            params: &mut params,
            buffers: &mut buffers,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let block = MbConvBlock::build(&mut b, "block", (in_channels, out_channels, expansion, kernel), stride, se_ratio);
        Ok(Self {
            block,
            params,
            buffers,
        })
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    pub fn forward(&mut self, tape: &mut GradTape<T>, input: Var, mode: Mode) -> Result<Var> {
        let vars = bind(tape, &self.params, mode);
        let mut ctx = Ctx {
            tape,
            vars: &vars,
            buffers: &mut self.buffers,
            bn: BatchNormConfig {
                mode,
                ..Default::default()
            },
        };
        self.block.forward(&mut ctx, input)
    }
}

fn bind<T: Scalar>(tape: &mut GradTape<T>, params: &[Param<T>], mode: Mode) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            let mut t = p.tensor.clone();
            t.grad = None;
            t.requires_grad = mode == Mode::Train;
            tape.leaf(t)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Stem {
    layer: ConvBn,
}

#[derive(Debug, Clone)]
struct Head {
    layer: ConvBn,
    classifier: DenseLayer,
}

/// Result of [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Tape handle of every parameter, in registry order.
    pub params: Vec<Var>,
    /// Spatial side after the stem and after each inverted-residual stage.
    pub stage_resolutions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    plan: StagePlan,
    config: NetworkConfig,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    stem: Stem,
    stages: Vec<Vec<MbConvBlock>>,
    head: Head,
}

/// Builds a network with default settings and `num_classes` outputs.
pub fn build<T: Scalar>(plan: &StagePlan, num_classes: usize, seed: u64) -> Result<Network<T>> {
    Network::build(
        plan,
        NetworkConfig {
            num_classes,
            ..Default::default()
        },
        seed,
    )
}

impl<T: Scalar> Network<T> {
    pub fn build(plan: &StagePlan, config: NetworkConfig, seed: u64) -> Result<Self> {
        plan.validate()?;
        config.validate()?;
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut b = Builder {
            params: &mut params,
            buffers: &mut buffers,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let first = plan.stages[0];
        let stem = Stem {
            layer: b.conv_bn(
                "stem",
                3,
                first.channels,
                first.kernel,
                Conv2dParams {
                    stride: first.first_stride,
                    padding: first.padding(),
                    groups: 1,
                },
            ),
        };
        let mut channels = first.channels;
        let mut stages = Vec::new();
        let last = plan.stages.len() - 1;
        for (s, stage) in plan.stages.iter().enumerate().take(last).skip(1) {
            let expansion = stage.kind.expansion().expect("validated plan");
            let blocks = (0..stage.layers)
                .map(|i| {
                    let stride = if i == 0 { stage.first_stride } else { 1 };
                    let block = MbConvBlock::build(
                        &mut b,
                        &format!("stages.{s}.blocks.{i}"),
                        (channels, stage.channels, expansion, stage.kernel),
                        stride,
                        config.se_ratio,
                    );
                    channels = stage.channels;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        let head_stage = plan.stages[last];
        let layer = b.conv_bn("head", channels, head_stage.channels, 1, Conv2dParams::default());
        let classifier = b.dense("classifier", head_stage.channels, config.num_classes);
        Ok(Self {
            plan: plan.clone(),
            config,
            params,
            buffers,
            stem,
            stages,
            head: Head { layer, classifier },
        })
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn blocks(&self) -> impl Iterator<Item = &MbConvBlock> {
        self.stages.iter().flatten()
    }

    /// Records a forward pass of `input` (`[N, 3, H, W]`) on `tape`.
    ///
    /// Parameters enter the tape as gradient-tracked leaves in train mode.
    /// `dropout_seed` drives the head dropout mask.
    pub fn forward(
        &mut self,
        tape: &mut GradTape<T>,
        input: Var,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<ForwardOutput> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dimension {
                op: "network",
                axis: "input channels",
                expected: 3,
                actual: shape.get(1).copied().unwrap_or(0),
            });
        }
        let vars = bind(tape, &self.params, mode);
        let mut ctx = Ctx {
            tape,
            vars: &vars,
            buffers: &mut self.buffers,
            bn: BatchNormConfig {
                mode,
                epsilon: self.config.bn_epsilon,
                momentum: self.config.bn_momentum,
            },
        };
        let mut resolutions = Vec::with_capacity(self.stages.len() + 1);
        let mut h = ctx.conv_bn(&self.stem.layer, input, true)?;
        resolutions.push(ctx.tape.shape(h)[2]);
        for blocks in &self.stages {
            for block in blocks {
                h = block.forward(&mut ctx, h)?;
            }
            resolutions.push(ctx.tape.shape(h)[2]);
        }
        h = ctx.conv_bn(&self.head.layer, h, true)?;
        let pool = match self.config.head_pool {
            HeadPool::Avg => Pool::GlobalAvg,
            HeadPool::Max => Pool::GlobalMax,
        };
        let n = shape[0];
        let features = self.plan.feature_channels();
        h = ctx.tape.pool2d(h, pool)?;
        h = ctx.tape.reshape(h, &[n, features])?;
        h = ctx.tape.dropout(h, self.config.dropout, mode, dropout_seed)?;
        let logits = ctx.dense(&self.head.classifier, h)?;
        Ok(ForwardOutput {
            logits,
            params: vars,
            stage_resolutions: resolutions,
        })
    }

    /// Eval-mode logits for a batch, `[N, num_classes]`.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = GradTape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x, Mode::Eval, 0)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Moves gradients from the tape into the parameter registry.
    pub fn store_grads(&mut self, tape: &mut GradTape<T>, vars: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            p.tensor.grad = tape.take_grad(*v);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }
}

/// Total element count of the parameter registry (running statistics excluded).
pub fn param_count<T: Scalar>(net: &Network<T>) -> usize {
    net.params.iter().map(|p| p.tensor.numel()).sum()
}

pub fn describe<T: Scalar>(net: &Network<T>) -> Vec<DescribeRow> {
    net.plan.describe()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_b0_plan, OperatorKind};
    use crate::scaling::{apply_scaling, resolve_scaling, ScalingCoefficients};

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Closed-form count from the layer formulas, independent of the builder.
    fn closed_form_count(plan: &StagePlan, classes: usize, se_ratio: f64) -> usize {
        let st = &plan.stages;
        let mut total = 3 * st[0].channels * 9 + 2 * st[0].channels;
        let mut cin = st[0].channels;
        for s in &st[1..st.len() - 1] {
            let e = if s.kind == OperatorKind::MbConv1 { 1 } else { 6 };
            for _ in 0..s.layers {
                let hid = cin * e;
                if e != 1 {
                    total += cin * hid + 2 * hid;
                }
                total += hid * s.kernel * s.kernel + 2 * hid;
                let se = ((cin as f64 * se_ratio) as usize).max(1);
                total += 2 * hid * se + se + hid;
                total += hid * s.channels + 2 * s.channels;
                cin = s.channels;
            }
        }
        let f = plan.feature_channels();
        total + cin * f + 2 * f + f * classes + classes
    }

    #[test]
    fn b0_param_count_matches_closed_form() {
        let plan = default_b0_plan();
        let net = build::<f32>(&plan, 5, 0).unwrap();
        assert_eq!(param_count(&net), closed_form_count(&plan, 5, 0.25));
        // frozen from a hand tally of the layer formulas above
        assert_eq!(param_count(&net), 4_013_953);
        let wider = build::<f32>(&plan, 10, 0).unwrap();
        assert_eq!(param_count(&wider) - param_count(&net), 1280 * 5 + 5);
    }

    #[test]
    fn dense_only_count() {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut b: Builder<'_, f32> = Builder {
            params: &mut params,
            buffers: &mut buffers,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        b.dense("fc", 2, 3);
        assert_eq!(params.iter().map(|p| p.tensor.numel()).sum::<usize>(), 9);
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let net = build::<f32>(&StagePlan::b0_at_resolution(64), 5, 1).unwrap();
        let mut names: Vec<_> = net.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names[0], "stem.conv.weight");
        assert_eq!(names.last().unwrap(), "classifier.bias");
        assert!(names.contains(&"stages.3.blocks.1.se.reduce.weight".to_string()));
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn equal_seeds_build_identical_networks() {
        let plan = StagePlan::b0_at_resolution(64);
        let a = build::<f32>(&plan, 5, 9).unwrap();
        let b = build::<f32>(&plan, 5, 9).unwrap();
        let c = build::<f32>(&plan, 5, 10).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.tensor.data(), q.tensor.data());
        }
        assert_ne!(a.params()[0].tensor.data(), c.params()[0].tensor.data());
    }

    #[test]
    fn b0_forward_shape_and_resolutions() {
        let mut net = build::<f32>(&default_b0_plan(), 5, 0).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(random_input(&[1, 3, 256, 256], 1));
        let out = net.forward(&mut tape, x, Mode::Eval, 0).unwrap();
        assert_eq!(tape.shape(out.logits), &[1, 5]);
        assert_eq!(out.stage_resolutions, [128, 128, 64, 32, 16, 16, 8, 8]);
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut net = build::<f32>(&StagePlan::b0_at_resolution(64), 5, 3).unwrap();
        let x = random_input(&[2, 3, 64, 64], 4);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gradients_reach_almost_every_parameter() {
        let mut net = build::<f32>(&default_b0_plan(), 5, 5).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(random_input(&[4, 3, 256, 256], 6));
        let out = net.forward(&mut tape, x, Mode::Train, 7).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, &[0, 1, 3, 4]).unwrap();
        tape.backward(loss).unwrap();
        net.store_grads(&mut tape, &out.params);
        let mut total = 0usize;
        let mut nonzero = 0usize;
        for p in net.params() {
            let g = p.tensor.grad.as_ref().unwrap_or_else(|| panic!("{} has no grad", p.name));
            total += g.len();
            nonzero += g.iter().filter(|v| **v != 0.0).count();
        }
        assert!(nonzero as f64 >= 0.99 * total as f64, "{nonzero}/{total}");
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut net = build::<f32>(&StagePlan::b0_at_resolution(64), 5, 5).unwrap();
        let before = net.buffers()[0].stats.clone();
        let mut tape = GradTape::new();
        let x = tape.constant(random_input(&[2, 3, 64, 64], 6));
        net.forward(&mut tape, x, Mode::Train, 0).unwrap();
        assert_ne!(net.buffers()[0].stats, before);
    }

    #[test]
    fn scaled_plans_forward() {
        for phi in [0.5, 1.0, 2.0] {
            let dims = resolve_scaling(&ScalingCoefficients::preset(phi)).unwrap();
            let plan = apply_scaling(&StagePlan::b0_at_resolution(64), &dims).unwrap();
            let r = plan.input_resolution();
            let mut net = build::<f32>(&plan, 5, 0).unwrap();
            let logits = net.predict(&random_input(&[1, 3, r, r], 2)).unwrap();
            assert_eq!(logits.shape(), &[1, 5]);
        }
    }

    #[test]
    fn describe_of_identity_scaled_b0_is_unchanged() {
        let plan = default_b0_plan();
        let dims = resolve_scaling(&ScalingCoefficients::preset(0.0)).unwrap();
        let scaled = apply_scaling(&plan, &dims).unwrap();
        let a = build::<f32>(&plan, 5, 0).unwrap();
        let b = build::<f32>(&scaled, 5, 0).unwrap();
        assert_eq!(describe(&a), describe(&b));
        assert_eq!(describe(&a).len(), 9);
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let mut net = build::<f32>(&StagePlan::b0_at_resolution(64), 5, 0).unwrap();
        assert!(matches!(
            net.predict(&random_input(&[1, 1, 64, 64], 0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mbconv_zero_projection_is_identity() {
        let mut block = MbConv::<f64>::new(16, 16, 6, 3, 1, 0.25, 0).unwrap();
        assert!(block.block.has_residual());
        block
            .param_mut("block.project.conv.weight")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let mut tape = GradTape::new();
        let input = random_input(&[2, 16, 8, 8], 3).cast::<f64>();
        let x = tape.constant(input.clone());
        let y = block.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(y).data(), input.data());
    }

    #[test]
    fn mbconv_expansion_and_stride() {
        let block = MbConv::<f32>::new(16, 24, 6, 3, 2, 0.25, 0).unwrap();
        assert_eq!(block.block.hidden_channels(), 96);
        let dw = block
            .params
            .iter()
            .find(|p| p.name == "block.dw.conv.weight")
            .unwrap();
        assert_eq!(dw.tensor.shape(), &[96, 1, 3, 3]);

        let mut block = MbConv::<f32>::new(8, 8, 6, 5, 2, 0.25, 0).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(random_input(&[1, 8, 64, 64], 0));
        let y = block.forward(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 32, 32]);

        let x = tape.constant(random_input(&[1, 4, 16, 16], 0));
        assert!(matches!(
            block.forward(&mut tape, x, Mode::Eval),
            Err(Error::Dimension { .. })
        ));
    }
}
