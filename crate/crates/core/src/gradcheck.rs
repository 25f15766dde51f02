//! Central-difference gradient verification.
//!
//! The numeric side only ever calls forward passes, so it stays independent
//! of the backward rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{
    Activation, BatchNormConfig, Conv2dParams, GradTape, Mode, Pool, RunningStats, Tensor, Var,
};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative error per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

fn projection(len: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_9ad);
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[len], data).expect("non-empty projection")
}

/// Reduces `build`'s output to a scalar by a fixed random projection.
fn scalar_loss<F>(tape: &mut GradTape<f64>, vars: &[Var], build: &F) -> Result<Var>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let out = build(tape, vars)?;
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[n])?;
    let r = tape.constant(projection(n));
    let weighted = tape.mul(flat, r)?;
    tape.sum(weighted)
}

fn evaluate<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = scalar_loss(&mut tape, &vars, build)?;
    tape.value(loss).item()
}

/// Compares tape gradients of every input against central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = scalar_loss(&mut tape, &vars, &build)?;
    tape.backward(loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = evaluate(&probe, &build)?;
            probe[i].data_mut()[j] = orig - step;
            let down = evaluate(&probe, &build)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        per_input.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { per_input })
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Outcome of checking one op over many random instances.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl OpReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst < tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values at least `gap` apart and away from zero, so finite differences
/// never straddle a max/ReLU kink.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    let data = ranks
        .iter()
        .map(|&r| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * (r as f64 + 1.0 + rng.random_range(-0.1..0.1)) * gap
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn run_op<G>(op: &'static str, instances: usize, seed: u64, mut one: G) -> Result<OpReport>
where
    G: FnMut(&mut ChaCha8Rng) -> Result<GradCheck>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        worst = worst.max(one(&mut rng)?.worst());
    }
    Ok(OpReport {
        op,
        instances,
        worst,
    })
}

fn random_conv_case(rng: &mut ChaCha8Rng) -> ([usize; 4], [usize; 4], Conv2dParams, bool) {
    loop {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=3);
        let depthwise = cin > 1 && rng.random_bool(0.4);
        let groups = if depthwise { cin } else { 1 };
        let cout = if depthwise { cin } else { rng.random_range(1..=3) };
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=1);
        let h = rng.random_range(2..=5);
        let w = rng.random_range(2..=5);
        let input = [n, cin, h, w];
        let kernel = [cout, cin / groups, k, k];
        let fits = h + 2 * padding >= k && w + 2 * padding >= k;
        if fits && input.iter().product::<usize>() <= 64 && kernel.iter().product::<usize>() <= 64 {
            let p = Conv2dParams {
                stride,
                padding,
                groups,
            };
            return (input, kernel, p, rng.random_bool(0.5));
        }
    }
}

fn small_nchw(rng: &mut ChaCha8Rng, min_spatial: usize) -> [usize; 4] {
    loop {
        let s = [
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(min_spatial..=4),
            rng.random_range(min_spatial..=4),
        ];
        if s.iter().product::<usize>() <= 64 {
            return s;
        }
    }
}

/// Gradient check of every differentiable tape op on `instances` random
/// inputs each (at most 64 elements per tensor).
pub fn differentiable_op_suite(instances: usize, seed: u64, step: f64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();

    reports.push(run_op("conv2d", instances, seed, |rng| {
        let (xs, ks, p, with_bias) = random_conv_case(rng);
        let mut inputs = vec![uniform(rng, &xs), uniform(rng, &ks)];
        if with_bias {
            inputs.push(uniform(rng, &[ks[0]]));
        }
        check_gradients(
            &inputs,
            |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), p),
            step,
        )
    })?);

    reports.push(run_op("max_pool2d", instances, seed + 1, |rng| {
        let window = rng.random_range(1..=3);
        let mut s = small_nchw(rng, 1);
        s[2] = s[2].max(window);
        s[3] = s[3].max(window);
        let x = separated(rng, &s, 0.05);
        check_gradients(&[x], |t, v| t.pool2d(v[0], Pool::Max { window }), step)
    })?);

    reports.push(run_op("global_avg_pool", instances, seed + 2, |rng| {
        let s = small_nchw(rng, 1);
        check_gradients(&[uniform(rng, &s)], |t, v| t.pool2d(v[0], Pool::GlobalAvg), step)
    })?);

    reports.push(run_op("global_max_pool", instances, seed + 3, |rng| {
        let s = small_nchw(rng, 1);
        let x = separated(rng, &s, 0.05);
        check_gradients(&[x], |t, v| t.pool2d(v[0], Pool::GlobalMax), step)
    })?);

    reports.push(run_op("batch_norm(train)", instances, seed + 4, |rng| {
        let s = small_nchw(rng, 2);
        let c = s[1];
        let inputs = [uniform(rng, &s), uniform(rng, &[c]), uniform(rng, &[c])];
        check_gradients(
            &inputs,
            |t, v| {
                let mut stats = RunningStats::new(c);
                t.batch_norm(v[0], v[1], v[2], &mut stats, BatchNormConfig::default())
            },
            step,
        )
    })?);

    reports.push(run_op("batch_norm(eval)", instances, seed + 5, |rng| {
        let s = small_nchw(rng, 1);
        let c = s[1];
        let stats = RunningStats {
            mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let inputs = [uniform(rng, &s), uniform(rng, &[c]), uniform(rng, &[c])];
        let cfg = BatchNormConfig {
            mode: Mode::Eval,
            ..Default::default()
        };
        check_gradients(
            &inputs,
            |t, v| t.batch_norm(v[0], v[1], v[2], &mut stats.clone(), cfg),
            step,
        )
    })?);

    for (name, kind, offset) in [
        ("relu", Activation::Relu, 6),
        ("sigmoid", Activation::Sigmoid, 7),
        ("identity", Activation::Identity, 8),
    ] {
        reports.push(run_op(name, instances, seed + offset, |rng| {
            let len = rng.random_range(1..=64);
            let x = separated(rng, &[len], 0.03);
            check_gradients(&[x], |t, v| t.activation(v[0], kind), step)
        })?);
    }

    reports.push(run_op("dense", instances, seed + 9, |rng| {
        let (n, f, k) = (
            rng.random_range(1..=3),
            rng.random_range(1..=6),
            rng.random_range(1..=5),
        );
        let inputs = [uniform(rng, &[n, f]), uniform(rng, &[f, k]), uniform(rng, &[k])];
        check_gradients(&inputs, |t, v| t.dense(v[0], v[1], Some(v[2])), step)
    })?);

    reports.push(run_op("dropout", instances, seed + 10, |rng| {
        let len = rng.random_range(1..=64);
        let mask_seed = rng.random();
        check_gradients(
            &[uniform(rng, &[len])],
            |t, v| t.dropout(v[0], 0.4, Mode::Train, mask_seed),
            step,
        )
    })?);

    reports.push(run_op("softmax_cross_entropy", instances, seed + 11, |rng| {
        let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let x = uniform(rng, &[n, k]);
        check_gradients(&[x], |t, v| t.softmax_cross_entropy(v[0], &labels), step)
    })?);

    reports.push(run_op("add", instances, seed + 12, |rng| {
        let len = rng.random_range(1..=64);
        let inputs = [uniform(rng, &[len]), uniform(rng, &[len])];
        check_gradients(&inputs, |t, v| t.add(v[0], v[1]), step)
    })?);

    reports.push(run_op("mul", instances, seed + 13, |rng| {
        let len = rng.random_range(1..=64);
        let inputs = [uniform(rng, &[len]), uniform(rng, &[len])];
        check_gradients(&inputs, |t, v| t.mul(v[0], v[1]), step)
    })?);

    reports.push(run_op("sum", instances, seed + 14, |rng| {
        let s = small_nchw(rng, 1);
        check_gradients(&[uniform(rng, &s)], |t, v| t.sum(v[0]), step)
    })?);

    reports.push(run_op("scale_channels", instances, seed + 15, |rng| {
        let s = small_nchw(rng, 1);
        let inputs = [uniform(rng, &s), uniform(rng, &[s[0], s[1]])];
        check_gradients(&inputs, |t, v| t.scale_channels(v[0], v[1]), step)
    })?);

    reports.push(run_op("reshape", instances, seed + 16, |rng| {
        let s = small_nchw(rng, 1);
        let flat = [s[0], s[1] * s[2] * s[3]];
        check_gradients(&[uniform(rng, &s)], |t, v| t.reshape(v[0], &flat), step)
    })?);

    Ok(reports)
}
