//! First-order optimizers: Adadelta, Adagrad, Adam, Adamax, AdamW, ASGD,
//! RMSprop, Rprop and plain SGD.
//!
//! Update rules follow the PyTorch formulations, whose parameter names the
//! sweep presets use (`betas`, `etas`, `step_sizes`, `lambda`, `t0`).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adadelta,
    Adagrad,
    Adam,
    Adamax,
    AdamW,
    Asgd,
    RmsProp,
    Rprop,
    Sgd,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 9] = [
        OptimizerKind::Adadelta,
        OptimizerKind::Adagrad,
        OptimizerKind::Adam,
        OptimizerKind::Adamax,
        OptimizerKind::AdamW,
        OptimizerKind::Asgd,
        OptimizerKind::RmsProp,
        OptimizerKind::Rprop,
        OptimizerKind::Sgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adadelta => "Adadelta",
            OptimizerKind::Adagrad => "Adagrad",
            OptimizerKind::Adam => "Adam",
            OptimizerKind::Adamax => "Adamax",
            OptimizerKind::AdamW => "AdamW",
            OptimizerKind::Asgd => "ASGD",
            OptimizerKind::RmsProp => "RmsProp",
            OptimizerKind::Rprop => "Rprop",
            OptimizerKind::Sgd => "SGD",
        }
    }

    fn slots(self) -> &'static [&'static str] {
        match self {
            OptimizerKind::Adadelta => &["square_avg", "acc_delta"],
            OptimizerKind::Adagrad => &["sum"],
            OptimizerKind::Adam | OptimizerKind::AdamW => &["exp_avg", "exp_avg_sq"],
            OptimizerKind::Adamax => &["exp_avg", "exp_inf"],
            OptimizerKind::Asgd => &["ax"],
            OptimizerKind::RmsProp => &["square_avg"],
            OptimizerKind::Rprop => &["prev", "step_size"],
            OptimizerKind::Sgd => &[],
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::validation(format!("unknown optimizer `{}`", s.trim())))
    }
}

/// Kind-specific hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    Adadelta { rho: f64, eps: f64 },
    Adagrad { eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Adamax { beta1: f64, beta2: f64, eps: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    Asgd { lambda: f64, alpha: f64, t0: f64 },
    RmsProp { alpha: f64, eps: f64 },
    Rprop { eta_minus: f64, eta_plus: f64, step_min: f64, step_max: f64 },
    Sgd,
}

impl Rule {
    pub fn kind(&self) -> OptimizerKind {
        match self {
            Rule::Adadelta { .. } => OptimizerKind::Adadelta,
            Rule::Adagrad { .. } => OptimizerKind::Adagrad,
            Rule::Adam { .. } => OptimizerKind::Adam,
            Rule::Adamax { .. } => OptimizerKind::Adamax,
            Rule::AdamW { .. } => OptimizerKind::AdamW,
            Rule::Asgd { .. } => OptimizerKind::Asgd,
            Rule::RmsProp { .. } => OptimizerKind::RmsProp,
            Rule::Rprop { .. } => OptimizerKind::Rprop,
            Rule::Sgd => OptimizerKind::Sgd,
        }
    }

    /// Library defaults for `kind` (the values every sweep row uses).
    pub fn defaults(kind: OptimizerKind) -> Rule {
        match kind {
            OptimizerKind::Adadelta => Rule::Adadelta { rho: 0.9, eps: 1e-6 },
            OptimizerKind::Adagrad => Rule::Adagrad { eps: 1e-10 },
            OptimizerKind::Adam => Rule::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            OptimizerKind::Adamax => Rule::Adamax { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            OptimizerKind::AdamW => Rule::AdamW {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.01,
            },
            OptimizerKind::Asgd => Rule::Asgd {
                lambda: 1e-4,
                alpha: 0.75,
                t0: 1e6,
            },
            OptimizerKind::RmsProp => Rule::RmsProp { alpha: 0.99, eps: 1e-8 },
            OptimizerKind::Rprop => Rule::Rprop {
                eta_minus: 0.5,
                eta_plus: 1.2,
                step_min: 1e-6,
                step_max: 50.0,
            },
            OptimizerKind::Sgd => Rule::Sgd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub rule: Rule,
}

fn check(ok: bool, field: &str, constraint: &str, value: f64) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::validation(format!("{field} must satisfy {constraint}, got {value}")))
    }
}

fn check_eps(v: f64) -> Result<()> {
    check(v > 0.0, "eps", "ε > 0", v)
}

fn check_betas(b1: f64, b2: f64) -> Result<()> {
    check((0.0..1.0).contains(&b1), "beta1", "0 ≤ β₁ < 1", b1)?;
    check((0.0..1.0).contains(&b2), "beta2", "0 ≤ β₂ < 1", b2)
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            lr,
            rule: Rule::defaults(kind),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.rule.kind()
    }

    pub fn validate(&self) -> Result<()> {
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "lr > 0", self.lr)?;
        match self.rule {
            Rule::Adadelta { rho, eps } => {
                check((0.0..1.0).contains(&rho), "rho", "0 ≤ ρ < 1", rho)?;
                check_eps(eps)
            }
            Rule::Adagrad { eps } | Rule::RmsProp { eps, .. } => {
                if let Rule::RmsProp { alpha, .. } = self.rule {
                    check((0.0..1.0).contains(&alpha), "alpha", "0 ≤ α < 1", alpha)?;
                }
                check_eps(eps)
            }
            Rule::Adam { beta1, beta2, eps } | Rule::Adamax { beta1, beta2, eps } => {
                check_betas(beta1, beta2)?;
                check_eps(eps)
            }
            Rule::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                check_betas(beta1, beta2)?;
                check_eps(eps)?;
                check(weight_decay >= 0.0, "weight_decay", "weight_decay ≥ 0", weight_decay)
            }
            Rule::Asgd { lambda, alpha, t0 } => {
                check(lambda >= 0.0, "lambda", "λ ≥ 0", lambda)?;
                check(alpha >= 0.0, "alpha", "α ≥ 0", alpha)?;
                check(t0 >= 0.0, "t0", "t0 ≥ 0", t0)
            }
            Rule::Rprop {
                eta_minus,
                eta_plus,
                step_min,
                step_max,
            } => {
                check(eta_minus > 0.0 && eta_minus < 1.0, "eta_minus", "0 < η⁻ < 1", eta_minus)?;
                check(eta_plus > 1.0, "eta_plus", "η⁺ > 1", eta_plus)?;
                check(step_min > 0.0, "step_min", "step_min > 0", step_min)?;
                check(step_max > step_min, "step_max", "step_min < step_max", step_max)
            }
            Rule::Sgd => Ok(()),
        }
    }

    /// Builds a spec from an optimizer name and a parameter string such as
    /// `β=(0.9, 0.999), ε=1e-08`. Unmentioned fields keep their defaults.
    pub fn parse(name: &str, params: &str, lr: f64) -> Result<Self> {
        let kind: OptimizerKind = name.parse()?;
        let mut rule = Rule::defaults(kind);
        for (key, value) in parse_params(params)? {
            let bad = || Error::validation(format!("{kind}: unexpected parameter `{key}`"));
            let one = || -> Result<f64> {
                match value.as_slice() {
                    [v] => Ok(*v),
                    _ => Err(Error::validation(format!("{kind}: `{key}` takes one value"))),
                }
            };
            let pair = || -> Result<(f64, f64)> {
                match value.as_slice() {
                    [a, b] => Ok((*a, *b)),
                    _ => Err(Error::validation(format!("{kind}: `{key}` takes a pair"))),
                }
            };
            match (&mut rule, canonical_key(&key)) {
                (Rule::Adadelta { rho, .. }, "rho") => *rho = one()?,
                (
                    Rule::Adadelta { eps, .. }
                    | Rule::Adagrad { eps }
                    | Rule::Adam { eps, .. }
                    | Rule::Adamax { eps, .. }
                    | Rule::AdamW { eps, .. }
                    | Rule::RmsProp { eps, .. },
                    "eps",
                ) => *eps = one()?,
                (
                    Rule::Adam { beta1, beta2, .. }
                    | Rule::Adamax { beta1, beta2, .. }
                    | Rule::AdamW { beta1, beta2, .. },
                    "betas",
                ) => (*beta1, *beta2) = pair()?,
                (Rule::AdamW { weight_decay, .. }, "weight_decay") => *weight_decay = one()?,
                (Rule::Asgd { lambda, .. }, "lambda") => *lambda = one()?,
                (Rule::Asgd { alpha, .. } | Rule::RmsProp { alpha, .. }, "alpha") => {
                    *alpha = one()?
                }
                (Rule::Asgd { t0, .. }, "t0") => *t0 = one()?,
                (
                    Rule::Rprop {
                        eta_minus, eta_plus, ..
                    },
                    "betas",
                ) => (*eta_minus, *eta_plus) = pair()?,
                (
                    Rule::Rprop {
                        step_min, step_max, ..
                    },
                    "step_sizes",
                ) => (*step_min, *step_max) = pair()?,
                _ => return Err(bad()),
            }
        }
        let spec = OptimizerSpec { lr, rule };
        spec.validate()?;
        Ok(spec)
    }
}

fn canonical_key(key: &str) -> &str {
    match key {
        "ρ" | "rho" => "rho",
        "ε" | "eps" | "ps" => "eps",
        "β" | "betas" | "etas" => "betas",
        "λ" | "lambda" | "lambd" => "lambda",
        "α" | "alpha" => "alpha",
        other => other,
    }
}

fn parse_number(raw: &str) -> Result<f64> {
    let s = raw.trim();
    if let Some(exp) = s.strip_prefix("10^") {
        let e: i32 = exp
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("bad exponent in `{s}`")))?;
        return Ok(10f64.powi(e));
    }
    s.parse()
        .map_err(|_| Error::validation(format!("`{s}` is not a number")))
}

/// Splits `k=v, k=(a, b)` into keys and numeric values.
fn parse_params(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut items = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let bytes: Vec<char> = text.chars().collect();
    for (i, c) in bytes.iter().enumerate() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                items.push(bytes[start..i].iter().collect::<String>());
                start = i + 1;
            }
            _ => {}
        }
    }
    items.push(bytes[start..].iter().collect::<String>());
    let mut out = Vec::new();
    for item in items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("expected key=value, found `{item}`")))?;
        let value = value.trim();
        let values = match value.strip_prefix('(').and_then(|v| v.strip_suffix(')')) {
            Some(inner) => inner.split(',').map(parse_number).collect::<Result<Vec<_>>>()?,
            None => vec![parse_number(value)?],
        };
        out.push((key.trim().to_string(), values));
    }
    Ok(out)
}

/// Optimizer state: one set of auxiliary arrays per parameter plus a step counter.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    spec: OptimizerSpec,
    step: u64,
    names: Vec<String>,
    slots: Vec<Vec<Vec<T>>>,
}

pub fn make_optimizer<T: Scalar>(spec: &OptimizerSpec, params: &[Param<T>]) -> Result<Optimizer<T>> {
    spec.validate()?;
    let kind = spec.kind();
    let slots = params
        .iter()
        .map(|p| {
            let n = p.tensor.numel();
            kind.slots()
                .iter()
                .map(|slot| {
                    let init = if *slot == "step_size" { T::of(spec.lr) } else { T::zero() };
                    let mut v = vec![init; n];
                    if *slot == "ax" {
                        v.copy_from_slice(p.tensor.data());
                    }
                    v
                })
                .collect()
        })
        .collect();
    Ok(Optimizer {
        spec: *spec,
        step: 0,
        names: params.iter().map(|p| p.name.clone()).collect(),
        slots,
    })
}

impl<T: Scalar> Optimizer<T> {
    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in place from its stored gradient.
    pub fn step(&mut self, params: &mut [Param<T>]) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            let g = p
                .tensor
                .grad
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", p.name)))?;
            if g.len() != p.tensor.numel() {
                return Err(Error::Contract(format!("gradient of {} has wrong length", p.name)));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    name: p.name.clone(),
                    detail: format!("gradient element {i} is {}", g[i]),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let lr = self.spec.lr;
        for (p, slots) in params.iter_mut().zip(&mut self.slots) {
            let g = p.tensor.grad.take().expect("checked above");
            update(&self.spec.rule, lr, t, p.tensor.data_mut(), &g, slots);
            p.tensor.grad = Some(g);
        }
        Ok(())
    }

    /// ASGD's averaged iterate for parameter `index`.
    pub fn averaged(&self, index: usize) -> Option<&[T]> {
        match self.spec.rule {
            Rule::Asgd { .. } => self.slots.get(index).map(|s| s[0].as_slice()),
            _ => None,
        }
    }

    /// Current ASGD step size and averaging weight.
    pub fn asgd_schedule(&self) -> Option<(f64, f64)> {
        match self.spec.rule {
            Rule::Asgd { lambda, alpha, t0 } => Some(asgd_schedule(self.spec.lr, lambda, alpha, t0, self.step)),
            _ => None,
        }
    }

    /// Auxiliary arrays as named tensors, `optim.<param>.<slot>`, plus `optim.step`.
    pub fn export_state(&self) -> Vec<(String, Tensor<T>)> {
        let kind = self.spec.kind();
        let mut out = vec![(
            "optim.step".to_string(),
            Tensor::new(&[1], vec![T::of(self.step as f64)]).expect("one element"),
        )];
        for (name, slots) in self.names.iter().zip(&self.slots) {
            for (slot, data) in kind.slots().iter().zip(slots) {
                let t = Tensor::new(&[data.len()], data.clone()).expect("non-empty parameter");
                out.push((format!("optim.{name}.{slot}"), t));
            }
        }
        out
    }

    /// Restores state written by [`Optimizer::export_state`].
    pub fn import_state(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let find = |key: &str| tensors.iter().find(|(n, _)| n == key).map(|(_, t)| t);
        let step = find("optim.step")
            .ok_or_else(|| Error::Integrity("optimizer state lacks optim.step".into()))?;
        let kind = self.spec.kind();
        for (name, slots) in self.names.iter().zip(&mut self.slots) {
            for (slot, data) in kind.slots().iter().zip(slots.iter_mut()) {
                let key = format!("optim.{name}.{slot}");
                let t = find(&key)
                    .ok_or_else(|| Error::Integrity(format!("optimizer state lacks {key}")))?;
                if t.numel() != data.len() {
                    return Err(Error::Integrity(format!("{key} has {} elements, expected {}", t.numel(), data.len())));
                }
                data.copy_from_slice(t.data());
            }
        }
        self.step = step.data()[0].to_f64_lossless() as u64;
        Ok(())
    }
}

fn asgd_schedule(lr: f64, lambda: f64, alpha: f64, t0: f64, step: u64) -> (f64, f64) {
    let t = step as f64;
    let eta = lr / (1.0 + lambda * lr * t).powf(alpha);
    let mu = 1.0 / (t - t0).max(1.0);
    (eta, mu)
}

fn update<T: Scalar>(rule: &Rule, lr: f64, t: f64, p: &mut [T], g: &[T], slots: &mut [Vec<T>]) {
    let c = T::of;
    match *rule {
        Rule::Sgd => {
            for (p, g) in p.iter_mut().zip(g) {
                *p = *p - c(lr) * *g;
            }
        }
        Rule::Adadelta { rho, eps } => {
            let (sq, rest) = slots.split_at_mut(1);
            for i in 0..p.len() {
                let (v, u) = (&mut sq[0][i], &mut rest[0][i]);
                *v = c(rho) * *v + c(1.0 - rho) * g[i] * g[i];
                let delta = (*u + c(eps)).sqrt() / (*v + c(eps)).sqrt() * g[i];
                *u = c(rho) * *u + c(1.0 - rho) * delta * delta;
                p[i] = p[i] - c(lr) * delta;
            }
        }
        Rule::Adagrad { eps } => {
            for ((p, g), s) in p.iter_mut().zip(g).zip(slots[0].iter_mut()) {
                *s = *s + *g * *g;
                *p = *p - c(lr) * *g / (s.sqrt() + c(eps));
            }
        }
        Rule::Adam { beta1, beta2, eps } => adam(p, g, slots, lr, t, beta1, beta2, eps),
        Rule::AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } => {
            let keep = c(1.0 - lr * weight_decay);
            for p in p.iter_mut() {
                *p = *p * keep;
            }
            adam(p, g, slots, lr, t, beta1, beta2, eps);
        }
        Rule::Adamax { beta1, beta2, eps } => {
            let clr = c(lr / (1.0 - beta1.powf(t)));
            let (m, rest) = slots.split_at_mut(1);
            for i in 0..p.len() {
                let (m, u) = (&mut m[0][i], &mut rest[0][i]);
                *m = c(beta1) * *m + c(1.0 - beta1) * g[i];
                *u = (c(beta2) * *u).max(g[i].abs() + c(eps));
                p[i] = p[i] - clr * *m / *u;
            }
        }
        Rule::Asgd { lambda, alpha, t0 } => {
            let (eta, mu) = asgd_schedule(lr, lambda, alpha, t0, t as u64 - 1);
            let decay = c(1.0 - lambda * eta);
            for ((p, g), ax) in p.iter_mut().zip(g).zip(slots[0].iter_mut()) {
                *p = *p * decay - c(eta) * *g;
                *ax = if mu == 1.0 { *p } else { *ax + (*p - *ax) * c(mu) };
            }
        }
        Rule::RmsProp { alpha, eps } => {
            for ((p, g), v) in p.iter_mut().zip(g).zip(slots[0].iter_mut()) {
                *v = c(alpha) * *v + c(1.0 - alpha) * *g * *g;
                *p = *p - c(lr) * *g / (v.sqrt() + c(eps));
            }
        }
        Rule::Rprop {
            eta_minus,
            eta_plus,
            step_min,
            step_max,
        } => {
            let (prev, rest) = slots.split_at_mut(1);
            for i in 0..p.len() {
                let (prev, step) = (&mut prev[0][i], &mut rest[0][i]);
                let agreement = g[i] * *prev;
                let mut grad = g[i];
                if agreement > T::zero() {
                    *step = (*step * c(eta_plus)).min(c(step_max));
                } else if agreement < T::zero() {
                    *step = (*step * c(eta_minus)).max(c(step_min));
                    grad = T::zero();
                }
                p[i] = p[i] - signum(grad) * *step;
                *prev = grad;
            }
        }
    }
}

fn signum<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[allow(clippy::too_many_arguments)]
fn adam<T: Scalar>(p: &mut [T], g: &[T], slots: &mut [Vec<T>], lr: f64, t: f64, b1: f64, b2: f64, eps: f64) {
    let c = T::of;
    let step = c(lr / (1.0 - b1.powf(t)));
    let bc2 = c((1.0 - b2.powf(t)).sqrt());
    let (m, rest) = slots.split_at_mut(1);
    for i in 0..p.len() {
        let (m, v) = (&mut m[0][i], &mut rest[0][i]);
        *m = c(b1) * *m + c(1.0 - b1) * g[i];
        *v = c(b2) * *v + c(1.0 - b2) * g[i] * g[i];
        p[i] = p[i] - step * *m / (v.sqrt() / bc2 + c(eps));
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [Param<T>], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64_lossless().powi(2))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = T::of(max_norm / total);
        for g in params.iter_mut().filter_map(|p| p.tensor.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v = *v * scale);
        }
    }
    total
}

/// One row of the optimizer sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    /// Optimizer name as printed in the table.
    pub optimizer: String,
    /// Parameter column as printed in the table.
    pub params: String,
    pub epochs: usize,
    /// Learning-rate cell as printed.
    pub lr_text: String,
    pub spec: OptimizerSpec,
}

const TABLE3: [(&str, &str, usize, &str); 19] = [
    ("Adadelta", "ρ=0.9, ε=1e-06", 10, "0.001"),
    ("Adadelta", "ρ=0.9, ε=1e-06", 10, "0.001"),
    ("Adagrad", "ε=1e-10", 50, "0.001"),
    ("Adagrad", "ε=1e-10", 10, "0.001"),
    ("Adagrad", "ε=1e-10", 50, "0.002"),
    ("Adam", "β=(0.9, 0.999), ε=1e-08", 100, "0.002"),
    ("Adam", "β=(0.9, 0.999), ε=1e-08", 10, "0.003"),
    ("Adam", "β=(0.9, 0.999), ε=1e-08", 10, "0.002"),
    ("Adamax", "β=(0.9, 0.999), ε=1e-08", 10, "0.002"),
    ("Adamax", "β=(0.9, 0.999), ε=1e-08", 50, "le-3"),
    ("Adamax", "β=(0.9, 0.999), ε=1e-08", 100, "0.002"),
    ("Adamax", "β=(0.9, 0.999), ε=1e-08", 50, "0.002"),
    ("AdamW", "β=(0.9, 0.999), ε=1e-08, weight_decay=0.01", 100, "0.002"),
    ("AdamW", "β=(0.9, 0.999), ε=1e-08, weight_decay=0.01", 100, "0.001"),
    ("ASGD", "λ=0.0001, α=0.75, t0=10^6", 100, "0.002"),
    ("RmsProp", "α=0.99, ε=1e-08", 10, "0.001"),
    ("RmsProp", "α=0.99, ε=1e-08", 100, "0.002"),
    ("RmsProp", "α=0.99, ε=1e-08", 10, "0.002"),
    ("Rprop", "β=(0.5, 1.2), step_sizes=(1e-06, 50)", 10, "0.001"),
];

/// Reads a learning-rate cell; `le-3` is the table's misprint of `1e-3`.
pub fn parse_lr(text: &str) -> Result<f64> {
    let t = text.trim();
    let fixed = match t.strip_prefix('l') {
        Some(rest) if rest.starts_with('e') => format!("1{rest}"),
        _ => t.to_string(),
    };
    fixed
        .parse()
        .map_err(|_| Error::validation(format!("bad learning rate `{t}`")))
}

impl Preset {
    pub fn new(optimizer: &str, params: &str, epochs: usize, lr_text: &str) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::validation("epochs must be ≥ 1"));
        }
        let lr = parse_lr(lr_text)?;
        Ok(Self {
            optimizer: optimizer.to_string(),
            params: params.to_string(),
            epochs,
            lr_text: lr_text.to_string(),
            spec: OptimizerSpec::parse(optimizer, params, lr)?,
        })
    }

    pub fn lr(&self) -> f64 {
        self.spec.lr
    }
}

/// The 19 sweep rows (optimizer, parameters, epochs, learning rate).
pub fn table3_presets() -> Vec<Preset> {
    TABLE3
        .iter()
        .map(|(o, p, e, lr)| Preset::new(o, p, *e, lr).expect("built-in presets are valid"))
        .collect()
}

/// Reads a preset CSV with header `optimizer,params,epochs,lr`.
pub fn parse_presets(text: &str) -> Result<Vec<Preset>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let expected = ["optimizer", "params", "epochs", "lr"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "preset header must be `{}`",
            expected.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i as u64 + 2, |p| p.line());
        let fail = |msg: String| Error::Parse {
            path: "<presets>".into(),
            line,
            msg,
        };
        let epochs = record[2]
            .parse()
            .map_err(|e| fail(format!("epochs: {e}")))?;
        out.push(Preset::new(&record[0], &record[1], epochs, &record[3]).map_err(|e| fail(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::validation("preset file has no rows"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: &[f64]) -> Vec<Param<f64>> {
        let mut t = Tensor::new(&[values.len()], values.to_vec()).unwrap();
        t.grad = Some(grad.to_vec());
        vec![Param {
            name: "w".into(),
            tensor: t,
        }]
    }

    fn one_step(spec: OptimizerSpec, p0: f64, g: f64) -> f64 {
        let mut params = param(&[p0], &[g]);
        let mut opt = make_optimizer(&spec, &params).unwrap();
        opt.step(&mut params).unwrap();
        params[0].tensor.data()[0]
    }

    #[test]
    fn adam_first_step() {
        let p = one_step(OptimizerSpec::new(OptimizerKind::Adam, 0.002), 1.0, 1.0);
        assert!((p - (1.0 - 0.002 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn sgd_step() {
        let p = one_step(OptimizerSpec::new(OptimizerKind::Sgd, 0.1), 1.0, 0.5);
        assert!((p - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op_except_decay_rules() {
        for kind in OptimizerKind::ALL {
            let p = one_step(OptimizerSpec::new(kind, 0.002), 0.7, 0.0);
            match kind {
                OptimizerKind::AdamW => assert!((p - 0.7 * (1.0 - 0.002 * 0.01)).abs() < 1e-15),
                // λ acts as an L2 shrink on every step
                OptimizerKind::Asgd => assert!((p - 0.7 * (1.0 - 1e-4 * 0.002)).abs() < 1e-15),
                _ => assert_eq!(p, 0.7, "{kind}"),
            }
        }
    }

    #[test]
    fn rprop_step_grows_with_agreeing_signs() {
        let spec = OptimizerSpec::new(OptimizerKind::Rprop, 0.001);
        let mut params = param(&[1.0], &[2.0]);
        let mut opt = make_optimizer(&spec, &params).unwrap();
        opt.step(&mut params).unwrap();
        assert!((params[0].tensor.data()[0] - 0.999).abs() < 1e-15);
        opt.step(&mut params).unwrap();
        assert!((params[0].tensor.data()[0] - (0.999 - 0.0012)).abs() < 1e-15);

        let mut spec = spec;
        spec.lr = 45.0;
        let mut params = param(&[0.0], &[1.0]);
        let mut opt = make_optimizer(&spec, &params).unwrap();
        opt.step(&mut params).unwrap();
        opt.step(&mut params).unwrap();
        assert!((params[0].tensor.data()[0] + 95.0).abs() < 1e-12, "clamped to 50");
    }

    #[test]
    fn rprop_sign_flip_shrinks_and_skips() {
        let spec = OptimizerSpec::new(OptimizerKind::Rprop, 0.001);
        let mut params = param(&[1.0], &[2.0]);
        let mut opt = make_optimizer(&spec, &params).unwrap();
        opt.step(&mut params).unwrap();
        params[0].tensor.grad = Some(vec![-3.0]);
        opt.step(&mut params).unwrap();
        assert!((params[0].tensor.data()[0] - 0.999).abs() < 1e-15);
        opt.step(&mut params).unwrap();
        assert!((params[0].tensor.data()[0] - (0.999 + 0.0005)).abs() < 1e-15);
    }

    #[test]
    fn validation_names_the_field() {
        let mut spec = OptimizerSpec::new(OptimizerKind::Adamax, 0.002);
        spec.validate().unwrap();
        if let Rule::Adamax { beta1, .. } = &mut spec.rule {
            *beta1 = 1.0;
        }
        assert!(spec.validate().unwrap_err().to_string().contains("beta1"));
        let spec = OptimizerSpec {
            lr: 0.001,
            rule: Rule::Rprop {
                eta_minus: 0.5,
                eta_plus: 1.2,
                step_min: 60.0,
                step_max: 50.0,
            },
        };
        assert!(spec.validate().unwrap_err().to_string().contains("step_max"));
        let params = param(&[1.0], &[1.0]);
        assert!(make_optimizer(&spec, &params).is_err());
        assert!(OptimizerSpec::new(OptimizerKind::Sgd, 0.0).validate().is_err());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = param(&[1.0], &[f64::NAN]);
        let mut opt = make_optimizer(&OptimizerSpec::new(OptimizerKind::Adam, 0.1), &params).unwrap();
        match opt.step(&mut params) {
            Err(Error::Numeric { name, .. }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn specs_build_independent_states() {
        let spec = OptimizerSpec::new(OptimizerKind::Adam, 0.01);
        let mut a_params = param(&[1.0], &[1.0]);
        let b_params = param(&[1.0], &[1.0]);
        let mut a = make_optimizer(&spec, &a_params).unwrap();
        let b = make_optimizer(&spec, &b_params).unwrap();
        a.step(&mut a_params).unwrap();
        assert_eq!(a.steps(), 1);
        assert_eq!(b.steps(), 0);
        assert!(b.export_state().iter().skip(1).all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn presets_match_table() {
        let presets = table3_presets();
        assert_eq!(presets.len(), 19);
        assert!(presets
            .iter()
            .any(|p| p.optimizer == "Adamax" && p.epochs == 100 && p.lr() == 0.002));
        let adadelta: Vec<_> = presets.iter().filter(|p| p.optimizer == "Adadelta").collect();
        assert_eq!(adadelta.len(), 2);
        assert!(adadelta.iter().all(|p| p.lr() == 0.001));
        assert_eq!(presets[9].lr_text, "le-3");
        assert_eq!(presets[9].lr(), 0.001);
        assert_eq!(
            presets[14].spec.rule,
            Rule::Asgd {
                lambda: 1e-4,
                alpha: 0.75,
                t0: 1e6
            }
        );
        assert_eq!(presets[18].spec.rule, Rule::defaults(OptimizerKind::Rprop));
        assert_eq!(presets[12].spec.rule, Rule::defaults(OptimizerKind::AdamW));
        for p in &presets {
            assert_eq!(p.spec.rule, Rule::defaults(p.spec.kind()), "{}", p.optimizer);
        }
    }

    #[test]
    fn preset_file_round_trip() {
        let text = "optimizer,params,epochs,lr\nAdam,\"betas=(0.8, 0.99), eps=1e-07\",3,0.01\n";
        let p = parse_presets(text).unwrap();
        assert_eq!(
            p[0].spec,
            OptimizerSpec {
                lr: 0.01,
                rule: Rule::Adam {
                    beta1: 0.8,
                    beta2: 0.99,
                    eps: 1e-7
                }
            }
        );
        let bad = "optimizer,params,epochs,lr\nAdam,\"rho=0.9\",3,0.01\n";
        assert!(matches!(parse_presets(bad), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn state_export_import_round_trip() {
        let spec = OptimizerSpec::new(OptimizerKind::Adamax, 0.01);
        let mut params = param(&[1.0, 2.0], &[0.3, -0.2]);
        let mut a = make_optimizer(&spec, &params).unwrap();
        a.step(&mut params).unwrap();
        a.step(&mut params).unwrap();
        let mut b = make_optimizer(&spec, &params).unwrap();
        b.import_state(&a.export_state()).unwrap();
        let mut pa = params.clone();
        let mut pb = params.clone();
        a.step(&mut pa).unwrap();
        b.step(&mut pb).unwrap();
        assert_eq!(pa[0].tensor.data(), pb[0].tensor.data());
        assert_eq!(b.steps(), 3);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut params = param(&[0.0, 0.0], &[3.0, 4.0]);
        let before = clip_grad_norm(&mut params, 1.0);
        assert_eq!(before, 5.0);
        let g = params[0].tensor.grad.as_ref().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
