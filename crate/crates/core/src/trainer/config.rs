use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{default_b0_plan, HeadPool, NetworkConfig, StagePlan};
use crate::optim::{OptimizerKind, OptimizerSpec};
use crate::preprocess::{AugmentConfig, NormStats, DEFAULT_MEDIAN_WINDOW};

/// Where the stage plan comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanSource {
    /// B0 template chained from the given input resolution (256 is the default B0).
    B0 { resolution: usize },
    File(PathBuf),
}

impl PlanSource {
    pub fn load(&self) -> Result<StagePlan> {
        match self {
            PlanSource::B0 { resolution: 256 } => Ok(default_b0_plan()),
            PlanSource::B0 { resolution } => {
                let plan = StagePlan::b0_at_resolution(*resolution);
                plan.validate()?;
                Ok(plan)
            }
            PlanSource::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| Error::Resolve {
                    path: path.clone(),
                    source,
                })?;
                StagePlan::parse(&text).map_err(|e| match e {
                    Error::Parse { line, msg, .. } => Error::Parse {
                        path: path.clone(),
                        line,
                        msg,
                    },
                    other => other,
                })
            }
        }
    }

    fn to_value(&self) -> String {
        match self {
            PlanSource::B0 { resolution: 256 } => "b0".into(),
            PlanSource::B0 { resolution } => format!("b0@{resolution}"),
            PlanSource::File(p) => p.display().to_string(),
        }
    }

    fn parse(value: &str, base: &Path) -> Result<Self> {
        let v = value.trim();
        if v.eq_ignore_ascii_case("b0") {
            return Ok(PlanSource::B0 { resolution: 256 });
        }
        if let Some(r) = v.strip_prefix("b0@") {
            let resolution = r
                .parse()
                .map_err(|_| Error::validation(format!("bad plan resolution `{r}`")))?;
            return Ok(PlanSource::B0 { resolution });
        }
        Ok(PlanSource::File(base.join(v)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormSource {
    /// Statistics of the prepared training images.
    Dataset,
    Fixed(NormStats),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitPolicy {
    Stratified { val_fraction: f64 },
    Random { val_fraction: f64 },
    /// A separate manifest (for example the official test split) serves as validation.
    Manifest(PathBuf),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub plan: PlanSource,
    pub network: NetworkConfig,
    pub optimizer: OptimizerSpec,
    /// Parameter column the optimizer was built from, kept for reports.
    pub optimizer_params: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub norm: NormSource,
    pub split: SplitPolicy,
    pub median_window: usize,
    pub clip_norm: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: PathBuf::from("runs/default"),
            plan: PlanSource::B0 { resolution: 256 },
            network: NetworkConfig::default(),
            optimizer: OptimizerSpec::new(OptimizerKind::Adamax, 0.002),
            optimizer_params: String::new(),
            epochs: 100,
            batch_size: 16,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            norm: NormSource::Dataset,
            split: SplitPolicy::Stratified { val_fraction: 0.2 },
            median_window: DEFAULT_MEDIAN_WINDOW,
            clip_norm: None,
        }
    }
}

fn triple(v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::validation(format!("`{v}` is not three comma-separated numbers")))?;
    parts
        .try_into()
        .map_err(|_| Error::validation(format!("`{v}` must have exactly three values")))
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::validation(format!("`{v}` is not a boolean"))),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::validation(format!("`{v}` is not a valid number")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be ≥ 1"));
        }
        if self.median_window == 0 || self.median_window % 2 == 0 {
            return Err(Error::validation("median_window must be odd"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::validation("clip_norm must be positive"));
            }
        }
        if let SplitPolicy::Stratified { val_fraction } | SplitPolicy::Random { val_fraction } = self.split {
            if !(val_fraction > 0.0 && val_fraction < 1.0) {
                return Err(Error::validation("split.val_fraction must lie in (0, 1)"));
            }
        }
        if let NormSource::Fixed(s) = &self.norm {
            if s.std.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::validation("norm.std components must be positive"));
            }
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.network.validate()?;
        self.optimizer.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Resolve {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })
    }

    /// Parses `key = value` lines; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut optimizer_kind = cfg.optimizer.kind();
        let mut lr = cfg.optimizer.lr;
        let mut params = String::new();
        let mut augment = AugmentConfig::default();
        let mut augment_on = true;
        let mut norm_source = "dataset".to_string();
        let mut norm = NormStats {
            mean: [0.5; 3],
            std: [0.5; 3],
        };
        let mut split_mode = "stratified".to_string();
        let mut val_fraction = 0.2;
        let mut val_manifest = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once(" #").map_or(raw, |(l, _)| l).trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |msg: String| Error::Parse {
                path: PathBuf::from("<config>"),
                line: i as u64 + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            let mut apply = || -> Result<()> {
                match key {
                    "manifest" => cfg.manifest = Some(base.join(value)),
                    "out_dir" => cfg.out_dir = base.join(value),
                    "plan" => cfg.plan = PlanSource::parse(value, base)?,
                    "num_classes" => cfg.network.num_classes = num(value)?,
                    "dropout" => cfg.network.dropout = num(value)?,
                    "se_ratio" => cfg.network.se_ratio = num(value)?,
                    "head_pool" => {
                        cfg.network.head_pool = match value {
                            "avg" => HeadPool::Avg,
                            "max" => HeadPool::Max,
                            _ => return Err(Error::validation("head_pool must be avg or max")),
                        }
                    }
                    "epochs" => cfg.epochs = num(value)?,
                    "batch_size" => cfg.batch_size = num(value)?,
                    "seed" => cfg.seed = num(value)?,
                    "median_window" => cfg.median_window = num(value)?,
                    "clip_norm" => {
                        cfg.clip_norm = if value == "none" { None } else { Some(num(value)?) }
                    }
                    "optimizer" | "optimizer.kind" => optimizer_kind = value.parse()?,
                    "optimizer.params" => params = value.to_string(),
                    "lr" | "optimizer.lr" => lr = crate::optim::parse_lr(value)?,
                    "augment.enabled" => augment_on = parse_bool(value)?,
                    "augment.crop_min" => augment.crop_fraction.0 = num(value)?,
                    "augment.crop_max" => augment.crop_fraction.1 = num(value)?,
                    "augment.rotation" => augment.rotation_degrees = num(value)?,
                    "augment.hflip" => augment.horizontal_flip_prob = num(value)?,
                    "augment.vflip" => augment.vertical_flip_prob = num(value)?,
                    "norm.source" => norm_source = value.to_ascii_lowercase(),
                    "norm.mean" => norm.mean = triple(value)?,
                    "norm.std" => norm.std = triple(value)?,
                    "split.mode" => split_mode = value.to_ascii_lowercase(),
                    "split.val_fraction" => val_fraction = num(value)?,
                    "split.val_manifest" => val_manifest = Some(base.join(value)),
                    _ => return Err(Error::validation(format!("unknown key `{key}`"))),
                }
                Ok(())
            };
            apply().map_err(|e| fail(format!("{key}: {e}")))?;
        }
        cfg.optimizer = OptimizerSpec::parse(optimizer_kind.name(), &params, lr)?;
        cfg.optimizer_params = params;
        augment.seed = cfg.seed;
        cfg.augment = augment_on.then_some(augment);
        cfg.norm = match norm_source.as_str() {
            "dataset" => NormSource::Dataset,
            "fixed" => NormSource::Fixed(norm),
            other => return Err(Error::validation(format!("norm.source `{other}` must be dataset or fixed"))),
        };
        cfg.split = match split_mode.as_str() {
            "stratified" => SplitPolicy::Stratified { val_fraction },
            "random" => SplitPolicy::Random { val_fraction },
            "none" => SplitPolicy::None,
            "manifest" => SplitPolicy::Manifest(
                val_manifest.ok_or_else(|| Error::validation("split.mode = manifest needs split.val_manifest"))?,
            ),
            other => return Err(Error::validation(format!("unknown split.mode `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the config in the same `key = value` format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(m) = &self.manifest {
            kv("manifest", m.display().to_string());
        }
        kv("out_dir", self.out_dir.display().to_string());
        kv("plan", self.plan.to_value());
        kv("num_classes", self.network.num_classes.to_string());
        kv("dropout", self.network.dropout.to_string());
        kv("se_ratio", self.network.se_ratio.to_string());
        kv(
            "head_pool",
            match self.network.head_pool {
                HeadPool::Avg => "avg".into(),
                HeadPool::Max => "max".into(),
            },
        );
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("median_window", self.median_window.to_string());
        kv("clip_norm", self.clip_norm.map_or("none".into(), |c| c.to_string()));
        kv("optimizer", self.optimizer.kind().name().into());
        if !self.optimizer_params.is_empty() {
            kv("optimizer.params", self.optimizer_params.clone());
        }
        kv("lr", self.optimizer.lr.to_string());
        kv("augment.enabled", self.augment.is_some().to_string());
        if let Some(a) = &self.augment {
            kv("augment.crop_min", a.crop_fraction.0.to_string());
            kv("augment.crop_max", a.crop_fraction.1.to_string());
            kv("augment.rotation", a.rotation_degrees.to_string());
            kv("augment.hflip", a.horizontal_flip_prob.to_string());
            kv("augment.vflip", a.vertical_flip_prob.to_string());
        }
        match &self.norm {
            NormSource::Dataset => kv("norm.source", "dataset".into()),
            NormSource::Fixed(n) => {
                kv("norm.source", "fixed".into());
                kv("norm.mean", format!("{}, {}, {}", n.mean[0], n.mean[1], n.mean[2]));
                kv("norm.std", format!("{}, {}, {}", n.std[0], n.std[1], n.std[2]));
            }
        }
        match &self.split {
            SplitPolicy::Stratified { val_fraction } => {
                kv("split.mode", "stratified".into());
                kv("split.val_fraction", val_fraction.to_string());
            }
            SplitPolicy::Random { val_fraction } => {
                kv("split.mode", "random".into());
                kv("split.val_fraction", val_fraction.to_string());
            }
            SplitPolicy::Manifest(p) => {
                kv("split.mode", "manifest".into());
                kv("split.val_manifest", p.display().to_string());
            }
            SplitPolicy::None => kv("split.mode", "none".into()),
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# desk-scale run
manifest = data/manifest.csv
out_dir = out
plan = b0@64
epochs = 30       # short
batch_size = 8
seed = 4
optimizer = Adamax
optimizer.params = β=(0.9, 0.999), ε=1e-08
lr = 0.002
augment.enabled = false
norm.source = fixed
norm.mean = 0.5, 0.5, 0.5
norm.std = 0.25, 0.25, 0.25
split.mode = random
split.val_fraction = 0.25
";

    #[test]
    fn parses_dotted_keys() {
        let cfg = RunConfig::parse(SAMPLE, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.manifest.as_deref(), Some(Path::new("/cfg/data/manifest.csv")));
        assert_eq!(cfg.plan, PlanSource::B0 { resolution: 64 });
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.seed), (30, 8, 4));
        assert_eq!(cfg.optimizer, OptimizerSpec::new(OptimizerKind::Adamax, 0.002));
        assert!(cfg.augment.is_none());
        assert_eq!(cfg.split, SplitPolicy::Random { val_fraction: 0.25 });
        assert!(matches!(cfg.norm, NormSource::Fixed(n) if n.std == [0.25; 3]));
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::parse(SAMPLE, Path::new("/cfg")).unwrap();
        let again = RunConfig::parse(&cfg.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg, again);
        let defaults = RunConfig::default();
        assert_eq!(RunConfig::parse(&defaults.to_text(), Path::new("")).unwrap(), defaults);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::parse("epochs = 0\n", Path::new("")).is_err());
        let err = RunConfig::parse("seed = 1\nbogus = 3\n", Path::new("")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::parse("optimizer = adamax\noptimizer.params = β=(1.0, 0.9)\n", Path::new("")).is_err());
        assert!(RunConfig::parse("split.mode = manifest\n", Path::new("")).is_err());
    }
}
