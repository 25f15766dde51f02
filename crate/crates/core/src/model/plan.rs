use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    /// Stem convolution.
    Conv3x3,
    MbConv1,
    MbConv6,
    /// 1×1 convolution to the feature width, global pooling, dense classifier.
    Head,
}

impl OperatorKind {
    /// Expansion factor of an inverted-residual stage.
    pub fn expansion(self) -> Option<usize> {
        match self {
            OperatorKind::MbConv1 => Some(1),
            OperatorKind::MbConv6 => Some(6),
            _ => None,
        }
    }

    /// Label used in the architecture table.
    pub fn table_label(self) -> &'static str {
        match self {
            OperatorKind::Conv3x3 => "CONV 3×3",
            OperatorKind::MbConv1 => "MB CONV1",
            OperatorKind::MbConv6 => "MB CONV6",
            OperatorKind::Head => "CONV 1×1, MP, dense",
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            OperatorKind::Conv3x3 => "conv3x3",
            OperatorKind::MbConv1 => "mbconv1",
            OperatorKind::MbConv6 => "mbconv6",
            OperatorKind::Head => "head",
        }
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conv3x3" => Ok(OperatorKind::Conv3x3),
            "mbconv1" => Ok(OperatorKind::MbConv1),
            "mbconv6" => Ok(OperatorKind::MbConv6),
            "head" => Ok(OperatorKind::Head),
            other => Err(Error::validation(format!("unknown operator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub kind: OperatorKind,
    /// Pixels per side of the stage input.
    pub input_resolution: usize,
    /// Output channels.
    pub channels: usize,
    /// Repeat count.
    pub layers: usize,
    pub kernel: usize,
    /// Stride of the first layer; later repeats use stride 1.
    pub first_stride: usize,
}

impl Stage {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_resolution(&self) -> usize {
        crate::tensor::ConvGeometry::new(
            &[1, 1, self.input_resolution, self.input_resolution],
            &[1, 1, self.kernel, self.kernel],
            self.first_stride,
            self.padding(),
            1,
        )
        .map(|g| g.out_h)
        .unwrap_or(0)
    }
}

/// One row of the human-readable architecture table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescribeRow {
    pub operator: &'static str,
    pub resolution: usize,
    pub channels: usize,
    pub layers: usize,
}

impl fmt::Display for DescribeRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {r}×{r}, {}, {}",
            self.operator,
            self.channels,
            self.layers,
            r = self.resolution
        )
    }
}

/// Ordered stage list: stem, inverted-residual stages, head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

/// B0 stage template: (operator, channels, layers, kernel, first stride).
const B0_TEMPLATE: [(OperatorKind, usize, usize, usize, usize); 9] = [
    (OperatorKind::Conv3x3, 32, 1, 3, 2),
    (OperatorKind::MbConv1, 16, 1, 3, 1),
    (OperatorKind::MbConv6, 24, 2, 3, 2),
    (OperatorKind::MbConv6, 40, 2, 5, 2),
    (OperatorKind::MbConv6, 80, 3, 3, 2),
    (OperatorKind::MbConv6, 112, 3, 5, 1),
    (OperatorKind::MbConv6, 192, 4, 5, 2),
    (OperatorKind::MbConv6, 320, 1, 3, 1),
    (OperatorKind::Head, 1280, 1, 1, 1),
];

pub const B0_RESOLUTION: usize = 256;

/// The nine-stage EfficientNet-B0 plan at 256×256 input.
pub fn default_b0_plan() -> StagePlan {
    StagePlan::b0_at_resolution(B0_RESOLUTION)
}

impl StagePlan {
    /// B0 stage structure with resolutions chained from `input` through the
    /// stride schedule (64 gives the reduced desk-scale plan).
    pub fn b0_at_resolution(input: usize) -> StagePlan {
        let mut res = input;
        let stages = B0_TEMPLATE
            .iter()
            .map(|&(kind, channels, layers, kernel, first_stride)| {
                let stage = Stage {
                    kind,
                    input_resolution: res,
                    channels,
                    layers,
                    kernel,
                    first_stride,
                };
                res = stage.output_resolution();
                stage
            })
            .collect();
        StagePlan { stages }
    }

    pub fn input_resolution(&self) -> usize {
        self.stages.first().map_or(0, |s| s.input_resolution)
    }

    /// Width of the features entering the classifier.
    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Re-derives every stage input resolution from the stem input.
    pub(crate) fn rechain(&mut self, input: usize) {
        let mut res = input;
        for stage in &mut self.stages {
            stage.input_resolution = res;
            res = stage.output_resolution();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        if n < 2 {
            return Err(Error::validation("plan needs at least a stem and a head"));
        }
        if self.stages[0].kind != OperatorKind::Conv3x3 {
            return Err(Error::validation("first stage must be the conv3x3 stem"));
        }
        if self.stages[n - 1].kind != OperatorKind::Head {
            return Err(Error::validation("last stage must be the head"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let at = format!("stage {i} ({})", s.kind.token());
            if (1..n - 1).contains(&i) && s.kind.expansion().is_none() {
                return Err(Error::validation(format!("{at}: only mbconv stages may sit between stem and head")));
            }
            if s.layers == 0 || s.channels == 0 || s.input_resolution == 0 {
                return Err(Error::validation(format!("{at}: layers, channels and resolution must be ≥ 1")));
            }
            if !(1..=2).contains(&s.first_stride) {
                return Err(Error::validation(format!("{at}: stride must be 1 or 2")));
            }
            let kernel_ok = match s.kind {
                OperatorKind::Conv3x3 => s.kernel == 3,
                OperatorKind::Head => s.kernel == 1 && s.first_stride == 1,
                _ => s.kernel == 3 || s.kernel == 5,
            };
            if !kernel_ok {
                return Err(Error::validation(format!("{at}: kernel {} not allowed", s.kernel)));
            }
            if matches!(s.kind, OperatorKind::Conv3x3 | OperatorKind::Head) && s.layers != 1 {
                return Err(Error::validation(format!("{at}: stem and head have exactly one layer")));
            }
            ConvGeometry::new(
                &[1, 1, s.input_resolution, s.input_resolution],
                &[1, 1, s.kernel, s.kernel],
                s.first_stride,
                s.padding(),
                1,
            )
            .map_err(|e| Error::geometry(format!("{at}: {e}")))?;
            if i + 1 < n {
                let next = self.stages[i + 1].input_resolution;
                let out = s.output_resolution();
                if next != out {
                    return Err(Error::validation(format!(
                        "resolution chain broken after {at}: produces {out}, next stage expects {next}"
                    )));
                }
                if next > s.input_resolution {
                    return Err(Error::validation(format!("resolution increases after {at}")));
                }
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> Vec<DescribeRow> {
        self.stages
            .iter()
            .map(|s| DescribeRow {
                operator: s.kind.table_label(),
                resolution: s.input_resolution,
                channels: s.channels,
                layers: s.layers,
            })
            .collect()
    }

    /// `operator,resolution,channels,layers,kernel,stride`, one stage per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# operator,resolution,channels,layers,kernel,stride\n");
        for s in &self.stages {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.kind.token(),
                s.input_resolution,
                s.channels,
                s.layers,
                s.kernel,
                s.first_stride
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<StagePlan> {
        let mut stages = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("operator") {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: "<plan>".into(),
                line: i as u64 + 1,
                msg,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", fields.len())));
            }
            let num = |j: usize| {
                fields[j]
                    .parse::<usize>()
                    .map_err(|e| bad(format!("field {}: {e}", j + 1)))
            };
            stages.push(Stage {
                kind: fields[0].parse().map_err(|e: Error| bad(e.to_string()))?,
                input_resolution: num(1)?,
                channels: num(2)?,
                layers: num(3)?,
                kernel: num(4)?,
                first_stride: num(5)?,
            });
        }
        let plan = StagePlan { stages };
        plan.validate()?;
        Ok(plan)
    }
}
