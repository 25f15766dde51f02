//! Compound scaling of depth, width and input resolution by one exponent.
//!
//! With bases `D, Ω, R ≥ 1` and compound coefficient `φ ≥ 0` the multipliers
//! are `d = D^φ`, `w = Ω^φ`, `r = R^φ`; the resource factor `D·Ω²·R²` should be
//! close to 2 so each unit of `φ` roughly doubles compute.

use crate::error::{Error, Result};
use crate::model::{OperatorKind, StagePlan};

/// Smallest stem input resolution a scaled plan may have.
pub const MIN_RESOLUTION: usize = 32;
pub const DEFAULT_RESOURCE_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingCoefficients {
    pub depth_base: f64,
    pub width_base: f64,
    pub resolution_base: f64,
    pub phi: f64,
}

impl ScalingCoefficients {
    /// Bases (1.2, 1.1, 1.15); resource factor ≈ 1.92.
    pub fn preset(phi: f64) -> Self {
        Self {
            depth_base: 1.2,
            width_base: 1.1,
            resolution_base: 1.15,
            phi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("depth base", self.depth_base),
            ("width base", self.width_base),
            ("resolution base", self.resolution_base),
        ] {
            if !(v >= 1.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be ≥ 1, got {v}")));
            }
        }
        if !(self.phi >= 0.0) || !self.phi.is_finite() {
            return Err(Error::validation(format!("phi must be ≥ 0, got {}", self.phi)));
        }
        Ok(())
    }

    /// `D·Ω²·R²`, independent of φ.
    pub fn resources(&self) -> f64 {
        self.depth_base * self.width_base.powi(2) * self.resolution_base.powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledDims {
    pub depth: f64,
    pub width: f64,
    pub resolution: f64,
    pub resources: f64,
}

impl ScaledDims {
    pub const IDENTITY: ScaledDims = ScaledDims {
        depth: 1.0,
        width: 1.0,
        resolution: 1.0,
        resources: 1.0,
    };
}

pub fn resolve_scaling(coeffs: &ScalingCoefficients) -> Result<ScaledDims> {
    coeffs.validate()?;
    Ok(ScaledDims {
        depth: coeffs.depth_base.powf(coeffs.phi),
        width: coeffs.width_base.powf(coeffs.phi),
        resolution: coeffs.resolution_base.powf(coeffs.phi),
        resources: coeffs.resources(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceCheck {
    pub satisfied: bool,
    pub resources: f64,
}

/// Whether `|D·Ω²·R² − 2| ≤ tolerance`.
pub fn check_resource_constraint(coeffs: &ScalingCoefficients, tolerance: f64) -> ResourceCheck {
    let resources = coeffs.resources();
    ResourceCheck {
        satisfied: (resources - 2.0).abs() <= tolerance,
        resources,
    }
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// `round(c·w)`, snapped up to a multiple of 8 (at least 8).
pub fn scale_channels(channels: usize, width: f64) -> usize {
    let rounded = round_half_up(channels as f64 * width).max(1.0) as usize;
    rounded.div_ceil(8).max(1) * 8
}

/// `ceil(L·d)`; the small slack keeps exact products like 5·1.2 at 6.
pub fn scale_layers(layers: usize, depth: f64) -> usize {
    ((layers as f64 * depth - 1e-9).ceil() as usize).max(1)
}

/// `res·r` rounded to the nearest even integer.
pub fn scale_resolution(resolution: usize, factor: f64) -> usize {
    2 * round_half_up(resolution as f64 * factor / 2.0) as usize
}

/// Scales a plan's widths, repeat counts and input resolution.
///
/// Stem and head keep a single layer; stage input resolutions after the
/// stem are re-derived from the scaled input through the stride schedule.
pub fn apply_scaling(base: &StagePlan, dims: &ScaledDims) -> Result<StagePlan> {
    base.validate()?;
    for (name, v) in [
        ("depth", dims.depth),
        ("width", dims.width),
        ("resolution", dims.resolution),
    ] {
        if !(v >= 1.0) {
            return Err(Error::validation(format!("{name} multiplier must be ≥ 1, got {v}")));
        }
    }
    let input = scale_resolution(base.input_resolution(), dims.resolution);
    if input < MIN_RESOLUTION {
        return Err(Error::geometry(format!(
            "scaled input resolution {input} is below {MIN_RESOLUTION}"
        )));
    }
    let mut plan = base.clone();
    for stage in &mut plan.stages {
        stage.channels = scale_channels(stage.channels, dims.width);
        if !matches!(stage.kind, OperatorKind::Conv3x3 | OperatorKind::Head) {
            stage.layers = scale_layers(stage.layers, dims.depth);
        }
    }
    plan.rechain(input);
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_b0_plan;

    #[test]
    fn phi_zero_is_identity() {
        let d = resolve_scaling(&ScalingCoefficients::preset(0.0)).unwrap();
        assert_eq!((d.depth, d.width, d.resolution), (1.0, 1.0, 1.0));
        let plan = apply_scaling(&default_b0_plan(), &d).unwrap();
        assert_eq!(plan, default_b0_plan());
    }

    #[test]
    fn phi_one_and_two() {
        let d = resolve_scaling(&ScalingCoefficients::preset(1.0)).unwrap();
        assert!((d.depth - 1.2).abs() < 1e-12);
        assert!((d.width - 1.1).abs() < 1e-12);
        assert!((d.resolution - 1.15).abs() < 1e-12);
        // 1.2 · 1.21 · 1.3225
        assert!((d.resources - 1.920_27).abs() < 1e-12);

        let d = resolve_scaling(&ScalingCoefficients::preset(2.0)).unwrap();
        assert!((d.depth - 1.44).abs() < 1e-12);
        assert!((d.width - 1.21).abs() < 1e-12);
        assert!((d.resolution - 1.3225).abs() < 1e-12);
    }

    #[test]
    fn invalid_coefficients() {
        let mut c = ScalingCoefficients::preset(1.0);
        c.width_base = 0.9;
        assert!(resolve_scaling(&c).is_err());
        let c = ScalingCoefficients::preset(-0.5);
        assert!(resolve_scaling(&c).is_err());
    }

    #[test]
    fn resource_constraint() {
        let c = ScalingCoefficients::preset(0.0);
        let r = check_resource_constraint(&c, 0.1);
        assert!(r.satisfied);
        let unit = ScalingCoefficients {
            depth_base: 1.0,
            width_base: 1.0,
            resolution_base: 1.0,
            phi: 1.0,
        };
        let r = check_resource_constraint(&unit, 0.1);
        assert!(!r.satisfied);
        assert_eq!(r.resources, 1.0);
        let two = ScalingCoefficients {
            depth_base: 2.0,
            ..unit
        };
        let r = check_resource_constraint(&two, 1e-9);
        assert!(r.satisfied);
        assert_eq!(r.resources, 2.0);
    }

    #[test]
    fn rounding_rules() {
        assert_eq!(scale_layers(3, 1.2), 4);
        assert_eq!(scale_layers(5, 1.2), 6);
        assert_eq!(scale_channels(40, 1.1), 48);
        assert_eq!(scale_channels(16, 1.0), 16);
        assert_eq!(scale_channels(1, 1.0), 8);
        assert_eq!(scale_resolution(256, 1.15), 294);
        assert_eq!(scale_resolution(256, 1.0), 256);
    }

    #[test]
    fn scaled_plans_stay_valid_and_monotone() {
        let base = default_b0_plan();
        let mut prev = base.clone();
        for phi in [0.5, 1.0, 2.0] {
            let d = resolve_scaling(&ScalingCoefficients::preset(phi)).unwrap();
            let plan = apply_scaling(&base, &d).unwrap();
            plan.validate().unwrap();
            for (a, b) in prev.stages.iter().zip(&plan.stages) {
                assert!(b.layers >= a.layers && b.channels >= a.channels);
                assert!(b.input_resolution >= a.input_resolution);
            }
            prev = plan;
        }
    }

    #[test]
    fn too_small_resolution_is_rejected() {
        let tiny = crate::model::StagePlan::b0_at_resolution(16);
        let err = apply_scaling(&tiny, &ScaledDims::IDENTITY).unwrap_err();
        assert!(matches!(err, Error::InvalidGeometry(_)));
    }
}
