//! Flat `key = value` pipeline configuration.

use std::path::Path;

use crate::deformation::DEFAULT_LONG_SIDES;
use crate::depthfilter::FilterConfig;
use crate::error::{Error, Result};
use crate::losses::{default_focal_prior, LossKind, RegWeights};
use crate::par::Exec;
use crate::solver::{LinearSolverKind, PoseInit, SolveOptions};

/// A value that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    const TYPE_NAME: &'static str;
    fn parse_value(s: &str) -> Option<Self>;
    fn format_value(&self) -> String;
}

impl ConfigValue for f64 {
    const TYPE_NAME: &'static str = "NUM";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse::<f64>().ok().filter(|v| v.is_finite())
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for usize {
    const TYPE_NAME: &'static str = "INT";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    const TYPE_NAME: &'static str = "INT";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    const TYPE_NAME: &'static str = "BOOL";
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Option<f64> {
    const TYPE_NAME: &'static str = "NUM|none";
    fn parse_value(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            f64::parse_value(s).map(Some)
        }
    }
    fn format_value(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

macro_rules! named_value {
    ($ty:ty, $label:literal) => {
        impl ConfigValue for $ty {
            const TYPE_NAME: &'static str = $label;
            fn parse_value(s: &str) -> Option<Self> {
                <$ty>::parse(s)
            }
            fn format_value(&self) -> String {
                self.name().into()
            }
        }
    };
}

named_value!(LossKind, "euclidean|spatial_disparity|spatial_ratio");
named_value!(LinearSolverKind, "sparse_cholesky|pcg|dense");
named_value!(PoseInit, "identity|incremental");

macro_rules! pipeline_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr; )*) => {
        /// Every pipeline tunable.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name) ),*];

            /// Parses and assigns one key without range checks; call
            /// [`PipelineConfig::validate`] afterwards.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value).ok_or_else(|| {
                            Error::Config(format!(
                                "{key}: cannot parse {value:?} as {}",
                                <$ty as ConfigValue>::TYPE_NAME
                            ))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// All keys in declaration order, one per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( s.push_str(&format!("{} = {}\n", stringify!($name), ConfigValue::format_value(&self.$name))); )*
                s
            }
        }

        /// Command-line overrides, one flag per configuration key.
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct ConfigOverrides {
            $(
                $(#[doc = $doc])*
                #[arg(long, value_name = <$ty as ConfigValue>::TYPE_NAME, help_heading = "Configuration")]
                pub $name: Option<String>,
            )*
        }

        impl ConfigOverrides {
            /// Applies every given flag to `cfg`.
            pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
                $( if let Some(v) = &self.$name { cfg.set(stringify!($name), v)?; } )*
                Ok(())
            }
        }
    };
}

pipeline_config! {
    /// Forward-backward consistency threshold in pixels.
    fb_threshold: f64 = 1.0;
    /// Minimum distance between sampled matches in pixels.
    min_match_dist: f64 = 10.0;
    /// Base weight of the deformation smoothness term.
    lambda1: f64 = 0.1;
    /// Extra smoothness weight on dynamic regions.
    lambda2: f64 = 10.0;
    /// Overall multiplier of the smoothness term.
    lambda_deform: f64 = 1.0;
    /// Weight of the focal prior.
    lambda_focal: f64 = 1.0;
    /// Focal prior in half-long-side units.
    focal_prior: f64 = default_focal_prior();
    /// Normalize dynamic coverage per handle.
    normalize_dynamic: bool = true;
    /// Huber threshold on reprojection residuals.
    huber: Option<f64> = None;
    /// Reprojection loss.
    loss: LossKind = LossKind::SpatialRatio;
    /// Handles along the long image side at the finest level.
    grid_long_side: usize = 17;
    /// Iteration cap per level.
    max_iterations: usize = 200;
    /// Relative cost decrease that ends a level.
    function_tolerance: f64 = 1e-8;
    /// Gradient infinity norm that ends a level.
    gradient_tolerance: f64 = 1e-10;
    /// Relative step size that ends a level.
    parameter_tolerance: f64 = 1e-10;
    /// Linear solver for the normal equations.
    linear_solver: LinearSolverKind = LinearSolverKind::SparseCholesky;
    /// Pose initialization.
    pose_init: PoseInit = PoseInit::Incremental;
    /// One focal length for all frames.
    shared_focal: bool = false;
    /// Optimize focal lengths.
    optimize_focal: bool = true;
    /// Freeze one handle of frame 0 to fix the global scale.
    freeze_scale_handle: bool = true;
    /// Temporal filter radius in frames.
    tau: usize = 4;
    /// Spatial filter half-size (1 gives 3x3).
    filter_half_size: usize = 1;
    /// Filter weight falloff.
    lambda_f: f64 = 3.0;
    /// Normalize filter weights.
    filter_normalize: bool = true;
    /// Frame gap for relative pose errors.
    rpe_delta: usize = 1;
    /// Ground-truth depths above this are excluded from depth metrics.
    depth_cap: f64 = 80.0;
    /// Seed for match sampling and synthetic data.
    seed: u64 = 0;
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be > 0, got {v}")))
    }
}

impl PipelineConfig {
    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the `key = value` lines of `text` to `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", k + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", k + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    /// Defaults overlaid with the file at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = super::read_text(path)?;
        let mut cfg = Self::default();
        cfg.merge_text(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        positive("fb_threshold", self.fb_threshold)?;
        positive("min_match_dist", self.min_match_dist)?;
        positive("depth_cap", self.depth_cap)?;
        if self.grid_long_side == 0 {
            return Err(Error::Config("grid_long_side must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        if self.rpe_delta == 0 {
            return Err(Error::Config("rpe_delta must be >= 1".into()));
        }
        let wrap = |e: Error| Error::Config(e.to_string().trim_start_matches("invalid argument: ").to_string());
        self.reg_weights().validate().map_err(wrap)?;
        self.solve_options(Exec::Sequential).validate().map_err(wrap)?;
        self.filter_config().validate().map_err(wrap)?;
        Ok(())
    }

    /// Default long-side schedule truncated at, and ending with,
    /// `grid_long_side`.
    pub fn grid_long_sides(&self) -> Vec<usize> {
        let mut v: Vec<usize> = DEFAULT_LONG_SIDES.iter().copied().filter(|&n| n < self.grid_long_side).collect();
        v.push(self.grid_long_side);
        v
    }

    pub fn reg_weights(&self) -> RegWeights {
        RegWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda_deform: self.lambda_deform,
            lambda_focal: self.lambda_focal,
            focal_prior: self.focal_prior,
            normalize_dynamic: self.normalize_dynamic,
            huber: self.huber,
            ..RegWeights::default()
        }
    }

    pub fn solve_options(&self, exec: Exec) -> SolveOptions {
        SolveOptions {
            max_iterations: self.max_iterations,
            function_tolerance: self.function_tolerance,
            gradient_tolerance: self.gradient_tolerance,
            parameter_tolerance: self.parameter_tolerance,
            linear_solver: self.linear_solver,
            loss: self.loss,
            shared_focal: self.shared_focal,
            optimize_focal: self.optimize_focal,
            freeze_scale_handle: self.freeze_scale_handle,
            pose_init: self.pose_init,
            grid_long_sides: self.grid_long_sides(),
            exec,
            ..SolveOptions::default()
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            tau: self.tau,
            half_size: self.filter_half_size,
            lambda_f: self.lambda_f,
            normalize: self.filter_normalize,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_text();
        assert_eq!(PipelineConfig::parse(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), PipelineConfig::KEYS.len());
        assert!(text.contains(&format!("focal_prior = {}\n", default_focal_prior())));
        assert_eq!(cfg.grid_long_sides(), vec![1, 3, 5, 9, 17]);
    }

    #[test]
    fn values_are_parsed_and_typed() {
        let cfg = PipelineConfig::parse("# tuned\n\nlambda_f = 2.5\nloss = euclidean\nhuber = 0.1\n  tau=2  \nseed = 7\n").unwrap();
        assert_eq!(cfg.lambda_f, 2.5);
        assert_eq!(cfg.loss, LossKind::Euclidean);
        assert_eq!(cfg.huber, Some(0.1));
        assert_eq!(cfg.tau, 2);
        assert_eq!(cfg.seed, 7);
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line_and_range() {
        let e = PipelineConfig::parse("tau = 1\nbogus = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        let e = PipelineConfig::parse("lambda_f = abc\n").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("NUM"), "{e}");
        let e = PipelineConfig::parse("fb_threshold = -1\n").unwrap_err().to_string();
        assert!(e.contains("fb_threshold must be > 0"), "{e}");
        let e = PipelineConfig::parse("lambda1 = -0.5\n").unwrap_err().to_string();
        assert!(e.contains("lambda1"), "{e}");
        assert!(PipelineConfig::parse("lambda_f = -1\n").is_err());
        assert!(PipelineConfig::parse("grid_long_side = 0\n").is_err());
        assert!(PipelineConfig::parse("no equals sign\n").is_err());
        assert!(PipelineConfig::parse("lambda_f = inf\n").is_err());
    }

    #[test]
    fn short_schedule() {
        let mut cfg = PipelineConfig {
            grid_long_side: 4,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.grid_long_sides(), vec![1, 3, 4]);
        cfg.grid_long_side = 1;
        assert_eq!(cfg.grid_long_sides(), vec![1]);
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = PipelineConfig::default();
        let o = ConfigOverrides {
            lambda_f: Some("1.5".into()),
            seed: Some("9".into()),
            ..ConfigOverrides::default()
        };
        o.apply(&mut cfg).unwrap();
        assert_eq!((cfg.lambda_f, cfg.seed), (1.5, 9));
    }
}
