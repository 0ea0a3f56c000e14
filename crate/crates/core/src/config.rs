//! Run configuration: flat `key = value` files with `#` comments, layered as
//! defaults, then file, then command-line overrides.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::datasets::{LoadOptions, DEFAULT_TOLERANCE};
use crate::fusion::{FusionMode, RobustConfig};
use crate::predictions::OracleParams;
use crate::semidense::{KeyframePolicy, StereoConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}' expects {expected}, got '{value}'")]
    TypeError {
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("line {line}: expected 'key = value', got '{text}'")]
    Malformed { line: usize, text: String },
    #[error("cannot read config {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where keyframe predictions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionSource {
    /// `<dir>/<token>.dfpred` for each keyframe.
    Directory(PathBuf),
    /// Ground truth plus noise.
    Oracle(OracleSettings),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSettings {
    pub sigma_depth: f64,
    pub sigma_grad: f64,
    pub kappa: f64,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            sigma_depth: 0.3,
            sigma_grad: 0.05,
            kappa: 1.0,
            seed: 0,
        }
    }
}

impl OracleSettings {
    /// Oracle parameters for keyframe `id`; each keyframe draws its own noise.
    pub fn params_for(&self, id: usize, focal: f64) -> OracleParams {
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(id as u64);
        OracleParams::new(self.sigma_depth, self.sigma_grad, seed)
            .with_kappa(self.kappa)
            .with_focal(focal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub sequence: Option<PathBuf>,
    pub out: PathBuf,
    /// DFPRED directory; when unset the oracle is used.
    pub predictions: Option<PathBuf>,
    pub mode: FusionMode,
    pub oracle: OracleSettings,
    /// Multiplier applied to every trajectory translation.
    pub pose_scale: f64,
    pub policy: KeyframePolicy,
    pub robust: RobustConfig,
    pub stereo: StereoConfig,
    pub load: LoadOptions,
    /// Timestamp association tolerance (seconds).
    pub tolerance: f64,
    /// Process at most this many frames (0 = all).
    pub max_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sequence: None,
            out: PathBuf::from("out"),
            predictions: None,
            mode: FusionMode::Full,
            oracle: OracleSettings::default(),
            pose_scale: 1.0,
            policy: KeyframePolicy::default(),
            robust: RobustConfig::default(),
            stereo: StereoConfig::default(),
            load: LoadOptions::default(),
            tolerance: DEFAULT_TOLERANCE,
            max_frames: 0,
        }
    }
}

/// Every accepted key with the kind of value it takes.
pub const KEYS: [(&str, &str); 26] = [
    ("sequence", "path"),
    ("out", "path"),
    ("predictions", "path"),
    ("mode", "mode"),
    ("seed", "integer"),
    ("sigma_depth", "float"),
    ("sigma_grad", "float"),
    ("kappa", "float"),
    ("pose_scale", "float"),
    ("lambda_trans", "float"),
    ("lambda_inliers", "integer"),
    ("texture_threshold", "float"),
    ("max_disparity", "float"),
    ("min_depth", "float"),
    ("min_prior_window", "float"),
    ("delta_semi", "float"),
    ("delta_net", "float"),
    ("delta_grad", "float"),
    ("gn_iterations", "integer"),
    ("cg_tol", "float"),
    ("cg_max_iters", "integer"),
    ("tolerance", "float"),
    ("width", "integer"),
    ("height", "integer"),
    ("depth_scale", "float"),
    ("max_frames", "integer"),
];

fn parse<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::TypeError {
        key: key.to_string(),
        expected,
        value: value.to_string(),
    })
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl PipelineConfig {
    pub fn prediction_source(&self) -> PredictionSource {
        match &self.predictions {
            Some(dir) => PredictionSource::Directory(dir.clone()),
            None => PredictionSource::Oracle(self.oracle),
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "sequence" => self.sequence = optional_path(value),
            "out" => self.out = PathBuf::from(value),
            "predictions" => self.predictions = optional_path(value),
            "mode" => self.mode = parse(key, value, "one of full, nopairwise, lsscale")?,
            "seed" => self.oracle.seed = parse(key, value, "integer")?,
            "sigma_depth" => self.oracle.sigma_depth = parse(key, value, "float")?,
            "sigma_grad" => self.oracle.sigma_grad = parse(key, value, "float")?,
            "kappa" => self.oracle.kappa = parse(key, value, "float")?,
            "pose_scale" => self.pose_scale = parse(key, value, "float")?,
            "lambda_trans" => self.policy.lambda_trans = parse(key, value, "float")?,
            "lambda_inliers" => self.policy.lambda_inliers = parse(key, value, "integer")?,
            "texture_threshold" => self.stereo.texture_threshold = parse(key, value, "float")?,
            "max_disparity" => self.stereo.max_disparity = parse(key, value, "float")?,
            "min_depth" => self.stereo.min_depth = parse(key, value, "float")?,
            "min_prior_window" => self.stereo.min_prior_window = parse(key, value, "float")?,
            "delta_semi" => self.robust.delta_semi = parse(key, value, "float")?,
            "delta_net" => self.robust.delta_net = parse(key, value, "float")?,
            "delta_grad" => self.robust.delta_grad = parse(key, value, "float")?,
            "gn_iterations" => self.robust.gn_iterations = parse(key, value, "integer")?,
            "cg_tol" => self.robust.cg_tol = parse(key, value, "float")?,
            "cg_max_iters" => self.robust.cg_max_iters = parse(key, value, "integer")?,
            "tolerance" => self.tolerance = parse(key, value, "float")?,
            "width" => self.load.width = parse(key, value, "integer")?,
            "height" => self.load.height = parse(key, value, "integer")?,
            "depth_scale" => self.load.depth_scale = parse(key, value, "float")?,
            "max_frames" => self.max_frames = parse(key, value, "integer")?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// `(key, value)` pairs that [`PipelineConfig::set`] reads back to the
    /// same configuration. Unset optional paths are omitted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let mut e = Vec::new();
        if let Some(p) = &self.sequence {
            e.push(("sequence", p.display().to_string()));
        }
        e.push(("out", self.out.display().to_string()));
        if let Some(p) = &self.predictions {
            e.push(("predictions", p.display().to_string()));
        }
        e.extend([
            ("mode", s(self.mode)),
            ("seed", s(self.oracle.seed)),
            ("sigma_depth", s(self.oracle.sigma_depth)),
            ("sigma_grad", s(self.oracle.sigma_grad)),
            ("kappa", s(self.oracle.kappa)),
            ("pose_scale", s(self.pose_scale)),
            ("lambda_trans", s(self.policy.lambda_trans)),
            ("lambda_inliers", s(self.policy.lambda_inliers)),
            ("texture_threshold", s(self.stereo.texture_threshold)),
            ("max_disparity", s(self.stereo.max_disparity)),
            ("min_depth", s(self.stereo.min_depth)),
            ("min_prior_window", s(self.stereo.min_prior_window)),
            ("delta_semi", s(self.robust.delta_semi)),
            ("delta_net", s(self.robust.delta_net)),
            ("delta_grad", s(self.robust.delta_grad)),
            ("gn_iterations", s(self.robust.gn_iterations)),
            ("cg_tol", s(self.robust.cg_tol)),
            ("cg_max_iters", s(self.robust.cg_max_iters)),
            ("tolerance", s(self.tolerance)),
            ("width", s(self.load.width)),
            ("height", s(self.load.height)),
            ("depth_scale", s(self.load.depth_scale)),
            ("max_frames", s(self.max_frames)),
        ]);
        e
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.robust.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let o = &self.oracle;
        if !(o.sigma_depth >= 0.0 && o.sigma_grad >= 0.0 && o.kappa > 0.0) {
            return invalid("oracle sigmas must be >= 0 and kappa > 0".into());
        }
        if !(self.pose_scale > 0.0) || !self.pose_scale.is_finite() {
            return invalid(format!("pose_scale must be positive, got {}", self.pose_scale));
        }
        if !(self.policy.lambda_trans > 0.0) {
            return invalid(format!("lambda_trans must be positive, got {}", self.policy.lambda_trans));
        }
        if !(self.stereo.texture_threshold >= 0.0) || !(self.stereo.min_depth > 0.0) || !(self.stereo.max_disparity > 0.0)
        {
            return invalid("stereo thresholds must be positive".into());
        }
        if self.load.width == 0 || self.load.height == 0 || !(self.load.depth_scale > 0.0) {
            return invalid("width, height and depth_scale must be positive".into());
        }
        if !(self.tolerance >= 0.0) {
            return invalid(format!("tolerance must be >= 0, got {}", self.tolerance));
        }
        Ok(())
    }

    /// Writes `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
            line: n + 1,
            text: raw.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Malformed {
                line: n + 1,
                text: raw.to_string(),
            });
        }
        out.push((n + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies config text on top of `base`.
pub fn apply_text(base: PipelineConfig, text: &str) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = base;
    for (_, k, v) in parse_pairs(text)? {
        cfg.set(&k, &v)?;
    }
    Ok(cfg)
}

/// Defaults, then the file at `path` (if any), then `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = PipelineConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
            path: p.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg = apply_text(cfg, &text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
