//! Experiment configuration, read from a JSON document.
//!
//! Every field has a default, so `{}` is a complete configuration. Bit-widths
//! are integers in `2..=8`; the value [`BYPASS_BITS`] keeps a site in full
//! precision.

use std::path::{Path, PathBuf};

use inlierq_core::calibrate::{CalibConfig, Method, RegionWeights};
use inlierq_core::detector::{ModelConfig, SceneConfig, NUM_LAYERS};
use inlierq_core::inlier::EmOptions;
use serde::{Deserialize, Serialize};

/// Bit-width value meaning "leave in full precision".
pub const BYPASS_BITS: u8 = 32;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config field `{path}`: {message}")]
    Field { path: String, message: String },
}

impl ConfigError {
    fn field(path: &str, message: impl Into<String>) -> Self {
        ConfigError::Field {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Prefix of every row's experiment id.
    pub exp_id: String,
    /// Seeds the detector weights.
    pub seed: u64,
    pub scene: SceneSection,
    pub model: ModelSection,
    pub calib: CalibSection,
    /// Calibration scene `i` uses seed `calib_seed_start + i`.
    pub calib_seed_start: u64,
    /// Held-out scene `j` uses seed `eval_seed_start + j`.
    pub eval_seed_start: u64,
    pub n_eval: usize,
    /// Top-K of the held-out NLL proxy; defaults to `scene.n_objects`.
    pub eval_k: Option<usize>,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            exp_id: "inlierq".to_string(),
            seed: 0,
            scene: SceneSection::default(),
            model: ModelSection::default(),
            calib: CalibSection::default(),
            calib_seed_start: 1_000_000,
            eval_seed_start: 2_000_000,
            n_eval: 32,
            eval_k: None,
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub n_objects: usize,
    pub n_anomalies: usize,
    pub object_intensity: f64,
    pub anomaly_multiplier: f64,
    pub blob_sigma: f64,
    pub noise_amplitude: f64,
    pub margin: usize,
    pub min_separation: usize,
    pub anomaly_clearance: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            height: s.height,
            width: s.width,
            classes: s.classes,
            n_objects: s.n_objects,
            n_anomalies: s.n_anomalies,
            object_intensity: s.object_intensity,
            anomaly_multiplier: s.anomaly_multiplier,
            blob_sigma: s.blob_sigma,
            noise_amplitude: s.noise_amplitude,
            margin: s.margin,
            min_separation: s.min_separation,
            anomaly_clearance: s.anomaly_clearance,
        }
    }
}

impl SceneSection {
    pub fn to_core(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            classes: self.classes,
            n_objects: self.n_objects,
            n_anomalies: self.n_anomalies,
            object_intensity: self.object_intensity,
            anomaly_multiplier: self.anomaly_multiplier,
            blob_sigma: self.blob_sigma,
            noise_amplitude: self.noise_amplitude,
            margin: self.margin,
            min_separation: self.min_separation,
            anomaly_clearance: self.anomaly_clearance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub template_gain: f64,
    pub detail_gain: f64,
    pub logit_bias: f64,
    pub weight_noise: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            template_gain: m.template_gain,
            detail_gain: m.detail_gain,
            logit_bias: m.logit_bias,
            weight_noise: m.weight_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    /// Weight bit-width for every conv layer.
    pub bits_w: u8,
    /// Activation bit-width for every quantization site.
    pub bits_a: u8,
    pub tau: f64,
    pub k: usize,
    /// Refinement candidates evaluated after the min-max initialization.
    pub refine_steps: usize,
    pub lambda_inlier: f64,
    pub lambda_anomaly: f64,
    pub n_calib: usize,
    pub grid_steps: usize,
    pub em_max_iters: usize,
    pub em_tol: f64,
    /// Initial-mean jitter for EM; 0 keeps the deterministic median split.
    pub em_jitter: f64,
    /// Fit the mixture on log-saliency.
    pub log_scores: bool,
}

impl Default for CalibSection {
    fn default() -> Self {
        let c = CalibConfig::default();
        let em = EmOptions::default();
        Self {
            bits_w: 4,
            bits_a: 4,
            tau: c.tau,
            k: c.k,
            refine_steps: c.refine_steps,
            lambda_inlier: c.lambdas.inlier,
            lambda_anomaly: c.lambdas.anomaly,
            n_calib: c.n_calib,
            grid_steps: c.grid_steps,
            em_max_iters: em.max_iters,
            em_tol: em.tol,
            em_jitter: em.init_jitter,
            log_scores: c.log_scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub tau: Vec<f64>,
    pub k: Vec<usize>,
    /// `[bits_w, bits_a]` pairs used by `compare`.
    pub bits: Vec<[u8; 2]>,
    pub methods: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            tau: (1..=9).map(|i| f64::from(i) / 10.0).collect(),
            k: vec![3, 6, 15, 30],
            bits: vec![[4, 4]],
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Both,
}

impl ReportFormat {
    pub fn csv(self) -> bool {
        matches!(self, ReportFormat::Csv | ReportFormat::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, ReportFormat::Json | ReportFormat::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub format: ReportFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            format: ReportFormat::Both,
        }
    }
}

/// Bit-width field value to an optional bit-width.
pub fn bits_option(bits: u8) -> Option<u8> {
    (bits != BYPASS_BITS).then_some(bits)
}

fn check_bits(path: &str, bits: u8) -> Result<(), ConfigError> {
    if bits == BYPASS_BITS || (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(ConfigError::field(
            path,
            format!("bit-width {bits} is not in 2..=8 or {BYPASS_BITS}"),
        ))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::field(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Calibration scene seeds.
    pub fn calib_seeds(&self) -> std::ops::Range<u64> {
        self.calib_seed_start..self.calib_seed_start + self.calib.n_calib as u64
    }

    /// Held-out scene seeds.
    pub fn eval_seeds(&self) -> std::ops::Range<u64> {
        self.eval_seed_start..self.eval_seed_start + self.n_eval as u64
    }

    pub fn eval_k(&self) -> usize {
        self.eval_k.unwrap_or(self.scene.n_objects)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: self.scene.classes,
            template_gain: self.model.template_gain,
            detail_gain: self.model.detail_gain,
            logit_bias: self.model.logit_bias,
            weight_noise: self.model.weight_noise,
        }
    }

    /// Core calibration settings at an explicit sweep point.
    pub fn calib_config(&self, bits_w: u8, bits_a: u8, tau: f64, k: usize) -> CalibConfig {
        let c = &self.calib;
        CalibConfig {
            bits_weights: vec![bits_option(bits_w); NUM_LAYERS],
            bits_acts: vec![bits_option(bits_a); NUM_LAYERS],
            tau,
            k,
            refine_steps: c.refine_steps,
            lambdas: RegionWeights {
                inlier: c.lambda_inlier,
                anomaly: c.lambda_anomaly,
            },
            n_calib: c.n_calib,
            grid_steps: c.grid_steps,
            seed: self.seed,
            em: EmOptions {
                max_iters: c.em_max_iters,
                tol: c.em_tol,
                init_jitter: c.em_jitter,
                ..EmOptions::default()
            },
            log_scores: c.log_scores,
        }
    }

    pub fn methods(&self) -> Result<Vec<Method>, ConfigError> {
        self.sweep
            .methods
            .iter()
            .enumerate()
            .map(|(i, name)| {
                Method::from_name(name).ok_or_else(|| {
                    ConfigError::field(&format!("sweep.methods[{i}]"), format!("unknown method `{name}`"))
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scene
            .to_core()
            .validate()
            .map_err(|e| ConfigError::field("scene", e.to_string()))?;
        let m = &self.model;
        for (name, v) in [
            ("model.template_gain", m.template_gain),
            ("model.detail_gain", m.detail_gain),
            ("model.logit_bias", m.logit_bias),
            ("model.weight_noise", m.weight_noise),
        ] {
            if !v.is_finite() {
                return Err(ConfigError::field(name, "must be finite"));
            }
        }
        if m.weight_noise < 0.0 {
            return Err(ConfigError::field("model.weight_noise", "must be non-negative"));
        }
        check_bits("calib.bits_w", self.calib.bits_w)?;
        check_bits("calib.bits_a", self.calib.bits_a)?;
        let plane = self.scene.height * self.scene.width;
        if self.calib.k == 0 || self.calib.k > plane {
            return Err(ConfigError::field("calib.k", format!("must be in 1..={plane}")));
        }
        if self.calib.em_jitter < 0.0 || !self.calib.em_jitter.is_finite() {
            return Err(ConfigError::field("calib.em_jitter", "must be finite and non-negative"));
        }
        self.calib_config(self.calib.bits_w, self.calib.bits_a, self.calib.tau, self.calib.k)
            .validate()
            .map_err(|e| ConfigError::field("calib", e.to_string()))?;
        if self.n_eval == 0 {
            return Err(ConfigError::field("n_eval", "must be at least 1"));
        }
        let eval_k = self.eval_k();
        if eval_k == 0 || eval_k > plane {
            return Err(ConfigError::field("eval_k", format!("must be in 1..={plane}")));
        }
        let (c, e) = (self.calib_seeds(), self.eval_seeds());
        if c.start < e.end && e.start < c.end {
            return Err(ConfigError::field(
                "eval_seed_start",
                format!("held-out seeds {e:?} overlap calibration seeds {c:?}"),
            ));
        }
        for (i, t) in self.sweep.tau.iter().enumerate() {
            if !(0.0..=1.0).contains(t) {
                return Err(ConfigError::field(&format!("sweep.tau[{i}]"), "must be in [0, 1]"));
            }
        }
        for (i, k) in self.sweep.k.iter().enumerate() {
            if *k == 0 || *k > plane {
                return Err(ConfigError::field(
                    &format!("sweep.k[{i}]"),
                    format!("must be in 1..={plane}"),
                ));
            }
        }
        for (i, [w, a]) in self.sweep.bits.iter().enumerate() {
            check_bits(&format!("sweep.bits[{i}][0]"), *w)?;
            check_bits(&format!("sweep.bits[{i}][1]"), *a)?;
        }
        self.methods()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn errors_carry_field_paths() {
        let err = ExperimentConfig::from_json(r#"{"calib": {"tau": "high"}}"#).unwrap_err();
        assert!(err.to_string().contains("calib.tau"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"calib": {"tau": 1.5}}"#).unwrap_err();
        assert!(err.to_string().contains("calib"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"sweep": {"methods": ["inlierq", "brecq"]}}"#).unwrap_err();
        assert!(err.to_string().contains("sweep.methods[1]"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"scene": {"heigth": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("scene"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"calib": {"bits_a": 9}}"#).unwrap_err();
        assert!(err.to_string().contains("calib.bits_a"), "{err}");
    }

    #[test]
    fn overlapping_seed_ranges_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"calib_seed_start": 10, "eval_seed_start": 60}"#).unwrap_err();
        assert!(err.to_string().contains("eval_seed_start"), "{err}");
        assert!(ExperimentConfig::from_json(r#"{"calib_seed_start": 10, "eval_seed_start": 74}"#).is_ok());
    }

    #[test]
    fn bypass_bits_map_to_none() {
        let cfg = ExperimentConfig::default();
        let c = cfg.calib_config(32, 8, 0.5, 3);
        assert_eq!(c.bits_weights, vec![None, None]);
        assert_eq!(c.bits_acts, vec![Some(8), Some(8)]);
    }
}
