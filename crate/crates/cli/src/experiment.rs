//! Experiment orchestration: sweep points, calibration and evaluation.

use std::cell::OnceCell;
use std::time::Instant;

use inlierq_core::calibrate::{
    calibrate_model, collect_statistics, element_mask, CalibrationOutcome, LayerStatistics, Method,
};
use inlierq_core::detector::{generate_scene, DetectorModel, Scene, NUM_LAYERS};
use inlierq_core::rng::SeededRng;
use inlierq_core::saliency::TopKLossSpec;
use inlierq_core::tensor::moments_of;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::metrics::{evaluate, Evaluation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Calibrate,
    Compare,
    SweepTau,
    SweepK,
}

/// One calibration setting to run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub method: Method,
    pub bits_w: u8,
    pub bits_a: u8,
    pub tau: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub layer_mse: f64,
    pub rel_err: f64,
    pub skew_all: f64,
    pub skew_inlier: f64,
    pub inlier_frac: f64,
}

/// Result of one sweep point. Failed points carry a reason and no metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRecord {
    pub exp_id: String,
    pub method: String,
    pub bits_w: u8,
    pub bits_a: u8,
    pub tau: f64,
    pub k: usize,
    pub layers: Vec<LayerRecord>,
    pub nll_proxy: Option<f64>,
    pub peak_hit: Option<f64>,
    pub failed: bool,
    pub reason: String,
    pub wall_time_s: f64,
}

#[derive(Debug, thiserror::Error)]
#[error("experiment setup failed: {0}")]
pub struct SetupError(#[from] pub inlierq_core::Error);

/// Sweep points of `verb`, ordered by method and then sweep value.
pub fn sweep_points(cfg: &ExperimentConfig, verb: Verb) -> Vec<SweepPoint> {
    let c = &cfg.calib;
    let at = |method, bits_w, bits_a, tau, k| SweepPoint {
        method,
        bits_w,
        bits_a,
        tau,
        k,
    };
    let mut points: Vec<SweepPoint> = match verb {
        Verb::Calibrate => vec![at(Method::InlierQ, c.bits_w, c.bits_a, c.tau, c.k)],
        Verb::Compare => {
            let methods = cfg.methods().unwrap_or_default();
            methods
                .iter()
                .flat_map(|&m| cfg.sweep.bits.iter().map(move |&[w, a]| at(m, w, a, c.tau, c.k)))
                .collect()
        }
        Verb::SweepTau => cfg
            .sweep
            .tau
            .iter()
            .map(|&t| at(Method::InlierQ, c.bits_w, c.bits_a, t, c.k))
            .collect(),
        Verb::SweepK => cfg
            .sweep
            .k
            .iter()
            .map(|&k| at(Method::InlierQ, c.bits_w, c.bits_a, c.tau, k))
            .collect(),
    };
    points.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.bits_w.cmp(&b.bits_w))
            .then(a.bits_a.cmp(&b.bits_a))
            .then(a.tau.total_cmp(&b.tau))
            .then(a.k.cmp(&b.k))
    });
    points
}

/// Model and scene sets shared by every point of an experiment.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub model: DetectorModel,
    pub calib_scenes: Vec<Scene>,
    pub eval_scenes: Vec<Scene>,
    fp_stats: OnceCell<Vec<LayerStatistics>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointOutcome {
    pub calibration: CalibrationOutcome,
    pub evaluation: Evaluation,
    pub layers: Vec<LayerRecord>,
}

fn scenes(cfg: &ExperimentConfig, seeds: std::ops::Range<u64>) -> inlierq_core::Result<Vec<Scene>> {
    let scene_cfg = cfg.scene.to_core();
    seeds
        .map(|s| generate_scene(&scene_cfg, &mut SeededRng::new(s)))
        .collect()
}

impl Context {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, SetupError> {
        let model = DetectorModel::seeded(&cfg.model_config(), &mut SeededRng::new(cfg.seed))?;
        Ok(Self {
            model,
            calib_scenes: scenes(cfg, cfg.calib_seeds())?,
            eval_scenes: scenes(cfg, cfg.eval_seeds())?,
            cfg: cfg.clone(),
            fp_stats: OnceCell::new(),
        })
    }

    fn fp_stats(&self, k: usize) -> inlierq_core::Result<&[LayerStatistics]> {
        if self.fp_stats.get().is_none() {
            let spec = TopKLossSpec::new(k, self.model.classes());
            let stats = collect_statistics(&self.model, &self.calib_scenes, &spec)?;
            let _ = self.fp_stats.set(stats);
        }
        Ok(self.fp_stats.get().expect("initialized above"))
    }

    /// Calibrates at `point` and evaluates on the held-out scenes.
    pub fn run_point(&self, point: &SweepPoint) -> inlierq_core::Result<PointOutcome> {
        let calib = self.cfg.calib_config(point.bits_w, point.bits_a, point.tau, point.k);
        let calibration = calibrate_model(&self.model, &self.calib_scenes, &calib, point.method)?;
        let evaluation = evaluate(
            &self.model,
            &self.eval_scenes,
            &calibration.weight_params,
            &calibration.act_params,
            self.cfg.eval_k(),
        )?;
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        for l in 0..NUM_LAYERS {
            let (skew_all, skew_inlier, inlier_frac) = match &calibration.layers[l] {
                Some(lc) => {
                    let acts = &lc.stats.activations;
                    let mask = element_mask(acts, &lc.mask.mask)?;
                    let inliers: Vec<f64> = acts
                        .data()
                        .iter()
                        .zip(&mask)
                        .filter(|(_, m)| **m)
                        .map(|(v, _)| *v)
                        .collect();
                    (
                        moments_of(acts.data())?.skewness,
                        moments_of(&inliers)?.skewness,
                        lc.mask.inlier_fraction(),
                    )
                }
                None => {
                    let skew = moments_of(self.fp_stats(point.k)?[l].activations.data())?.skewness;
                    (skew, skew, 1.0)
                }
            };
            layers.push(LayerRecord {
                layer: l,
                layer_mse: evaluation.layer_mse[l],
                rel_err: evaluation.rel_err[l],
                skew_all,
                skew_inlier,
                inlier_frac,
            });
        }
        Ok(PointOutcome {
            calibration,
            evaluation,
            layers,
        })
    }

    /// Runs every point; failures become failed records.
    pub fn run(&self, points: &[SweepPoint]) -> Vec<ExperimentRecord> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let start = Instant::now();
                let result = self.run_point(p);
                let mut rec = ExperimentRecord {
                    exp_id: format!("{}-{:03}", self.cfg.exp_id, i),
                    method: p.method.name().to_string(),
                    bits_w: p.bits_w,
                    bits_a: p.bits_a,
                    tau: p.tau,
                    k: p.k,
                    layers: Vec::new(),
                    nll_proxy: None,
                    peak_hit: None,
                    failed: false,
                    reason: String::new(),
                    wall_time_s: 0.0,
                };
                match result {
                    Ok(out) => {
                        rec.layers = out.layers;
                        rec.nll_proxy = Some(out.evaluation.nll_proxy);
                        rec.peak_hit = Some(out.evaluation.peak_hit);
                    }
                    Err(e) => {
                        rec.failed = true;
                        rec.reason = e.to_string();
                    }
                }
                rec.wall_time_s = start.elapsed().as_secs_f64();
                rec
            })
            .collect()
    }
}

/// Builds the context and runs every point of `verb`.
pub fn run_experiment(cfg: &ExperimentConfig, verb: Verb) -> Result<Vec<ExperimentRecord>, SetupError> {
    let ctx = Context::new(cfg)?;
    Ok(ctx.run(&sweep_points(cfg, verb)))
}
