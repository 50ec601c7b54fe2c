//! Layer-wise activation calibration.
//!
//! Weights are quantized first with symmetric min-max parameters. Activation
//! sites are then calibrated in forward order: statistics for site `l` come
//! from the model with every earlier site already fake-quantized. Each site
//! starts from min-max parameters over its inlier volumes and refines the
//! scale by grid search on the Fisher-weighted quantization error
//!
//! ```text
//! lambda_I * mean_{v in I} sum_c F[c, v] dx[c, v]^2 + lambda_A * mean_{v in A} (same)
//! ```
//!
//! where `F` is the diagonal of the expected squared loss gradient and `dx`
//! the fake-quantization perturbation. Volumes are `(sample, row, col)`
//! triples and the mask is shared by every channel of a volume.

use alloc::vec;
use alloc::vec::Vec;

use crate::detector::{backward_heatmap, forward_quantized, DetectorModel, Scene, NUM_LAYERS};
use crate::error::{Error, Result};
use crate::inlier::{em_fit, inlier_mask_with, kmeans2_fit, EmFit, EmOptions, InlierMask, KMeansFit};
use crate::quant::{calibrate_minmax, grid_shrink, scale_grid, QuantParams, MAX_BITS, MIN_BITS};
use crate::rng::SeededRng;
use crate::saliency::{loss_gradient, volume_saliency, SaliencyField, TopKLossSpec};
use crate::tensor::{exact_sum, Tensor};

/// Offset added before taking the log of saliency scores.
pub const LOG_SCORE_OFFSET: f64 = 1e-12;

const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// Mixture-posterior inlier masks with Fisher-weighted refinement.
    InlierQ,
    /// Plain min-max over every volume.
    BaselineMinMax,
    /// Fisher-weighted refinement over every volume.
    BaselineAllVolume,
    /// Like [`Method::InlierQ`] with 2-means masks instead of the mixture.
    KMeansAblation,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::InlierQ,
        Method::BaselineMinMax,
        Method::BaselineAllVolume,
        Method::KMeansAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::InlierQ => "inlierq",
            Method::BaselineMinMax => "baseline_minmax",
            Method::BaselineAllVolume => "baseline_allvol",
            Method::KMeansAblation => "kmeans_ablation",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

/// Weights of the inlier and anomaly terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionWeights {
    pub inlier: f64,
    pub anomaly: f64,
}

impl RegionWeights {
    pub const INLIER_ONLY: RegionWeights = RegionWeights {
        inlier: 1.0,
        anomaly: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.inlier >= 0.0 && self.anomaly >= 0.0 && self.inlier.is_finite() && self.anomaly.is_finite()) {
            return Err(Error::InvalidConfig("region weights must be finite and non-negative"));
        }
        if self.inlier == 0.0 && self.anomaly == 0.0 {
            return Err(Error::InvalidConfig("region weights must not both be zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibConfig {
    /// Per conv layer; `None` keeps full precision.
    pub bits_weights: Vec<Option<u8>>,
    /// Per activation site; `None` keeps full precision.
    pub bits_acts: Vec<Option<u8>>,
    pub tau: f64,
    /// Top-K entries per heatmap channel in the calibration loss.
    pub k: usize,
    /// Refinement candidates evaluated after the min-max initialization.
    pub refine_steps: usize,
    pub lambdas: RegionWeights,
    /// Number of calibration scenes the experiment runner generates.
    pub n_calib: usize,
    pub grid_steps: usize,
    /// Seeds the (normally unused) mixture initialization jitter.
    pub seed: u64,
    pub em: EmOptions,
    /// Fit the mixture on `ln(score + LOG_SCORE_OFFSET)` instead of raw scores.
    pub log_scores: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            bits_weights: vec![Some(4); NUM_LAYERS],
            bits_acts: vec![Some(4); NUM_LAYERS],
            tau: 0.5,
            k: 3,
            refine_steps: 15,
            lambdas: RegionWeights::INLIER_ONLY,
            n_calib: 64,
            grid_steps: 15,
            seed: 0,
            em: EmOptions::default(),
            log_scores: false,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits_weights.len() != NUM_LAYERS || self.bits_acts.len() != NUM_LAYERS {
            return Err(Error::InvalidConfig("bit-width lists must have one entry per layer"));
        }
        for b in self.bits_weights.iter().chain(&self.bits_acts).flatten() {
            if !(MIN_BITS..=MAX_BITS).contains(b) {
                return Err(Error::InvalidBits(*b));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidThreshold(self.tau));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1"));
        }
        if self.n_calib == 0 {
            return Err(Error::InvalidConfig("n_calib must be at least 1"));
        }
        if self.grid_steps == 0 {
            return Err(Error::InvalidConfig("grid_steps must be at least 1"));
        }
        if self.em.max_iters == 0
            || self.em.tol.is_nan()
            || self.em.tol < 0.0
            || self.em.var_floor.is_nan()
            || self.em.var_floor <= 0.0
        {
            return Err(Error::InvalidConfig("invalid EM options"));
        }
        self.lambdas.validate()
    }

    fn score_transform(&self) -> impl Fn(f64) -> f64 {
        let log = self.log_scores;
        move |s| if log { libm::log(s + LOG_SCORE_OFFSET) } else { s }
    }
}

/// Pooled statistics of one activation site over the calibration scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStatistics {
    pub layer: usize,
    /// Shape `(N, C, H, W)`.
    pub activations: Tensor,
    /// Loss gradients, shape `(N, C, H, W)`.
    pub gradients: Tensor,
    /// Per-volume saliency, shape `(N, H, W)`.
    pub saliency: Tensor,
}

impl LayerStatistics {
    pub fn samples(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn saliency_field(&self) -> SaliencyField {
        SaliencyField {
            scores: self.saliency.clone(),
            layer: self.layer,
        }
    }
}

/// Full-precision statistics for every activation site.
pub fn collect_statistics(
    model: &DetectorModel,
    scenes: &[Scene],
    spec: &TopKLossSpec,
) -> Result<Vec<LayerStatistics>> {
    collect_statistics_quantized(model, scenes, spec, &[None; NUM_LAYERS], &[None; NUM_LAYERS])
}

/// Runs forward, top-K loss, backward and saliency on each scene and stacks
/// the per-scene results along a new leading sample axis.
pub fn collect_statistics_quantized(
    model: &DetectorModel,
    scenes: &[Scene],
    spec: &TopKLossSpec,
    weight_params: &[Option<QuantParams>],
    act_params: &[Option<QuantParams>],
) -> Result<Vec<LayerStatistics>> {
    if scenes.is_empty() {
        return Err(Error::Empty);
    }
    let qmodel = model.with_quantized_weights(weight_params)?;
    let none = [None; NUM_LAYERS];
    let mut acts: Vec<Vec<f64>> = vec![Vec::new(); NUM_LAYERS];
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); NUM_LAYERS];
    let mut sal: Vec<Vec<f64>> = vec![Vec::new(); NUM_LAYERS];
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    for scene in scenes {
        let (heat, trace) = forward_quantized(&qmodel, scene, &none, act_params)?;
        let up = loss_gradient(&heat, spec)?;
        let gtrace = backward_heatmap(&qmodel, &trace, &up)?;
        if shapes.is_empty() {
            shapes = trace.activations.iter().map(|a| a.shape().to_vec()).collect();
        }
        for l in 0..NUM_LAYERS {
            if trace.activations[l].shape() != shapes[l].as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: shapes[l].clone(),
                    actual: trace.activations[l].shape().to_vec(),
                });
            }
            acts[l].extend_from_slice(trace.activations[l].data());
            grads[l].extend_from_slice(gtrace.gradients[l].data());
            sal[l].extend_from_slice(volume_saliency(&gtrace, l)?.scores.data());
        }
    }
    let n = scenes.len();
    let mut out = Vec::with_capacity(NUM_LAYERS);
    for (l, ((a, g), s)) in acts.into_iter().zip(grads).zip(sal).enumerate() {
        let mut shape = vec![n];
        shape.extend_from_slice(&shapes[l]);
        out.push(LayerStatistics {
            layer: l,
            activations: Tensor::new(shape.clone(), a)?,
            gradients: Tensor::new(shape.clone(), g)?,
            saliency: Tensor::new(vec![n, shape[2], shape[3]], s)?,
        });
    }
    Ok(out)
}

/// Elementwise mean over the leading sample axis of squared gradients.
///
/// `gradients` has shape `(N, ...)`; the result drops the sample axis.
pub fn fim_diag(gradients: &Tensor) -> Result<Tensor> {
    let shape = gradients.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    let n = shape[0];
    let per = gradients.len() / n;
    let g = gradients.data();
    let data = (0..per)
        .map(|i| exact_sum((0..n).map(|s| g[s * per + i] * g[s * per + i])) / n as f64)
        .collect();
    Tensor::new(shape[1..].to_vec(), data)
}

/// `dequantize(quantize(x)) - x` for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
}

impl Perturbation {
    pub fn new(x: &Tensor, params: &QuantParams) -> Result<Self> {
        if let Some(index) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            delta: x.map(|v| params.fake_quantize_value(v) - v)?,
        })
    }
}

/// Splits `x` of shape `(C, H, W)` or `(N, C, H, W)` into
/// `(samples, channels, plane)` after checking `fim` and `mask` agree.
fn layout(x: &Tensor, fim: &Tensor, mask_len: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    let (n, c, h, w) = match s.len() {
        3 => (1, s[0], s[1], s[2]),
        4 => (s[0], s[1], s[2], s[3]),
        _ => return Err(Error::InvalidShape(s.to_vec())),
    };
    if fim.shape() != [c, h, w] {
        return Err(Error::ShapeMismatch {
            expected: vec![c, h, w],
            actual: fim.shape().to_vec(),
        });
    }
    if mask_len != n * h * w {
        return Err(Error::ShapeMismatch {
            expected: vec![n, h, w],
            actual: vec![mask_len],
        });
    }
    Ok((n, c, h * w))
}

/// Fisher-weighted squared perturbation of `candidate`, averaged separately
/// over inlier and anomaly volumes and combined with `lambdas`.
///
/// An empty region contributes nothing. An empty inlier set with a zero
/// anomaly weight is an error.
pub fn inlier_objective(
    x: &Tensor,
    candidate: &QuantParams,
    fim: &Tensor,
    mask: &[bool],
    lambdas: RegionWeights,
) -> Result<f64> {
    let (n, c, plane) = layout(x, fim, mask.len())?;
    let inliers = mask.iter().filter(|&&m| m).count();
    let anomalies = mask.len() - inliers;
    if inliers == 0 && lambdas.anomaly == 0.0 {
        return Err(Error::EmptyInlierSet);
    }
    let dx = Perturbation::new(x, candidate)?.delta;
    let (dx, f) = (dx.data(), fim.data());
    let weighted = |want: bool| {
        exact_sum((0..n).flat_map(|s| {
            (0..plane)
                .filter(move |&v| mask[s * plane + v] == want)
                .flat_map(move |v| {
                    (0..c).map(move |ch| {
                        let d = dx[(s * c + ch) * plane + v];
                        f[ch * plane + v] * d * d
                    })
                })
        }))
    };
    let mut total = 0.0;
    if inliers > 0 && lambdas.inlier != 0.0 {
        total += lambdas.inlier * weighted(true) / inliers as f64;
    }
    if anomalies > 0 && lambdas.anomaly != 0.0 {
        total += lambdas.anomaly * weighted(false) / anomalies as f64;
    }
    Ok(total)
}

/// Expands a per-volume mask to one flag per element of `x` (shape
/// `(C, H, W)` or `(N, C, H, W)`).
pub fn element_mask(x: &Tensor, mask: &[bool]) -> Result<Vec<bool>> {
    let s = x.shape();
    let (n, c, plane) = match s.len() {
        3 => (1, s[0], s[1] * s[2]),
        4 => (s[0], s[1], s[2] * s[3]),
        _ => return Err(Error::InvalidShape(s.to_vec())),
    };
    if mask.len() != n * plane {
        return Err(Error::ShapeMismatch {
            expected: vec![n * plane],
            actual: vec![mask.len()],
        });
    }
    let mut out = Vec::with_capacity(x.len());
    for sample in mask.chunks(plane) {
        for _ in 0..c {
            out.extend_from_slice(sample);
        }
    }
    Ok(out)
}

/// Mean squared fake-quantization error over the elements where `mask` is
/// set (all elements when `None`); 0 for an empty selection.
pub fn masked_mse(x: &Tensor, params: &QuantParams, mask: Option<&[bool]>) -> Result<f64> {
    let dx = Perturbation::new(x, params)?.delta;
    let selected = |i: usize| mask.is_none_or(|m| m[i]);
    let count = (0..x.len()).filter(|&i| selected(i)).count();
    if count == 0 {
        return Ok(0.0);
    }
    let sse = exact_sum(
        dx.data()
            .iter()
            .enumerate()
            .filter(|(i, _)| selected(*i))
            .map(|(_, d)| d * d),
    );
    Ok(sse / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateEval {
    /// Range shrink factor relative to the min-max initialization.
    pub shrink: f64,
    pub params: QuantParams,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub layer: usize,
    pub params: QuantParams,
    pub objective: f64,
    /// Quantization MSE of `params` over inlier elements.
    pub inlier_mse: f64,
    /// Quantization MSE of `params` over every element.
    pub all_mse: f64,
    pub inlier_fraction: f64,
    /// Every evaluated candidate in grid order (widest first).
    pub curve: Vec<CandidateEval>,
    /// Min-max parameters over every element of the same data.
    pub reference_minmax: QuantParams,
    /// Quantization MSE of `reference_minmax` over inlier elements.
    pub reference_inlier_mse: f64,
}

/// Per-layer knobs of [`optimize_layer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerOptions {
    pub bits: u8,
    pub refine_steps: usize,
    pub grid_steps: usize,
    pub lambdas: RegionWeights,
}

impl LayerOptions {
    pub fn from_config(cfg: &CalibConfig, layer: usize) -> Result<Self> {
        let bits = cfg
            .bits_acts
            .get(layer)
            .ok_or(Error::BadLayer {
                layer,
                count: cfg.bits_acts.len(),
            })?
            .ok_or(Error::InvalidConfig("layer is not quantized"))?;
        Ok(Self {
            bits,
            refine_steps: cfg.refine_steps,
            grid_steps: cfg.grid_steps,
            lambdas: cfg.lambdas,
        })
    }
}

/// Min-max initialization over the inlier volumes followed by grid search.
///
/// The candidates are the first `1 + min(refine_steps, grid_steps - 1)`
/// entries of [`scale_grid`]; the lowest objective wins and ties keep the
/// earlier, wider candidate.
pub fn optimize_layer(
    x: &Tensor,
    fim: &Tensor,
    mask: &[bool],
    opts: &LayerOptions,
    layer: usize,
) -> Result<LayerResult> {
    layout(x, fim, mask.len())?;
    opts.lambdas.validate()?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyInlierSet);
    }
    let elements = element_mask(x, mask)?;
    let base = calibrate_minmax(x, opts.bits, Some(&elements))?;
    let grid_steps = opts.grid_steps.max(1);
    let evaluated = 1 + opts.refine_steps.min(grid_steps - 1);
    let candidates = scale_grid(&base, grid_steps)?;
    let mut curve = Vec::with_capacity(evaluated);
    for (i, params) in candidates.into_iter().take(evaluated).enumerate() {
        curve.push(CandidateEval {
            shrink: grid_shrink(i, grid_steps),
            params,
            objective: inlier_objective(x, &params, fim, mask, opts.lambdas)?,
        });
    }
    let mut best = 0;
    for (i, c) in curve.iter().enumerate() {
        if c.objective < curve[best].objective {
            best = i;
        }
    }
    let chosen = curve[best];
    let reference_minmax = calibrate_minmax(x, opts.bits, None)?;
    Ok(LayerResult {
        layer,
        params: chosen.params,
        objective: chosen.objective,
        inlier_mse: masked_mse(x, &chosen.params, Some(&elements))?,
        all_mse: masked_mse(x, &chosen.params, None)?,
        inlier_fraction: mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64,
        curve,
        reference_minmax,
        reference_inlier_mse: masked_mse(x, &reference_minmax, Some(&elements))?,
    })
}

/// [`optimize_layer`] over every volume with weights `(1, 0)`.
pub fn optimize_baseline_layer(x: &Tensor, fim: &Tensor, opts: &LayerOptions, layer: usize) -> Result<LayerResult> {
    let s = x.shape();
    let volumes = match s.len() {
        3 => s[1] * s[2],
        4 => s[0] * s[2] * s[3],
        _ => return Err(Error::InvalidShape(s.to_vec())),
    };
    let opts = LayerOptions {
        lambdas: RegionWeights::INLIER_ONLY,
        ..*opts
    };
    optimize_layer(x, fim, &vec![true; volumes], &opts, layer)
}

/// Everything recorded while calibrating one activation site.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    pub result: LayerResult,
    pub stats: LayerStatistics,
    /// Shape of one sample, `(C, H, W)`.
    pub fim: Tensor,
    pub mask: InlierMask,
    pub mixture: Option<EmFit>,
    pub kmeans: Option<KMeansFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub method: Method,
    pub weight_params: Vec<Option<QuantParams>>,
    pub act_params: Vec<Option<QuantParams>>,
    /// `None` for bypassed sites.
    pub layers: Vec<Option<LayerCalibration>>,
}

impl CalibrationOutcome {
    pub fn layer_result(&self, layer: usize) -> Option<&LayerResult> {
        self.layers.get(layer)?.as_ref().map(|l| &l.result)
    }
}

/// Inlier mask of one site's pooled saliency for `method`.
pub fn method_mask(
    method: Method,
    stats: &LayerStatistics,
    cfg: &CalibConfig,
    rng: &mut SeededRng,
) -> Result<(InlierMask, Option<EmFit>, Option<KMeansFit>)> {
    let field = stats.saliency_field();
    let transform = cfg.score_transform();
    match method {
        Method::BaselineMinMax | Method::BaselineAllVolume => {
            let n = stats.saliency.len();
            let all = InlierMask {
                mask: vec![true; n],
                tau: 0.0,
                posterior: Tensor::filled(stats.saliency.shape().to_vec(), 1.0)?,
            };
            Ok((all, None, None))
        }
        Method::InlierQ => {
            let scores: Vec<f64> = field.scores.data().iter().map(|&s| transform(s)).collect();
            let fit = em_fit(&scores, &cfg.em, rng)?;
            let mask = inlier_mask_with(&fit.model, &field, cfg.tau, &transform)?;
            Ok((mask, Some(fit), None))
        }
        Method::KMeansAblation => {
            let scores: Vec<f64> = field.scores.data().iter().map(|&s| transform(s)).collect();
            let fit = kmeans2_fit(&scores, KMEANS_MAX_ITERS)?;
            let mask = fit.mask_with(&field, &transform)?;
            Ok((mask, None, Some(fit)))
        }
    }
}

/// Calibrates weights and then every quantized activation site in forward
/// order.
pub fn calibrate_model(
    model: &DetectorModel,
    scenes: &[Scene],
    cfg: &CalibConfig,
    method: Method,
) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Empty);
    }
    let spec = TopKLossSpec::new(cfg.k, model.classes());
    let weight_params = model.weight_minmax_params(&cfg.bits_weights)?;
    let mut act_params: Vec<Option<QuantParams>> = vec![None; NUM_LAYERS];
    let mut layers = Vec::with_capacity(NUM_LAYERS);
    let mut rng = SeededRng::new(cfg.seed);
    for l in 0..NUM_LAYERS {
        if cfg.bits_acts[l].is_none() {
            layers.push(None);
            continue;
        }
        let stats = collect_statistics_quantized(model, scenes, &spec, &weight_params, &act_params)?.swap_remove(l);
        let fim = fim_diag(&stats.gradients)?;
        let (mask, mixture, kmeans) = method_mask(method, &stats, cfg, &mut rng)?;
        let mut opts = LayerOptions::from_config(cfg, l)?;
        let result = match method {
            Method::BaselineMinMax => {
                opts.refine_steps = 0;
                opts.lambdas = RegionWeights::INLIER_ONLY;
                optimize_layer(&stats.activations, &fim, &mask.mask, &opts, l)?
            }
            Method::BaselineAllVolume => optimize_baseline_layer(&stats.activations, &fim, &opts, l)?,
            Method::InlierQ | Method::KMeansAblation => optimize_layer(&stats.activations, &fim, &mask.mask, &opts, l)?,
        };
        act_params[l] = Some(result.params);
        layers.push(Some(LayerCalibration {
            result,
            stats,
            fim,
            mask,
            mixture,
            kmeans,
        }));
    }
    Ok(CalibrationOutcome {
        method,
        weight_params,
        act_params,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{generate_scene, ModelConfig, SceneConfig};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn opts(bits: u8, refine: usize) -> LayerOptions {
        LayerOptions {
            bits,
            refine_steps: refine,
            grid_steps: 15,
            lambdas: RegionWeights::INLIER_ONLY,
        }
    }

    fn scenes(n: usize, first_seed: u64) -> Vec<Scene> {
        (0..n)
            .map(|i| generate_scene(&SceneConfig::default(), &mut SeededRng::new(first_seed + i as u64)).unwrap())
            .collect()
    }

    fn model(seed: u64) -> DetectorModel {
        DetectorModel::seeded(&ModelConfig::default(), &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn fim_examples() {
        let z = fim_diag(&Tensor::zeros(vec![3, 2, 1, 1]).unwrap()).unwrap();
        assert_eq!(z.shape(), &[2, 1, 1]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let one = fim_diag(&t(&[1, 1, 1, 2], &[-3.0, 0.5])).unwrap();
        assert_eq!(one.data(), &[9.0, 0.25]);
        let two = fim_diag(&t(&[2, 1, 1, 1], &[1.0, 3.0])).unwrap();
        assert_eq!(two.data(), &[5.0]);
    }

    #[test]
    fn objective_trivial_cases() {
        let x = t(&[1, 1, 2], &[0.0, 1.0]);
        let exact = QuantParams::unsigned(1.0, 0, 4).unwrap();
        let fim = t(&[1, 1, 2], &[2.0, 3.0]);
        assert_eq!(
            inlier_objective(&x, &exact, &fim, &[true, true], RegionWeights::INLIER_ONLY).unwrap(),
            0.0
        );
        let coarse = QuantParams::unsigned(0.3, 0, 2).unwrap();
        let zero = Tensor::zeros(vec![1, 1, 2]).unwrap();
        assert_eq!(
            inlier_objective(&x, &coarse, &zero, &[true, false], RegionWeights::INLIER_ONLY).unwrap(),
            0.0
        );
        assert_eq!(
            inlier_objective(&x, &coarse, &fim, &[false, false], RegionWeights::INLIER_ONLY),
            Err(Error::EmptyInlierSet)
        );
    }

    #[test]
    fn objective_matches_hand_sum() {
        // Two channels, 1x2 plane; volume 0 is an inlier, volume 1 an anomaly.
        let x = t(&[2, 1, 2], &[0.26, 0.9, 0.1, 2.0]);
        let p = QuantParams::unsigned(0.25, 0, 2).unwrap();
        // codes: 0.26 -> 1 (0.25), 0.9 -> 3 (0.75 clamp), 0.1 -> 0 (0.0), 2.0 -> 3 (0.75)
        let dx = [0.25 - 0.26, 0.75 - 0.9, 0.0 - 0.1, 0.75 - 2.0];
        let fim = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let inlier = 1.0 * dx[0] * dx[0] + 3.0 * dx[2] * dx[2];
        let anomaly = 2.0 * dx[1] * dx[1] + 4.0 * dx[3] * dx[3];
        let w = RegionWeights {
            inlier: 0.7,
            anomaly: 0.2,
        };
        let got = inlier_objective(&x, &p, &fim, &[true, false], w).unwrap();
        assert!((got - (0.7 * inlier + 0.2 * anomaly)).abs() < 1e-15);
    }

    #[test]
    fn zero_refinement_returns_minmax() {
        let x = t(&[1, 1, 4], &[0.0, 1.0, 2.0, 30.0]);
        let fim = t(&[1, 1, 4], &[1.0; 4]);
        let r = optimize_layer(&x, &fim, &[true, true, true, false], &opts(4, 0), 0).unwrap();
        assert_eq!(r.params, calibrate_minmax(&t(&[3], &[0.0, 1.0, 2.0]), 4, None).unwrap());
        assert_eq!(r.curve.len(), 1);
        assert_eq!(r.inlier_fraction, 0.75);
    }

    #[test]
    fn all_true_mask_matches_baseline() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::new(vec![2, 3, 4, 4], (0..96).map(|_| rng.gaussian(0.5, 1.0)).collect()).unwrap();
        let fim = Tensor::new(vec![3, 4, 4], (0..48).map(|_| rng.uniform(0.0, 2.0)).collect()).unwrap();
        let a = optimize_layer(&x, &fim, &[true; 32], &opts(3, 15), 1).unwrap();
        let b = optimize_baseline_layer(&x, &fim, &opts(3, 15), 1).unwrap();
        assert_eq!(a, b);
        let direct = inlier_objective(&x, &b.params, &fim, &[true; 32], RegionWeights::INLIER_ONLY).unwrap();
        assert_eq!(direct, b.objective);
    }

    #[test]
    fn chosen_candidate_is_curve_minimum() {
        let mut rng = SeededRng::new(8);
        let mut v: Vec<f64> = (0..64).map(|_| rng.uniform(0.0, 1.0)).collect();
        v[5] = 12.0;
        let x = Tensor::new(vec![1, 4, 4, 4], v).unwrap();
        let fim = Tensor::filled(vec![4, 4, 4], 1.0).unwrap();
        let r = optimize_baseline_layer(&x, &fim, &opts(4, 15), 0).unwrap();
        assert_eq!(r.curve.len(), 15);
        assert!(r.curve.iter().all(|c| r.objective <= c.objective));
        let first_min = r.curve.iter().position(|c| c.objective == r.objective).unwrap();
        assert_eq!(r.curve[first_min].params, r.params);
    }

    #[test]
    fn perturbation_bound() {
        let p = QuantParams::unsigned(0.1, 3, 4).unwrap();
        let (lo, hi) = p.range();
        let mut rng = SeededRng::new(1);
        let x = Tensor::new(vec![500], (0..500).map(|_| rng.uniform(-2.0, 3.0)).collect()).unwrap();
        let d = Perturbation::new(&x, &p).unwrap();
        for (xi, di) in x.data().iter().zip(d.delta.data()) {
            let clamp_dist = (lo - xi).max(xi - hi).max(0.0);
            assert!(di.abs() <= (0.05f64).max(clamp_dist) + 1e-12);
        }
    }

    #[test]
    fn statistics_bookkeeping() {
        let m = model(1);
        let sc = scenes(2, 50);
        let spec = TopKLossSpec::new(3, 2);
        let stats = collect_statistics(&m, &sc, &spec).unwrap();
        assert_eq!(stats.len(), 2);
        for s in &stats {
            assert_eq!(s.activations.len(), 2 * 4 * 24 * 24);
            assert_eq!(s.saliency.shape(), &[2, 24, 24]);
        }
        // Pooling is concatenation of per-scene statistics.
        for (i, scene) in sc.iter().enumerate() {
            let single = collect_statistics(&m, core::slice::from_ref(scene), &spec).unwrap();
            for l in 0..2 {
                let plane = 24 * 24;
                assert_eq!(
                    &stats[l].saliency.data()[i * plane..(i + 1) * plane],
                    single[l].saliency.data()
                );
            }
        }
        assert_eq!(collect_statistics(&m, &[], &spec), Err(Error::Empty));
    }

    #[test]
    fn calibrate_model_bookkeeping() {
        let m = model(2);
        let sc = scenes(4, 10);
        let cfg = CalibConfig::default();
        let out = calibrate_model(&m, &sc, &cfg, Method::InlierQ).unwrap();
        assert_eq!(out.weight_params.len(), 2);
        assert_eq!(out.layers.iter().flatten().count(), 2);
        assert!(out.act_params.iter().all(Option::is_some));
        let again = calibrate_model(&m, &sc, &cfg, Method::InlierQ).unwrap();
        assert_eq!(out, again);

        let bypass = CalibConfig {
            bits_weights: vec![None, None],
            bits_acts: vec![None, None],
            ..CalibConfig::default()
        };
        let out = calibrate_model(&m, &sc, &bypass, Method::InlierQ).unwrap();
        assert!(out.layers.iter().all(Option::is_none));
        let fp = crate::detector::forward(&m, &sc[0]).unwrap().0;
        let q = forward_quantized(&m, &sc[0], &out.weight_params, &out.act_params)
            .unwrap()
            .0;
        assert_eq!(fp, q);
    }

    #[test]
    fn permutation_invariance() {
        let m = model(4);
        let sc = scenes(5, 30);
        let mut rev = sc.clone();
        rev.reverse();
        let cfg = CalibConfig::default();
        for method in Method::ALL {
            let a = calibrate_model(&m, &sc, &cfg, method).unwrap();
            let b = calibrate_model(&m, &rev, &cfg, method).unwrap();
            for l in 0..2 {
                let (la, lb) = (a.layers[l].as_ref().unwrap(), b.layers[l].as_ref().unwrap());
                assert_eq!(la.fim, lb.fim);
                assert_eq!(la.result.params, lb.result.params);
                assert_eq!(la.result.objective, lb.result.objective);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(CalibConfig::default().validate().is_ok());
        let bad = |f: fn(&mut CalibConfig)| {
            let mut c = CalibConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.bits_acts = vec![Some(4)]));
        assert!(bad(|c| c.bits_acts = vec![Some(9), None]));
        assert!(bad(|c| c.tau = 1.2));
        assert!(bad(|c| c.k = 0));
        assert!(bad(|c| c.n_calib = 0));
        assert!(bad(|c| c.lambdas = RegionWeights {
            inlier: 0.0,
            anomaly: 0.0
        }));
        assert!(bad(|c| c.lambdas.anomaly = -1.0));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::from_name(m.name()), Some(m));
        }
        assert_eq!(Method::from_name("brecq"), None);
    }
}
