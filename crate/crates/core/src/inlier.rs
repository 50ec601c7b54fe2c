//! Inlier/anomaly classification of saliency scores.
//!
//! A two-component 1-D Gaussian mixture is fit with EM. The component with
//! the larger mean is the inlier component; the posterior of that component
//! thresholded at `tau` defines the inlier set. A 1-D 2-means clustering is
//! provided as an ablation baseline.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::saliency::SaliencyField;
use crate::tensor::{exact_sum, Tensor};

pub const VARIANCE_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmModel {
    pub mean_inlier: f64,
    pub mean_anomaly: f64,
    pub var_inlier: f64,
    pub var_anomaly: f64,
    pub prior_inlier: f64,
    pub prior_anomaly: f64,
}

impl GmmModel {
    /// Single effective component: every score is an inlier.
    pub fn degenerate(value: f64) -> Self {
        Self {
            mean_inlier: value,
            mean_anomaly: value,
            var_inlier: VARIANCE_FLOOR,
            var_anomaly: VARIANCE_FLOOR,
            prior_inlier: 1.0,
            prior_anomaly: 0.0,
        }
    }

    /// `(ln P(h|I) P(I), ln P(h|A) P(A))`.
    fn log_joint(&self, x: f64) -> (f64, f64) {
        (
            log_weighted_density(x, self.mean_inlier, self.var_inlier, self.prior_inlier),
            log_weighted_density(x, self.mean_anomaly, self.var_anomaly, self.prior_anomaly),
        )
    }
}

fn log_weighted_density(x: f64, mean: f64, var: f64, prior: f64) -> f64 {
    if prior <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let d = x - mean;
    libm::log(prior) - 0.5 * (LN_2PI + libm::log(var) + d * d / var)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(libm::exp(a - m) + libm::exp(b - m))
}

/// Bayes posterior of the inlier component, evaluated in log space.
pub fn posterior(model: &GmmModel, score: f64) -> f64 {
    let (li, la) = model.log_joint(score);
    logistic_of_difference(li, la)
}

/// Posterior of the anomaly component; complements [`posterior`].
pub fn anomaly_posterior(model: &GmmModel, score: f64) -> f64 {
    let (li, la) = model.log_joint(score);
    logistic_of_difference(la, li)
}

/// `e^a / (e^a + e^b)`.
fn logistic_of_difference(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return if a == f64::NEG_INFINITY { 0.5 } else { 1.0 };
    }
    if a == f64::NEG_INFINITY {
        return 0.0;
    }
    crate::tensor::sigmoid(a - b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub var_floor: f64,
    /// Standard deviation (in units of the score spread) of Gaussian jitter
    /// added to the initial means. 0 disables it and leaves the generator
    /// untouched.
    pub init_jitter: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-8,
            var_floor: VARIANCE_FLOOR,
            init_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: GmmModel,
    /// Log-likelihood after each E-step.
    pub loglik_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
}

/// Fits the two-component mixture by EM.
///
/// Initialization splits the sorted scores at the median: the upper half
/// seeds the inlier component, the lower half the anomaly component, priors
/// start at 0.5. Iteration stops when the log-likelihood changes by less than
/// `tol` or after `max_iters` E/M rounds. Fewer than two distinct scores give
/// [`GmmModel::degenerate`].
pub fn em_fit(scores: &[f64], opts: &EmOptions, rng: &mut SeededRng) -> Result<EmFit> {
    if scores.is_empty() {
        return Err(Error::Empty);
    }
    if let Some(index) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let first = scores[0];
    if scores.iter().all(|&v| v == first) {
        return Ok(EmFit {
            model: GmmModel::degenerate(first),
            loglik_history: Vec::new(),
            iterations: 0,
            converged: true,
            degenerate: true,
        });
    }
    let floor = opts.var_floor.max(f64::MIN_POSITIVE);
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lower, upper) = sorted.split_at(n / 2);
    let (mut m_lo, v_lo) = mean_var(lower, floor);
    let (mut m_hi, v_hi) = mean_var(upper, floor);
    if opts.init_jitter > 0.0 {
        let spread = sorted[n - 1] - sorted[0];
        m_lo += opts.init_jitter * spread * rng.normal();
        m_hi += opts.init_jitter * spread * rng.normal();
    }
    let mut model = GmmModel {
        mean_inlier: m_hi,
        mean_anomaly: m_lo,
        var_inlier: v_hi,
        var_anomaly: v_lo,
        prior_inlier: 0.5,
        prior_anomaly: 0.5,
    };

    let mut history = Vec::new();
    let mut resp = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        // E-step.
        let mut terms = Vec::with_capacity(n);
        for (r, &x) in resp.iter_mut().zip(scores) {
            let (li, la) = model.log_joint(x);
            *r = logistic_of_difference(li, la);
            terms.push(log_sum_exp(li, la));
        }
        let loglik = exact_sum(terms);
        let delta = history.last().map(|prev: &f64| (loglik - prev).abs());
        history.push(loglik);
        if delta.is_some_and(|d| d < opts.tol) {
            converged = true;
            break;
        }
        // M-step.
        let w_in = exact_sum(resp.iter().copied());
        let w_an = exact_sum(resp.iter().map(|r| 1.0 - r));
        if w_in > 0.0 {
            model.mean_inlier = exact_sum(resp.iter().zip(scores).map(|(r, x)| r * x)) / w_in;
            let m = model.mean_inlier;
            model.var_inlier =
                (exact_sum(resp.iter().zip(scores).map(|(r, x)| r * (x - m) * (x - m))) / w_in).max(floor);
        }
        if w_an > 0.0 {
            model.mean_anomaly = exact_sum(resp.iter().zip(scores).map(|(r, x)| (1.0 - r) * x)) / w_an;
            let m = model.mean_anomaly;
            model.var_anomaly =
                (exact_sum(resp.iter().zip(scores).map(|(r, x)| (1.0 - r) * (x - m) * (x - m))) / w_an).max(floor);
        }
        model.prior_inlier = w_in / n as f64;
        model.prior_anomaly = 1.0 - model.prior_inlier;
    }

    if model.mean_anomaly > model.mean_inlier {
        model = GmmModel {
            mean_inlier: model.mean_anomaly,
            mean_anomaly: model.mean_inlier,
            var_inlier: model.var_anomaly,
            var_anomaly: model.var_inlier,
            prior_inlier: model.prior_anomaly,
            prior_anomaly: model.prior_inlier,
        };
    }
    Ok(EmFit {
        model,
        loglik_history: history,
        iterations,
        converged,
        degenerate: false,
    })
}

fn mean_var(values: &[f64], floor: f64) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = exact_sum(values.iter().copied()) / n;
    let var = exact_sum(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    (mean, var.max(floor))
}

/// Per-volume inlier decision `posterior >= tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct InlierMask {
    /// Row-major `(H, W)` flags; `true` marks an inlier volume.
    pub mask: Vec<bool>,
    pub tau: f64,
    /// Inlier posterior per volume, shape `(H, W)`.
    pub posterior: Tensor,
}

impl InlierMask {
    /// Every volume is an inlier.
    pub fn all(height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            mask: vec![true; height * width],
            tau: 0.0,
            posterior: Tensor::filled(vec![height, width], 1.0)?,
        })
    }

    pub fn inlier_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn inlier_fraction(&self) -> f64 {
        self.inlier_count() as f64 / self.mask.len() as f64
    }
}

pub fn inlier_mask(model: &GmmModel, field: &SaliencyField, tau: f64) -> Result<InlierMask> {
    inlier_mask_with(model, field, tau, |s| s)
}

/// Like [`inlier_mask`] but scores pass through `transform` first (the
/// mixture was fit on transformed scores).
pub fn inlier_mask_with(
    model: &GmmModel,
    field: &SaliencyField,
    tau: f64,
    transform: impl Fn(f64) -> f64,
) -> Result<InlierMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidThreshold(tau));
    }
    let post: Vec<f64> = field
        .scores
        .data()
        .iter()
        .map(|&s| posterior(model, transform(s)))
        .collect();
    Ok(InlierMask {
        mask: post.iter().map(|&p| p >= tau).collect(),
        tau,
        posterior: Tensor::new(field.scores.shape().to_vec(), post)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroid_low: f64,
    pub centroid_high: f64,
    /// Per input score: `true` for the higher-centroid (inlier) cluster.
    pub labels: Vec<bool>,
    pub iterations: usize,
}

impl KMeansFit {
    /// Nearest-centroid assignment; equidistant scores go to the lower cluster.
    pub fn is_inlier(&self, score: f64) -> bool {
        (score - self.centroid_high).abs() < (score - self.centroid_low).abs()
            || self.centroid_high == self.centroid_low
    }

    pub fn mask(&self, field: &SaliencyField) -> Result<InlierMask> {
        self.mask_with(field, |s| s)
    }

    pub fn mask_with(&self, field: &SaliencyField, transform: impl Fn(f64) -> f64) -> Result<InlierMask> {
        let mask: Vec<bool> = field
            .scores
            .data()
            .iter()
            .map(|&s| self.is_inlier(transform(s)))
            .collect();
        let post = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Ok(InlierMask {
            mask,
            tau: 0.5,
            posterior: Tensor::new(field.scores.shape().to_vec(), post)?,
        })
    }
}

/// Lloyd's 2-means on 1-D scores, initialized at the minimum and maximum.
pub fn kmeans2_fit(scores: &[f64], max_iters: usize) -> Result<KMeansFit> {
    if scores.is_empty() {
        return Err(Error::Empty);
    }
    if let Some(index) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut fit = KMeansFit {
        centroid_low: lo,
        centroid_high: hi,
        labels: vec![true; scores.len()],
        iterations: 0,
    };
    if lo == hi {
        return Ok(fit);
    }
    for _ in 0..max_iters.max(1) {
        fit.iterations += 1;
        let labels: Vec<bool> = scores.iter().map(|&s| fit.is_inlier(s)).collect();
        let changed = labels != fit.labels;
        fit.labels = labels;
        let (mut hi_vals, mut lo_vals) = (Vec::new(), Vec::new());
        for (&s, &l) in scores.iter().zip(&fit.labels) {
            if l {
                hi_vals.push(s);
            } else {
                lo_vals.push(s);
            }
        }
        let c_hi = exact_sum(hi_vals.iter().copied()) / hi_vals.len() as f64;
        let c_lo = exact_sum(lo_vals.iter().copied()) / lo_vals.len() as f64;
        let moved = c_hi != fit.centroid_high || c_lo != fit.centroid_low;
        fit.centroid_high = c_hi;
        fit.centroid_low = c_lo;
        if !changed && !moved {
            break;
        }
    }
    fit.labels = scores.iter().map(|&s| fit.is_inlier(s)).collect();
    Ok(fit)
}
