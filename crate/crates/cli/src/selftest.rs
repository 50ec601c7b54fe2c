//! Quick invariant battery behind the `selftest` command.

use inlierq_core::calibrate::{inlier_objective, optimize_baseline_layer, optimize_layer, LayerOptions, RegionWeights};
use inlierq_core::detector::{generate_scene, DetectorModel, ModelConfig, SceneConfig};
use inlierq_core::inlier::{anomaly_posterior, em_fit, inlier_mask, posterior, EmOptions};
use inlierq_core::quant::{QuantParams, MAX_BITS, MIN_BITS};
use inlierq_core::rng::SeededRng;
use inlierq_core::saliency::{loss_gradient, SaliencyField, TopKLossSpec};
use inlierq_core::tensor::Tensor;

type CheckFn = fn() -> Result<(), String>;

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn roundtrip() -> Result<(), String> {
    for bits in MIN_BITS..=MAX_BITS {
        let p = QuantParams::unsigned(0.37, 1, bits).map_err(err)?;
        let (lo, hi) = p.range();
        for i in 0..=1000 {
            let x = lo + (hi - lo) * f64::from(i) / 1000.0;
            let e = (p.fake_quantize_value(x) - x).abs();
            // Exact half-steps may land one ulp past s/2.
            ensure(e <= p.scale() / 2.0 * (1.0 + 1e-12), || {
                format!("b={bits} x={x} error {e}")
            })?;
        }
    }
    Ok(())
}

fn bimodal(seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    (0..400)
        .map(|i| rng.gaussian(if i % 2 == 0 { 0.0 } else { 6.0 }, 1.0))
        .collect()
}

fn em_monotone() -> Result<(), String> {
    for seed in 0..5 {
        let fit = em_fit(&bimodal(seed), &EmOptions::default(), &mut SeededRng::new(seed)).map_err(err)?;
        for w in fit.loglik_history.windows(2) {
            ensure(w[1] >= w[0] - 1e-9, || format!("seed {seed}: {} -> {}", w[0], w[1]))?;
        }
    }
    Ok(())
}

fn posterior_masks() -> Result<(), String> {
    let data = bimodal(11);
    let fit = em_fit(&data, &EmOptions::default(), &mut SeededRng::new(0)).map_err(err)?;
    for &x in &data {
        let s = posterior(&fit.model, x) + anomaly_posterior(&fit.model, x);
        ensure((s - 1.0).abs() <= 1e-12, || format!("complement sums to {s} at {x}"))?;
    }
    let field = SaliencyField {
        scores: Tensor::new(vec![20, 20], data).map_err(err)?,
        layer: 0,
    };
    let mut prev: Option<Vec<bool>> = None;
    for t in 1..10 {
        let m = inlier_mask(&fit.model, &field, f64::from(t) / 10.0).map_err(err)?.mask;
        if let Some(p) = &prev {
            ensure(m.iter().zip(p).all(|(now, before)| !*now || *before), || {
                format!("mask grew at tau {}", f64::from(t) / 10.0)
            })?;
        }
        prev = Some(m);
    }
    Ok(())
}

fn loss_gradient_identity() -> Result<(), String> {
    let model = DetectorModel::seeded(&ModelConfig::default(), &mut SeededRng::new(3)).map_err(err)?;
    let scene = generate_scene(&SceneConfig::default(), &mut SeededRng::new(4)).map_err(err)?;
    let (heat, _) = inlierq_core::detector::forward(&model, &scene).map_err(err)?;
    let g = loss_gradient(&heat, &TopKLossSpec::new(3, model.classes())).map_err(err)?;
    let s: f64 = g.data().iter().zip(heat.heatmap.data()).map(|(a, b)| a * b).sum();
    ensure((s + 1.0).abs() < 1e-12, || format!("sum of g * h is {s}"))
}

fn objective_consistency() -> Result<(), String> {
    let mut rng = SeededRng::new(9);
    let x = Tensor::new(vec![2, 3, 5, 5], (0..150).map(|_| rng.gaussian(0.3, 1.0)).collect()).map_err(err)?;
    let fim = Tensor::new(vec![3, 5, 5], (0..75).map(|_| rng.uniform(0.0, 1.0)).collect()).map_err(err)?;
    let opts = LayerOptions {
        bits: 4,
        refine_steps: 15,
        grid_steps: 15,
        lambdas: RegionWeights::INLIER_ONLY,
    };
    let mask = vec![true; 50];
    let a = optimize_layer(&x, &fim, &mask, &opts, 0).map_err(err)?;
    let b = optimize_baseline_layer(&x, &fim, &opts, 0).map_err(err)?;
    let direct = inlier_objective(&x, &b.params, &fim, &mask, RegionWeights::INLIER_ONLY).map_err(err)?;
    ensure(a == b && direct == b.objective, || {
        "all-true mask differs from the baseline".to_string()
    })?;
    ensure(b.curve.iter().all(|c| b.objective <= c.objective), || {
        "chosen candidate is not the curve minimum".to_string()
    })
}

fn scene_determinism() -> Result<(), String> {
    let cfg = SceneConfig::default();
    let a = generate_scene(&cfg, &mut SeededRng::new(42)).map_err(err)?;
    let b = generate_scene(&cfg, &mut SeededRng::new(42)).map_err(err)?;
    ensure(a == b, || "same seed produced different scenes".to_string())
}

pub fn run_selftest() -> Vec<Check> {
    let checks: [(&'static str, CheckFn); 6] = [
        ("quantizer roundtrip", roundtrip),
        ("em log-likelihood monotone", em_monotone),
        ("posterior complement and mask shrinkage", posterior_masks),
        ("top-k loss gradient identity", loss_gradient_identity),
        ("objective consistency and argmin", objective_consistency),
        ("scene determinism", scene_determinism),
    ];
    checks
        .into_iter()
        .map(|(name, f)| Check { name, outcome: f() })
        .collect()
}
