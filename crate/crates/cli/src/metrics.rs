//! Held-out evaluation metrics.

use inlierq_core::detector::{forward, forward_quantized, ActivationTrace, DetectorModel, HeatmapOutput, Scene};
use inlierq_core::quant::QuantParams;
use inlierq_core::saliency::{nll_at_selection, select_topk, DEFAULT_LOG_FLOOR};
use inlierq_core::tensor::exact_sum;
use inlierq_core::{Error, Result};

const NORM_EPS: f64 = 1e-12;

fn check_traces(fp: &ActivationTrace, q: &ActivationTrace) -> Result<()> {
    if fp.activations.len() != q.activations.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![fp.activations.len()],
            actual: vec![q.activations.len()],
        });
    }
    for (a, b) in fp.activations.iter().zip(&q.activations) {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                expected: a.shape().to_vec(),
                actual: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Per layer `||x_q - x||_2 / (||x||_2 + 1e-12)`, in forward order.
pub fn error_accumulation(fp: &ActivationTrace, q: &ActivationTrace) -> Result<Vec<f64>> {
    pooled_error_accumulation(std::slice::from_ref(fp), std::slice::from_ref(q))
}

/// [`error_accumulation`] with the norms taken over every trace at once.
pub fn pooled_error_accumulation(fp: &[ActivationTrace], q: &[ActivationTrace]) -> Result<Vec<f64>> {
    let (diff, norm, _) = pooled_sums(fp, q)?;
    Ok(diff
        .iter()
        .zip(&norm)
        .map(|(d, n)| d.sqrt() / (n.sqrt() + NORM_EPS))
        .collect())
}

/// Per-layer mean squared difference over every element of every trace.
pub fn pooled_layer_mse(fp: &[ActivationTrace], q: &[ActivationTrace]) -> Result<Vec<f64>> {
    let (diff, _, count) = pooled_sums(fp, q)?;
    Ok(diff.iter().zip(&count).map(|(d, c)| d / *c as f64).collect())
}

/// Per layer: summed squared difference, summed squared reference, element count.
fn pooled_sums(fp: &[ActivationTrace], q: &[ActivationTrace]) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    if fp.is_empty() || fp.len() != q.len() {
        return Err(Error::LengthMismatch {
            shape: vec![fp.len()],
            expected: fp.len(),
            actual: q.len(),
        });
    }
    let layers = fp[0].activations.len();
    let mut diff = Vec::with_capacity(layers);
    let mut norm = Vec::with_capacity(layers);
    let mut count = Vec::with_capacity(layers);
    for (a, b) in fp.iter().zip(q) {
        check_traces(a, b)?;
        if a.activations.len() != layers {
            return Err(Error::ShapeMismatch {
                expected: vec![layers],
                actual: vec![a.activations.len()],
            });
        }
    }
    for l in 0..layers {
        let pairs = || {
            fp.iter()
                .zip(q)
                .flat_map(move |(a, b)| a.activations[l].data().iter().zip(b.activations[l].data()))
        };
        diff.push(exact_sum(pairs().map(|(x, y)| (y - x) * (y - x))));
        norm.push(exact_sum(pairs().map(|(x, _)| x * x)));
        count.push(fp.iter().map(|a| a.activations[l].len()).sum());
    }
    Ok((diff, norm, count))
}

/// Top-K NLL of `quantized` at the entries selected on `reference`.
pub fn nll_proxy(reference: &HeatmapOutput, quantized: &HeatmapOutput, k: usize) -> Result<f64> {
    let selection = select_topk(reference, k)?;
    Ok(nll_at_selection(quantized, &selection, DEFAULT_LOG_FLOOR))
}

/// Hits and total over the ground-truth centres of `scene`. A centre is hit
/// when one of the `n_c` strongest peaks of its class channel lies within one
/// cell of it, `n_c` being the number of objects of that class.
pub fn peak_hits(heat: &HeatmapOutput, scene: &Scene) -> (usize, usize) {
    let w = heat.width();
    let mut hits = 0;
    for o in &scene.object_centers {
        let n = scene.object_centers.iter().filter(|p| p.class == o.class).count();
        let hit = heat.peaks(o.class, n).iter().any(|&(_, i)| {
            let (r, c) = (i / w, i % w);
            r.abs_diff(o.row) <= 1 && c.abs_diff(o.col) <= 1
        });
        hits += usize::from(hit);
    }
    (hits, scene.object_centers.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub layer_mse: Vec<f64>,
    pub rel_err: Vec<f64>,
    /// Mean over held-out scenes of the top-K NLL at full-precision picks.
    pub nll_proxy: f64,
    /// Fraction of ground-truth centres recovered; 1 when there are none.
    pub peak_hit: f64,
}

/// Compares the quantized model against the full-precision one on `scenes`.
pub fn evaluate(
    model: &DetectorModel,
    scenes: &[Scene],
    weight_params: &[Option<QuantParams>],
    act_params: &[Option<QuantParams>],
    eval_k: usize,
) -> Result<Evaluation> {
    if scenes.is_empty() {
        return Err(Error::Empty);
    }
    let qmodel = model.with_quantized_weights(weight_params)?;
    let none = vec![None; weight_params.len()];
    let mut fp_traces = Vec::with_capacity(scenes.len());
    let mut q_traces = Vec::with_capacity(scenes.len());
    let mut nll = Vec::with_capacity(scenes.len());
    let (mut hits, mut total) = (0, 0);
    for scene in scenes {
        let (fp_heat, fp_trace) = forward(model, scene)?;
        let (q_heat, q_trace) = forward_quantized(&qmodel, scene, &none, act_params)?;
        nll.push(nll_proxy(&fp_heat, &q_heat, eval_k)?);
        let (h, t) = peak_hits(&q_heat, scene);
        hits += h;
        total += t;
        fp_traces.push(fp_trace);
        q_traces.push(q_trace);
    }
    Ok(Evaluation {
        layer_mse: pooled_layer_mse(&fp_traces, &q_traces)?,
        rel_err: pooled_error_accumulation(&fp_traces, &q_traces)?,
        nll_proxy: exact_sum(nll.iter().copied()) / scenes.len() as f64,
        peak_hit: if total == 0 { 1.0 } else { hits as f64 / total as f64 },
    })
}
