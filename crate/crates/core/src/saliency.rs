//! Top-K heatmap likelihood and gradient saliency.
//!
//! The loss averages `-log h` over the `K` largest heatmap values of every
//! class channel. Selection is treated as constant when differentiating:
//! the gradient is `-1 / (K * C * h)` at selected entries and 0 elsewhere.
//! Heatmap values are clamped to `[floor, 1 - floor]` before the log; the
//! gradient is 0 where the clamp is active.

use alloc::vec;
use alloc::vec::Vec;

use crate::detector::HeatmapOutput;
use crate::error::{Error, Result};
use crate::tensor::{topk_slice, Tensor};

pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKLossSpec {
    /// Entries selected per channel.
    pub k: usize,
    /// Channel count `C`.
    pub channels: usize,
    pub log_floor: f64,
}

impl TopKLossSpec {
    pub fn new(k: usize, channels: usize) -> Self {
        Self {
            k,
            channels,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }

    fn check(&self, heatmap: &HeatmapOutput) -> Result<()> {
        if heatmap.classes() != self.channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.channels],
                actual: vec![heatmap.classes()],
            });
        }
        let plane = heatmap.height() * heatmap.width();
        if self.k == 0 || self.k > plane {
            return Err(Error::KOutOfRange { k: self.k, len: plane });
        }
        Ok(())
    }
}

/// Per-layer activation gradients, same shapes as the activation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTrace {
    pub gradients: Vec<Tensor>,
}

/// Non-negative per-volume scores of shape `(H, W)` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyField {
    pub scores: Tensor,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKLoss {
    pub loss: f64,
    /// Selected within-channel flat indices, per channel, in descending order
    /// of heatmap value.
    pub selection: Vec<Vec<usize>>,
}

/// Per-channel top-K selection (ties to the lower index).
pub fn select_topk(heatmap: &HeatmapOutput, k: usize) -> Result<Vec<Vec<usize>>> {
    (0..heatmap.classes())
        .map(|c| Ok(topk_slice(heatmap.channel(c), k)?.into_iter().map(|(_, i)| i).collect()))
        .collect()
}

pub fn topk_nll_loss(heatmap: &HeatmapOutput, spec: &TopKLossSpec) -> Result<TopKLoss> {
    spec.check(heatmap)?;
    let selection = select_topk(heatmap, spec.k)?;
    let loss = nll_at_selection(heatmap, &selection, spec.log_floor);
    Ok(TopKLoss { loss, selection })
}

/// Mean `-log h` over the given per-channel selection.
pub fn nll_at_selection(heatmap: &HeatmapOutput, selection: &[Vec<usize>], log_floor: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, picks) in selection.iter().enumerate() {
        let plane = heatmap.channel(c);
        for &i in picks {
            total -= libm::log(plane[i].clamp(log_floor, 1.0 - log_floor));
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn loss_gradient(heatmap: &HeatmapOutput, spec: &TopKLossSpec) -> Result<Tensor> {
    spec.check(heatmap)?;
    let selection = select_topk(heatmap, spec.k)?;
    Ok(gradient_at_selection(heatmap, &selection, spec.log_floor))
}

/// Gradient of [`nll_at_selection`] with respect to every heatmap entry.
pub fn gradient_at_selection(heatmap: &HeatmapOutput, selection: &[Vec<usize>], log_floor: f64) -> Tensor {
    let plane = heatmap.height() * heatmap.width();
    let count: usize = selection.iter().map(Vec::len).sum();
    let mut grad = vec![0.0; heatmap.heatmap.len()];
    for (c, picks) in selection.iter().enumerate() {
        let values = heatmap.channel(c);
        for &i in picks {
            let v = values[i];
            if v > log_floor && v < 1.0 - log_floor {
                grad[c * plane + i] = -1.0 / (count as f64 * v);
            }
        }
    }
    Tensor::from_parts(heatmap.heatmap.shape().to_vec(), grad)
}

/// Sum over channels of `|dL/dx|` at each spatial cell of layer `layer`.
pub fn volume_saliency(gtrace: &GradientTrace, layer: usize) -> Result<SaliencyField> {
    let g = gtrace.gradients.get(layer).ok_or(Error::BadLayer {
        layer,
        count: gtrace.gradients.len(),
    })?;
    let s = g.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut scores = vec![0.0; plane];
    for ch in 0..c {
        for (acc, v) in scores.iter_mut().zip(&g.data()[ch * plane..(ch + 1) * plane]) {
            *acc += v.abs();
        }
    }
    Ok(SaliencyField {
        scores: Tensor::new(vec![h, w], scores)?,
        layer,
    })
}
