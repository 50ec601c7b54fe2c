//! Synthetic scenes and a two-layer heatmap detector.
//!
//! The detector is `conv3x3 -> ReLU -> conv3x3 -> sigmoid` with zero
//! same-padding and stride 1, so every activation shares the scene's
//! `(H, W)` volume grid. The two quantization sites are the conv1 output
//! (before the ReLU) and the ReLU output feeding conv2.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::quant::{calibrate_symmetric, QuantParams};
use crate::rng::SeededRng;
use crate::saliency::GradientTrace;
use crate::tensor::{relu, sigmoid, Tensor};

/// Number of quantized activation sites.
pub const NUM_LAYERS: usize = 2;

const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Object classes; also the number of input channels.
    pub classes: usize,
    pub n_objects: usize,
    pub n_anomalies: usize,
    /// Peak amplitude of an object blob.
    pub object_intensity: f64,
    /// Anomaly speckle intensity relative to `object_intensity`.
    pub anomaly_multiplier: f64,
    /// Standard deviation of the Gaussian object blobs, in cells.
    pub blob_sigma: f64,
    /// Background noise is uniform in `[0, noise_amplitude)`.
    pub noise_amplitude: f64,
    /// Object centres keep this many cells away from the border.
    pub margin: usize,
    /// Minimum Chebyshev distance between two object centres.
    pub min_separation: usize,
    /// Minimum Chebyshev distance between an anomaly and any object centre.
    pub anomaly_clearance: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            classes: 2,
            n_objects: 3,
            n_anomalies: 12,
            object_intensity: 1.0,
            anomaly_multiplier: 5.0,
            blob_sigma: 2.0,
            noise_amplitude: 0.05,
            margin: 2,
            min_separation: 5,
            anomaly_clearance: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.classes == 0 {
            return Err(Error::InvalidScene("grid extents and class count must be positive"));
        }
        if 2 * self.margin >= self.height.min(self.width) && self.n_objects > 0 {
            return Err(Error::InvalidScene("margin leaves no room for objects"));
        }
        let interior =
            (self.height - 2 * self.margin.min(self.height / 2)) * (self.width - 2 * self.margin.min(self.width / 2));
        if self.n_objects > interior {
            return Err(Error::InvalidScene("more objects than interior cells"));
        }
        if self.n_objects + self.n_anomalies > self.height * self.width {
            return Err(Error::InvalidScene("objects and anomalies exceed grid capacity"));
        }
        let finite = [
            self.object_intensity,
            self.anomaly_multiplier,
            self.blob_sigma,
            self.noise_amplitude,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidScene(
                "intensities, sigma and noise must be finite and non-negative",
            ));
        }
        if self.anomaly_multiplier < 1.0 {
            return Err(Error::InvalidScene("anomaly multiplier must be at least 1"));
        }
        if self.blob_sigma == 0.0 {
            return Err(Error::InvalidScene("blob sigma must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectCenter {
    pub row: usize,
    pub col: usize,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnomalyCell {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Input intensities, shape `(classes, H, W)`.
    pub grid: Tensor,
    pub object_centers: Vec<ObjectCenter>,
    pub anomaly_cells: Vec<AnomalyCell>,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }
}

/// Draws a scene. Draw order: background noise for every element in
/// row-major order, then object centres (rejection-sampled), then anomaly
/// cells and channels (rejection-sampled). Object `i` has class
/// `i % classes`, so every class appears once there are enough objects.
/// Anomalies keep `anomaly_clearance` away from object centres.
pub fn generate_scene(cfg: &SceneConfig, rng: &mut SeededRng) -> Result<Scene> {
    cfg.validate()?;
    let (c_in, h, w) = (cfg.classes, cfg.height, cfg.width);
    let mut grid: Vec<f64> = (0..c_in * h * w)
        .map(|_| cfg.noise_amplitude * rng.next_f64())
        .collect();

    let mut objects: Vec<ObjectCenter> = Vec::with_capacity(cfg.n_objects);
    let rows = h - 2 * cfg.margin;
    let cols = w - 2 * cfg.margin;
    let mut attempts = 0;
    while objects.len() < cfg.n_objects {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementFailed {
                what: "objects",
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
        let row = cfg.margin + rng.below(rows as u64) as usize;
        let col = cfg.margin + rng.below(cols as u64) as usize;
        let class = objects.len() % c_in;
        let clear = objects.iter().all(|o| {
            let d = o.row.abs_diff(row).max(o.col.abs_diff(col));
            d >= cfg.min_separation.max(1)
        });
        if clear {
            objects.push(ObjectCenter { row, col, class });
        }
    }

    let two_var = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
    for o in &objects {
        let plane = &mut grid[o.class * h * w..(o.class + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - o.row as f64;
                let dx = x as f64 - o.col as f64;
                plane[y * w + x] += cfg.object_intensity * libm::exp(-(dy * dy + dx * dx) / two_var);
            }
        }
    }

    let mut anomalies: Vec<AnomalyCell> = Vec::with_capacity(cfg.n_anomalies);
    attempts = 0;
    while anomalies.len() < cfg.n_anomalies {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementFailed {
                what: "anomalies",
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
        let row = rng.below(h as u64) as usize;
        let col = rng.below(w as u64) as usize;
        let channel = rng.below(c_in as u64) as usize;
        let taken = objects
            .iter()
            .any(|o| o.row.abs_diff(row).max(o.col.abs_diff(col)) < cfg.anomaly_clearance.max(1))
            || anomalies.iter().any(|a| a.row == row && a.col == col);
        if !taken {
            anomalies.push(AnomalyCell { row, col, channel });
        }
    }
    let speckle = cfg.anomaly_multiplier * cfg.object_intensity;
    for a in &anomalies {
        grid[(a.channel * h + a.row) * w + a.col] += speckle;
    }

    Ok(Scene {
        grid: Tensor::new(vec![c_in, h, w], grid)?,
        object_centers: objects,
        anomaly_cells: anomalies,
        seed: rng.seed(),
    })
}

/// 3x3 convolution (cross-correlation) with zero same-padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    weights: Tensor,
    bias: Tensor,
}

impl Conv3x3 {
    /// `weights` has shape `(out, in, 3, 3)`, `bias` shape `(out)`.
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weights.shape();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![ws.first().copied().unwrap_or(1), ws.get(1).copied().unwrap_or(1), 3, 3],
                actual: ws.to_vec(),
            });
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                expected: vec![ws[0]],
                actual: bias.shape().to_vec(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (c_out, c_in) = (self.out_channels(), self.in_channels());
        let k = self.weights.data();
        let b = self.bias.data();
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = b[o];
                    for i in 0..c_in {
                        for ky in 0..3 {
                            let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                                continue;
                            };
                            for kx in 0..3 {
                                let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                                    continue;
                                };
                                acc += k[((o * c_in + i) * 3 + ky) * 3 + kx] * input[(i * h + iy) * w + ix];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    /// Gradient with respect to the input given the gradient at the output.
    fn backward_input(&self, grad_out: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (c_out, c_in) = (self.out_channels(), self.in_channels());
        let k = self.weights.data();
        let mut grad_in = vec![0.0; c_in * h * w];
        for i in 0..c_in {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for o in 0..c_out {
                        for ky in 0..3 {
                            // Output row oy reads input row y when oy + ky - 1 == y.
                            let Some(oy) = (y + 1).checked_sub(ky).filter(|&v| v < h) else {
                                continue;
                            };
                            for kx in 0..3 {
                                let Some(ox) = (x + 1).checked_sub(kx).filter(|&v| v < w) else {
                                    continue;
                                };
                                acc += k[((o * c_in + i) * 3 + ky) * 3 + kx] * grad_out[(o * h + oy) * w + ox];
                            }
                        }
                    }
                    grad_in[(i * h + y) * w + x] = acc;
                }
            }
        }
        grad_in
    }

    fn with_weights(&self, weights: Tensor) -> Self {
        Self {
            weights,
            bias: self.bias.clone(),
        }
    }
}

/// Shaping of the seeded detector weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Total weight of the conv2 box filter reading each class's smoothing channel.
    pub template_gain: f64,
    /// Total weight of the conv2 box filter that subtracts each class's
    /// high-pass detail channel.
    pub detail_gain: f64,
    pub logit_bias: f64,
    /// Standard deviation of the Gaussian noise added to every weight.
    pub weight_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            template_gain: 12.0,
            detail_gain: 9.0,
            logit_bias: -5.0,
            weight_noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    conv1: Conv3x3,
    conv2: Conv3x3,
}

impl DetectorModel {
    pub fn new(conv1: Conv3x3, conv2: Conv3x3) -> Result<Self> {
        if conv2.in_channels() != conv1.out_channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![conv1.out_channels()],
                actual: vec![conv2.in_channels()],
            });
        }
        Ok(Self { conv1, conv2 })
    }

    /// Object-template weights plus seeded Gaussian noise.
    ///
    /// conv1 maps each input channel `c` to a 3x3 box-average channel `c` and
    /// a high-pass "detail" channel `classes + c` (centre minus box average).
    /// conv2 maps class `c` to a box filter over smoothing channel `c` (total
    /// weight `template_gain`) minus a box filter over the rectified detail
    /// channel (total weight `detail_gain`). Extended blobs therefore
    /// dominate the heatmap while single-cell speckle mostly inflates the
    /// detail channels.
    pub fn seeded(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let c = cfg.classes;
        if c == 0 {
            return Err(Error::InvalidConfig("model needs at least one class"));
        }
        let mid = 2 * c;
        let mut w1 = vec![0.0; mid * c * 9];
        for ch in 0..c {
            for tap in 0..9 {
                w1[(ch * c + ch) * 9 + tap] = 1.0 / 9.0;
            }
            for tap in 0..9 {
                w1[((c + ch) * c + ch) * 9 + tap] = if tap == 4 { 8.0 / 9.0 } else { -1.0 / 9.0 };
            }
        }
        let mut w2 = vec![0.0; c * mid * 9];
        for ch in 0..c {
            for tap in 0..9 {
                w2[(ch * mid + ch) * 9 + tap] = cfg.template_gain / 9.0;
            }
            for tap in 0..9 {
                w2[(ch * mid + c + ch) * 9 + tap] = -cfg.detail_gain / 9.0;
            }
        }
        for v in w1.iter_mut().chain(w2.iter_mut()) {
            *v += cfg.weight_noise * rng.normal();
        }
        let conv1 = Conv3x3::new(Tensor::new(vec![mid, c, 3, 3], w1)?, Tensor::zeros(vec![mid])?)?;
        let conv2 = Conv3x3::new(
            Tensor::new(vec![c, mid, 3, 3], w2)?,
            Tensor::filled(vec![c], cfg.logit_bias)?,
        )?;
        Self::new(conv1, conv2)
    }

    pub fn conv1(&self) -> &Conv3x3 {
        &self.conv1
    }

    pub fn conv2(&self) -> &Conv3x3 {
        &self.conv2
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn mid_channels(&self) -> usize {
        self.conv1.out_channels()
    }

    pub fn classes(&self) -> usize {
        self.conv2.out_channels()
    }

    /// Channel count of each quantized activation site.
    pub fn layer_channels(&self) -> [usize; NUM_LAYERS] {
        [self.mid_channels(), self.mid_channels()]
    }

    /// Symmetric min-max weight parameters per conv layer; `None` bypasses.
    pub fn weight_minmax_params(&self, bits: &[Option<u8>]) -> Result<Vec<Option<QuantParams>>> {
        check_layers(bits.len())?;
        [&self.conv1, &self.conv2]
            .iter()
            .zip(bits)
            .map(|(conv, b)| b.map(|b| calibrate_symmetric(conv.weights(), b)).transpose())
            .collect()
    }

    /// Copy of the model with weights (not biases) fake-quantized.
    pub fn with_quantized_weights(&self, params: &[Option<QuantParams>]) -> Result<Self> {
        check_layers(params.len())?;
        let q = |conv: &Conv3x3, p: &Option<QuantParams>| match p {
            Some(p) => conv.with_weights(conv.weights().map(|v| p.fake_quantize_value(v)).expect("finite")),
            None => conv.clone(),
        };
        Ok(Self {
            conv1: q(&self.conv1, &params[0]),
            conv2: q(&self.conv2, &params[1]),
        })
    }
}

fn check_layers(n: usize) -> Result<()> {
    if n == NUM_LAYERS {
        Ok(())
    } else {
        Err(Error::BadLayer {
            layer: n.saturating_sub(1),
            count: NUM_LAYERS,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapOutput {
    /// Shape `(C, H, W)`, values in `(0, 1)`.
    pub heatmap: Tensor,
}

impl HeatmapOutput {
    pub fn classes(&self) -> usize {
        self.heatmap.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.heatmap.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.heatmap.shape()[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.heatmap.data()[c * n..(c + 1) * n]
    }

    /// The `n` strongest local maxima of channel `c` (cells no smaller than
    /// any of their 8 neighbours), as `(value, flat index)` in descending
    /// order with ties to the lower index. Fewer are returned when the
    /// channel has fewer maxima.
    pub fn peaks(&self, c: usize, n: usize) -> Vec<(f64, usize)> {
        let (h, w) = (self.height(), self.width());
        let plane = self.channel(c);
        let mut found: Vec<(f64, usize)> = (0..h * w)
            .filter(|&i| {
                let (y, x) = (i / w, i % w);
                (y.saturating_sub(1)..(y + 2).min(h))
                    .all(|ny| (x.saturating_sub(1)..(x + 2).min(w)).all(|nx| plane[ny * w + nx] <= plane[i]))
            })
            .map(|i| (plane[i], i))
            .collect();
        found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        found.truncate(n);
        found
    }
}

/// Activations seen during one forward pass.
///
/// `activations[0]` is the conv1 output and `activations[1]` the ReLU output
/// feeding conv2, each as consumed by the next stage (after fake
/// quantization when that site is quantized).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub activations: Vec<Tensor>,
    pub logits: Tensor,
    pub heatmap: Tensor,
}

pub fn forward(model: &DetectorModel, scene: &Scene) -> Result<(HeatmapOutput, ActivationTrace)> {
    forward_grid(model, &scene.grid, &[None, None])
}

/// Forward pass with fake-quantized weights and activations; `None` entries
/// bypass quantization for that layer.
pub fn forward_quantized(
    model: &DetectorModel,
    scene: &Scene,
    weight_params: &[Option<QuantParams>],
    act_params: &[Option<QuantParams>],
) -> Result<(HeatmapOutput, ActivationTrace)> {
    if weight_params.iter().all(Option::is_none) {
        check_layers(weight_params.len())?;
        return forward_grid(model, &scene.grid, act_params);
    }
    forward_grid(&model.with_quantized_weights(weight_params)?, &scene.grid, act_params)
}

/// Forward pass on a raw `(C_in, H, W)` input with optional activation
/// fake-quantization.
pub fn forward_grid(
    model: &DetectorModel,
    grid: &Tensor,
    act_params: &[Option<QuantParams>],
) -> Result<(HeatmapOutput, ActivationTrace)> {
    check_layers(act_params.len())?;
    let s = grid.shape();
    if s.len() != 3 || s[0] != model.in_channels() {
        return Err(Error::ShapeMismatch {
            expected: vec![
                model.in_channels(),
                s.get(1).copied().unwrap_or(1),
                s.get(2).copied().unwrap_or(1),
            ],
            actual: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mid = model.mid_channels();

    let mut x1 = model.conv1.forward(grid.data(), h, w);
    if let Some(p) = &act_params[0] {
        x1.iter_mut().for_each(|v| *v = p.fake_quantize_value(*v));
    }
    let mut x2: Vec<f64> = x1.iter().map(|&v| relu(v)).collect();
    if let Some(p) = &act_params[1] {
        x2.iter_mut().for_each(|v| *v = p.fake_quantize_value(*v));
    }
    let logits = model.conv2.forward(&x2, h, w);
    let heat: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();

    let c = model.classes();
    let heatmap = Tensor::new(vec![c, h, w], heat)?;
    let trace = ActivationTrace {
        activations: vec![Tensor::new(vec![mid, h, w], x1)?, Tensor::new(vec![mid, h, w], x2)?],
        logits: Tensor::new(vec![c, h, w], logits)?,
        heatmap: heatmap.clone(),
    };
    Ok((HeatmapOutput { heatmap }, trace))
}

/// Reverse-mode gradients of a scalar loss with respect to every traced
/// activation, given `dL/dheatmap`.
///
/// Activation quantizers are treated as identity (straight-through) and the
/// ReLU derivative at exactly 0 is 0.
pub fn backward_heatmap(model: &DetectorModel, trace: &ActivationTrace, dl_dheatmap: &Tensor) -> Result<GradientTrace> {
    if dl_dheatmap.shape() != trace.heatmap.shape() {
        return Err(Error::ShapeMismatch {
            expected: trace.heatmap.shape().to_vec(),
            actual: dl_dheatmap.shape().to_vec(),
        });
    }
    let (h, w) = (trace.heatmap.shape()[1], trace.heatmap.shape()[2]);
    let d_logits: Vec<f64> = dl_dheatmap
        .data()
        .iter()
        .zip(trace.heatmap.data())
        .map(|(&g, &p)| g * p * (1.0 - p))
        .collect();
    let g2 = model.conv2.backward_input(&d_logits, h, w);
    let g1: Vec<f64> = g2
        .iter()
        .zip(trace.activations[0].data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    let shape = trace.activations[0].shape().to_vec();
    Ok(GradientTrace {
        gradients: vec![Tensor::new(shape.clone(), g1)?, Tensor::new(shape, g2)?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::calibrate_minmax;

    fn model_zero(c_in: usize, mid: usize, c: usize) -> DetectorModel {
        DetectorModel::new(
            Conv3x3::new(
                Tensor::zeros(vec![mid, c_in, 3, 3]).unwrap(),
                Tensor::zeros(vec![mid]).unwrap(),
            )
            .unwrap(),
            Conv3x3::new(
                Tensor::zeros(vec![c, mid, 3, 3]).unwrap(),
                Tensor::zeros(vec![c]).unwrap(),
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn delta_conv(c: usize) -> Conv3x3 {
        let mut w = vec![0.0; c * c * 9];
        for i in 0..c {
            w[(i * c + i) * 9 + 4] = 1.0;
        }
        Conv3x3::new(
            Tensor::new(vec![c, c, 3, 3], w).unwrap(),
            Tensor::zeros(vec![c]).unwrap(),
        )
        .unwrap()
    }

    fn seeded_pair(seed: u64) -> (DetectorModel, Scene) {
        let model = DetectorModel::seeded(&ModelConfig::default(), &mut SeededRng::new(seed)).unwrap();
        let scene = generate_scene(&SceneConfig::default(), &mut SeededRng::new(seed + 100)).unwrap();
        (model, scene)
    }

    #[test]
    fn empty_scene_is_zero() {
        let cfg = SceneConfig {
            n_objects: 0,
            n_anomalies: 0,
            noise_amplitude: 0.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, &mut SeededRng::new(1)).unwrap();
        assert!(scene.grid.data().iter().all(|&v| v == 0.0));
        assert!(scene.object_centers.is_empty() && scene.anomaly_cells.is_empty());
    }

    #[test]
    fn scene_bookkeeping() {
        let cfg = SceneConfig {
            n_objects: 2,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, &mut SeededRng::new(9)).unwrap();
        assert_eq!(scene.object_centers.len(), 2);
        assert_eq!(scene.anomaly_cells.len(), cfg.n_anomalies);
        assert_eq!(scene.seed, 9);
        for a in &scene.anomaly_cells {
            assert!(a.row < cfg.height && a.col < cfg.width);
            assert!(!scene.object_centers.iter().any(|o| o.row == a.row && o.col == a.col));
        }
        for o in &scene.object_centers {
            assert!(o.row >= cfg.margin && o.row < cfg.height - cfg.margin);
            assert!(o.col >= cfg.margin && o.col < cfg.width - cfg.margin);
        }
    }

    #[test]
    fn anomalies_outshine_objects() {
        let cfg = SceneConfig::default();
        let scene = generate_scene(&cfg, &mut SeededRng::new(5)).unwrap();
        let hw = cfg.height * cfg.width;
        let at = |ch: usize, r: usize, c: usize| scene.grid.data()[ch * hw + r * cfg.width + c];
        let anomaly_max = scene
            .anomaly_cells
            .iter()
            .map(|a| at(a.channel, a.row, a.col))
            .fold(f64::MIN, f64::max);
        let object_max = scene
            .object_centers
            .iter()
            .map(|o| at(o.class, o.row, o.col))
            .fold(f64::MIN, f64::max);
        assert!(anomaly_max > object_max, "{anomaly_max} vs {object_max}");
    }

    #[test]
    fn capacity_errors() {
        let cfg = SceneConfig {
            height: 4,
            width: 4,
            margin: 0,
            n_objects: 10,
            n_anomalies: 10,
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(&cfg, &mut SeededRng::new(0)),
            Err(Error::InvalidScene(_))
        ));
        let crowded = SceneConfig {
            n_objects: 40,
            min_separation: 8,
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(&crowded, &mut SeededRng::new(0)),
            Err(Error::PlacementFailed { .. })
        ));
    }

    #[test]
    fn scenes_are_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, &mut SeededRng::new(77)).unwrap();
        let b = generate_scene(&cfg, &mut SeededRng::new(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_model_gives_half_heatmap() {
        let scene = generate_scene(&SceneConfig::default(), &mut SeededRng::new(3)).unwrap();
        let (heat, _) = forward(&model_zero(2, 4, 2), &scene).unwrap();
        assert!(heat.heatmap.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn delta_kernels_pass_input_through() {
        let model = DetectorModel::new(delta_conv(2), delta_conv(2)).unwrap();
        let scene = generate_scene(&SceneConfig::default(), &mut SeededRng::new(4)).unwrap();
        let (_, trace) = forward(&model, &scene).unwrap();
        assert_eq!(trace.logits.data(), scene.grid.data());
    }

    #[test]
    fn bypass_quantization_matches_forward() {
        let (model, scene) = seeded_pair(12);
        let fp = forward(&model, &scene).unwrap();
        let q = forward_quantized(&model, &scene, &[None, None], &[None, None]).unwrap();
        assert_eq!(fp, q);
    }

    #[test]
    fn coarser_bits_do_not_reduce_layer_error() {
        let (model, scene) = seeded_pair(21);
        let (_, fp) = forward(&model, &scene).unwrap();
        let layer_mse = |bits: u8| {
            let p0 = calibrate_minmax(&fp.activations[0], bits, None).unwrap();
            let p1 = calibrate_minmax(&fp.activations[1], bits, None).unwrap();
            let (_, q) = forward_quantized(&model, &scene, &[None, None], &[Some(p0), Some(p1)]).unwrap();
            (0..NUM_LAYERS)
                .map(|l| {
                    let a = fp.activations[l].data();
                    let b = q.activations[l].data();
                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
                })
                .collect::<Vec<_>>()
        };
        let (m8, m4) = (layer_mse(8), layer_mse(4));
        for l in 0..NUM_LAYERS {
            assert!(m8[l] > 0.0);
            assert!(m4[l] >= m8[l], "layer {l}: {} < {}", m4[l], m8[l]);
        }
    }

    #[test]
    fn backward_is_linear() {
        let (model, scene) = seeded_pair(30);
        let (_, trace) = forward(&model, &scene).unwrap();
        let zero = Tensor::zeros(trace.heatmap.shape().to_vec()).unwrap();
        let g0 = backward_heatmap(&model, &trace, &zero).unwrap();
        assert!(g0.gradients.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));

        let mut rng = SeededRng::new(8);
        let up = trace.heatmap.map(|_| rng.normal()).unwrap();
        let g1 = backward_heatmap(&model, &trace, &up).unwrap();
        let g2 = backward_heatmap(&model, &trace, &up.scale(2.0).unwrap()).unwrap();
        for (a, b) in g1.gradients.iter().zip(&g2.gradients) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn objects_lead_the_heatmap() {
        // The shaped model ranks object centres above anomaly speckle.
        let mut hits = 0;
        let mut total = 0;
        for seed in 0..20 {
            let (model, scene) = seeded_pair(seed);
            let (heat, _) = forward(&model, &scene).unwrap();
            for o in &scene.object_centers {
                let n = scene.object_centers.iter().filter(|p| p.class == o.class).count();
                let top = heat.peaks(o.class, n);
                total += 1;
                let near = |i: usize| {
                    let (r, c) = (i / scene.width(), i % scene.width());
                    r.abs_diff(o.row) <= 1 && c.abs_diff(o.col) <= 1
                };
                if top.iter().any(|&(_, i)| near(i)) {
                    hits += 1;
                }
            }
        }
        assert!(hits * 10 >= total * 9, "{hits}/{total}");
    }

    #[test]
    fn weight_quantization_bookkeeping() {
        let (model, _) = seeded_pair(2);
        let params = model.weight_minmax_params(&[Some(4), Some(4)]).unwrap();
        assert_eq!(params.len(), 2);
        let q = model.with_quantized_weights(&params).unwrap();
        let p = params[0].unwrap();
        assert!(q
            .conv1()
            .weights()
            .data()
            .iter()
            .all(|&v| p.fake_quantize_value(v) == v));
        assert_eq!(q.conv1().bias(), model.conv1().bias());
        assert!(model.weight_minmax_params(&[Some(4)]).is_err());
    }
}
