use inlierq_core::calibrate::{inlier_objective, RegionWeights};
use inlierq_core::detector::{forward, generate_scene, DetectorModel, ModelConfig, SceneConfig};
use inlierq_core::inlier::{anomaly_posterior, em_fit, inlier_mask, kmeans2_fit, posterior, EmOptions, GmmModel};
use inlierq_core::quant::{minmax_params, QuantParams};
use inlierq_core::rng::SeededRng;
use inlierq_core::saliency::{loss_gradient, select_topk, SaliencyField, TopKLossSpec};
use inlierq_core::tensor::Tensor;
use proptest::prelude::*;

fn mixture() -> impl Strategy<Value = GmmModel> {
    (
        -10.0f64..10.0,
        -10.0f64..10.0,
        0.01f64..9.0,
        0.01f64..9.0,
        0.01f64..0.99,
    )
        .prop_map(|(mi, ma, vi, va, p)| GmmModel {
            mean_inlier: mi.max(ma),
            mean_anomaly: mi.min(ma),
            var_inlier: vi,
            var_anomaly: va,
            prior_inlier: p,
            prior_anomaly: 1.0 - p,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codes_stay_in_range_and_roundtrip_error_is_bounded(
        x in -100.0f64..100.0,
        lo in -20.0f64..0.0,
        hi in 0.01f64..20.0,
        bits in 2u8..=8,
    ) {
        let p = minmax_params(lo, hi, bits).unwrap();
        let code = p.quantize_value(x);
        prop_assert!(p.code_low() <= code && code <= p.code_high());
        let (a, b) = p.range();
        if (a..=b).contains(&x) {
            prop_assert!((p.fake_quantize_value(x) - x).abs() <= p.scale() / 2.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn symmetric_grid_is_zero_centred(scale in 0.001f64..3.0, bits in 2u8..=8) {
        let p = QuantParams::signed_symmetric(scale, bits).unwrap();
        prop_assert_eq!(p.zero_point(), 0);
        prop_assert_eq!((p.code_low(), p.code_high()), (-(1 << (bits - 1)), (1 << (bits - 1)) - 1));
        prop_assert_eq!(p.fake_quantize_value(0.0), 0.0);
    }

    #[test]
    fn posteriors_are_complementary(m in mixture(), x in -1e3f64..1e3) {
        let a = posterior(&m, x);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + anomaly_posterior(&m, x) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn masks_shrink_as_tau_grows(
        m in mixture(),
        scores in prop::collection::vec(-20.0f64..20.0, 36),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let field = SaliencyField { scores: Tensor::new(vec![6, 6], scores).unwrap(), layer: 0 };
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let wide = inlier_mask(&m, &field, lo).unwrap();
        let narrow = inlier_mask(&m, &field, hi).unwrap();
        prop_assert!(narrow.mask.iter().zip(&wide.mask).all(|(n, w)| !*n || *w));
    }

    #[test]
    fn em_log_likelihood_never_decreases(seed in 0u64..1_000, gap in 0.0f64..8.0, n in 10usize..300) {
        let mut rng = SeededRng::new(seed);
        let data: Vec<f64> = (0..n).map(|i| rng.gaussian(if i % 3 == 0 { gap } else { 0.0 }, 1.0)).collect();
        let fit = em_fit(&data, &EmOptions::default(), &mut SeededRng::new(seed)).unwrap();
        prop_assert!(fit.loglik_history.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0)));
        prop_assert!(fit.model.mean_inlier >= fit.model.mean_anomaly);
        prop_assert!((fit.model.prior_inlier + fit.model.prior_anomaly - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_reaches_a_lloyd_fixed_point(scores in prop::collection::vec(-50.0f64..50.0, 2..200)) {
        let fit = kmeans2_fit(&scores, 1_000).unwrap();
        let (mut hi, mut n_hi, mut lo, mut n_lo) = (0.0, 0usize, 0.0, 0usize);
        for (s, &label) in scores.iter().zip(&fit.labels) {
            // Every point sits with its nearest centroid, ties going low.
            let nearer_high = (s - fit.centroid_high).abs() < (s - fit.centroid_low).abs();
            prop_assert_eq!(label, nearer_high);
            if label { hi += s; n_hi += 1 } else { lo += s; n_lo += 1 }
        }
        if n_hi > 0 {
            prop_assert!((hi / n_hi as f64 - fit.centroid_high).abs() < 1e-9);
        }
        if n_lo > 0 {
            prop_assert!((lo / n_lo as f64 - fit.centroid_low).abs() < 1e-9);
        }
    }

    #[test]
    fn objective_is_linear_in_the_region_weights(
        seed in 0u64..1_000,
        wi in 0.0f64..4.0,
        wa in 0.0f64..4.0,
        scale in 0.05f64..1.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::new(vec![2, 2, 3, 3], (0..36).map(|_| rng.gaussian(0.5, 1.0)).collect()).unwrap();
        let fim = Tensor::new(vec![2, 3, 3], (0..18).map(|_| rng.uniform(0.0, 2.0)).collect()).unwrap();
        let mask: Vec<bool> = (0..18).map(|i| i % 4 != 0).collect();
        let p = QuantParams::unsigned(scale, 3, 4).unwrap();
        let at = |inlier, anomaly| inlier_objective(&x, &p, &fim, &mask, RegionWeights { inlier, anomaly }).unwrap();
        let (i, a) = (at(1.0, 0.0), at(0.0, 1.0));
        prop_assert!(i >= 0.0 && a >= 0.0);
        prop_assert!((at(wi, wa) - (wi * i + wa * a)).abs() <= 1e-12 * (1.0 + wi * i + wa * a));
    }
}

#[test]
fn loss_gradient_lives_on_the_selection() {
    let model = DetectorModel::seeded(&ModelConfig::default(), &mut SeededRng::new(5)).unwrap();
    for seed in 0..5 {
        let scene = generate_scene(&SceneConfig::default(), &mut SeededRng::new(seed)).unwrap();
        let (heat, _) = forward(&model, &scene).unwrap();
        let k = 3;
        let g = loss_gradient(&heat, &TopKLossSpec::new(k, model.classes())).unwrap();
        let sel = select_topk(&heat, k).unwrap();
        let plane = heat.height() * heat.width();
        let count = (k * model.classes()) as f64;
        for (c, picks) in sel.iter().enumerate() {
            for i in 0..plane {
                let v = g.data()[c * plane + i];
                let h = heat.heatmap.data()[c * plane + i];
                if picks.contains(&i) {
                    assert!((v + 1.0 / (count * h)).abs() < 1e-12);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}
