//! Property tests for the structural invariants.

use hemodeconv::hrf::{fwhm, gamma_hrf, peak_latency, HrfParams};
use hemodeconv::lagcorr::{dehankelize, hankelize};
use hemodeconv::metrics::{iou_seconds, BinarySchedule};
use hemodeconv::sim::RoiTimeSeries;
use hemodeconv::stability::otsu_reject;
use ndarray::Array2;
use proptest::prelude::*;

fn series_strategy() -> impl Strategy<Value = RoiTimeSeries> {
    (2usize..4, 12usize..40).prop_flat_map(|(m, n)| {
        proptest::collection::vec(-10.0f64..10.0, m * n).prop_map(move |values| {
            let data = Array2::from_shape_vec((m, n), values).unwrap();
            let labels = (0..m).map(|i| format!("r{i}")).collect();
            RoiTimeSeries::new(data, 4.0, labels).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hankel_roundtrip_is_lossless(series in series_strategy(), depth in 2usize..8) {
        prop_assume!(series.n_samples() > depth);
        let stack = hankelize(&series, depth).unwrap();
        let back = dehankelize(&stack, series.fs, series.labels.clone()).unwrap();
        // Averaging k identical copies rounds within an ulp or two.
        for (a, b) in back.data.iter().zip(series.data.iter()) {
            prop_assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn otsu_retention_survives_scaling(
        costs in proptest::collection::vec(0.01f64..100.0, 4..16),
        scale in 0.001f64..1000.0,
    ) {
        let scaled: Vec<f64> = costs.iter().map(|c| c * scale).collect();
        let a = otsu_reject(&costs).ok();
        let b = otsu_reject(&scaled).ok();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn otsu_never_drops_the_best_run(
        costs in proptest::collection::vec(0.01f64..100.0, 4..16),
    ) {
        if let Ok(retained) = otsu_reject(&costs) {
            let best = costs
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            prop_assert!(retained.contains(&best));
        }
    }

    #[test]
    fn kernel_amplitude_scaling_is_pointwise(
        shape in 1.05f64..20.0,
        rate in 0.2f64..5.0,
        scale in 0.1f64..10.0,
    ) {
        let base = HrfParams::new(1.0, shape, rate).unwrap();
        let scaled = HrfParams::new(scale, shape, rate).unwrap();
        let f0 = gamma_hrf(&base, 0.1, 200).unwrap();
        let f1 = gamma_hrf(&scaled, 0.1, 200).unwrap();
        for (a, b) in f0.taps.iter().zip(&f1.taps) {
            prop_assert!((scale * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
        // Latency and width are amplitude-free.
        prop_assert_eq!(
            peak_latency(&base).unwrap(),
            peak_latency(&scaled).unwrap()
        );
        if f0.max_tap().1 > 0.0 {
            prop_assert!((fwhm(&f0).unwrap() - fwhm(&f1).unwrap()).abs() <= 1e-9);
        }
    }

    #[test]
    fn iou_stays_within_bounds(
        t_start in 0.0f64..50.0,
        e_offset in -6.0f64..6.0,
        e_len in 0.5f64..10.0,
    ) {
        let duration = 4.0;
        let truth = BinarySchedule::new(vec![(t_start, t_start + duration)]).unwrap();
        let e_start = t_start + e_offset;
        let est = BinarySchedule::new(vec![(e_start, e_start + e_len)]).unwrap();
        let result = iou_seconds(&truth, &est, duration).unwrap();
        prop_assert!(result.mean_seconds >= 0.0);
        prop_assert!(result.mean_seconds <= duration + 1e-12);
        // Perfect score only for an exact match.
        if (e_offset.abs() > 1e-9) || ((e_len - duration).abs() > 1e-9) {
            prop_assert!(result.mean_seconds < duration);
        }
    }
}
