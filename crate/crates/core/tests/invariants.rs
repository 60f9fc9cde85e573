use ndarray::Array2;
use proptest::prelude::*;

use shm_fomo::anomaly::{calibrate_threshold, classify, median_smooth, ThresholdConfig};
use shm_fomo::baselines::{KnnRegressor, PcaModel};
use shm_fomo::eval::{parse_predictions_csv, predictions_csv, regression_metrics};
use shm_fomo::model::{depatchify, patchify, pretrain_loss, MaskPlan};
use shm_fomo::signal::{
    compute_target, energy_keep, make_windows, normalize, spectrogram, PipelineConfig,
    RawRecording, TimeWindow, VehicleClass,
};
use shm_fomo::synth::{expected_target, gen_traffic, BridgeConfig, TrafficConfig};
use shm_fomo::train::{adamw_update, lr_at, AdamConfig, Phase, TrainPlan};

fn series(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_match_direct_slicing(samples in prop::collection::vec(-1.0..1.0f32, 500..3000), stride in 1usize..40) {
        let rec = RawRecording::new(samples.clone(), 100, None).unwrap();
        let cfg = PipelineConfig { window_s: 5.0, stride_s: stride as f64 / 10.0, ..PipelineConfig::uc1() };
        let windows = make_windows(&rec, &cfg).unwrap();
        let step = cfg.stride_len(100);
        prop_assert_eq!(windows.len(), (samples.len() - 500) / step + 1);
        for (i, w) in windows.iter().enumerate() {
            let direct = TimeWindow::from_slice(&samples[i * step..i * step + 500], i * step);
            prop_assert_eq!(w, &direct);
        }
    }

    #[test]
    fn energy_filter_commutes_with_order(samples in prop::collection::vec(-1.0..1.0f32, 500..3000), thr in 0.0..0.5f64) {
        let rec = RawRecording::new(samples, 100, None).unwrap();
        let windows = make_windows(&rec, &PipelineConfig::uc1()).unwrap();
        let kept: Vec<usize> = windows.iter().filter(|w| energy_keep(w, thr)).map(|w| w.start_index).collect();
        let mut reversed: Vec<usize> =
            windows.iter().rev().filter(|w| energy_keep(w, thr)).map(|w| w.start_index).collect();
        reversed.reverse();
        prop_assert_eq!(kept, reversed);
    }

    #[test]
    fn normalize_is_idempotent(values in prop::collection::vec(-3.0..3.0f32, 50..400)) {
        let w = TimeWindow::from_slice(&values, 0);
        prop_assume!(w.raw_energy > 1e-6);
        let once = normalize(&w);
        let twice = normalize(&once);
        for (a, b) in once.values.iter().zip(&twice.values) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn spectrogram_is_deterministic(values in series(297..700)) {
        let a = spectrogram(&values).unwrap();
        let b = spectrogram(&values).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn target_matches_vehicle_bookkeeping(seed in 0u64..1000, class in 0usize..3) {
        let class = [VehicleClass::Any, VehicleClass::Light, VehicleClass::Heavy][class];
        let bridge = BridgeConfig { seed, ..Default::default() };
        let traffic = TrafficConfig { seed, ..TrafficConfig::dense() };
        let tr = gen_traffic(&bridge, &traffic, 180.0).unwrap();
        let labels = tr.recording.labels.as_ref().unwrap();
        for start in (0..labels.len() - 6000).step_by(1500) {
            let from_labels = compute_target(&labels[start..start + 6000], class).unwrap();
            prop_assert_eq!(from_labels, expected_target(&tr.vehicles, start, 6000, class));
        }
    }

    #[test]
    fn patchify_round_trip(size_idx in 0usize..6, seed in any::<u64>()) {
        let p = [1usize, 2, 4, 5, 10, 20][size_idx];
        let mut s = seed;
        let img = Array2::from_shape_simple_fn((100, 100), || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 40) as f32
        });
        let back = depatchify(patchify(img.view(), p).unwrap().view(), p).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn mask_plan_partitions_patches(n in 1usize..400, ratio in 0.0..0.99f64, seed in any::<u64>()) {
        let plan = MaskPlan::sample(n, ratio, seed).unwrap();
        prop_assert_eq!(plan.masked.len(), (ratio * n as f64).round() as usize);
        let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(MaskPlan::sample(n, ratio, seed).unwrap(), plan);
    }

    #[test]
    fn visible_target_pixels_do_not_affect_loss(seed in any::<u64>(), bump in -10.0..10.0f64) {
        let plan = MaskPlan::sample(100, 0.8, seed).unwrap();
        let pred = Array2::from_shape_fn((100, 100), |(r, c)| ((r * 7 + c * 3) % 11) as f64 / 11.0);
        let truth = Array2::from_shape_fn((100, 100), |(r, c)| ((r * 5 + c) % 13) as f64 / 13.0);
        let base = pretrain_loss(pred.view(), truth.view(), &plan, 10).unwrap();
        let mut bent = truth.clone();
        let v = plan.visible[0];
        for r in (v / 10) * 10..(v / 10) * 10 + 10 {
            for c in (v % 10) * 10..(v % 10) * 10 + 10 {
                bent[[r, c]] += bump;
            }
        }
        let after = pretrain_loss(pred.view(), bent.view(), &plan, 10).unwrap();
        prop_assert_eq!(base.to_bits(), after.to_bits());
    }

    #[test]
    fn schedule_is_continuous_and_non_increasing(epochs in 2usize..400, warm_frac in 0.0..1.0f64, lr in 1e-6..1e-2f64) {
        let warmup = ((epochs - 1) as f64 * warm_frac) as usize;
        let plan = TrainPlan { epochs, warmup_epochs: warmup, base_lr: lr, ..TrainPlan::defaults(Phase::Pretrain) };
        prop_assert_eq!(lr_at(&plan, warmup).unwrap(), lr);
        if warmup > 0 {
            let before = lr_at(&plan, warmup - 1).unwrap();
            prop_assert!(lr - before <= lr / warmup as f64 * (1.0 + 1e-12));
        }
        for e in warmup + 1..epochs {
            prop_assert!(lr_at(&plan, e).unwrap() <= lr_at(&plan, e - 1).unwrap());
        }
    }

    #[test]
    fn adamw_matches_hand_rolled_step(p in prop::collection::vec(-1.0..1.0f64, 5), g in prop::collection::vec(-1.0..1.0f64, 5), lr in 1e-5..1e-1f64, wd in 0.0..0.1f64) {
        let cfg = AdamConfig::default();
        let mut params = p.clone();
        let mut m = vec![0.0; 5];
        let mut v = vec![0.0; 5];
        adamw_update(&mut params, &g, &mut m, &mut v, 1, lr, wd, &cfg);
        for i in 0..5 {
            let m1 = (1.0 - cfg.beta1) * g[i];
            let v1 = (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m1 / (1.0 - cfg.beta1);
            let vhat = v1 / (1.0 - cfg.beta2);
            let want = p[i] - lr * wd * p[i] - lr * mhat / (vhat.sqrt() + cfg.eps);
            prop_assert!((params[i] - want).abs() <= 1e-12, "{} vs {}", params[i], want);
        }
    }

    #[test]
    fn median_smooth_is_monotone(x in series(1..200), bumps in prop::collection::vec(0.0..2.0f64, 200), len in 1usize..50) {
        let y: Vec<f64> = x.iter().zip(&bumps).map(|(a, b)| a + b).collect();
        let sx = median_smooth(&x, len).unwrap();
        let sy = median_smooth(&y, len).unwrap();
        prop_assert!(sx.iter().zip(&sy).all(|(a, b)| a <= b));
    }

    #[test]
    fn odd_median_equals_majority_vote(x in series(1..200), half in 0usize..30, thr in -2.0..2.0f64) {
        let len = 2 * half + 1;
        let smoothed = classify(&median_smooth(&x, len).unwrap(), thr);
        let raw = classify(&x, thr);
        for i in 0..x.len() {
            let lo = (i + 1).saturating_sub(len);
            let votes = raw[lo..=i].iter().filter(|v| v.is_anomaly()).count();
            prop_assert_eq!(smoothed[i].is_anomaly(), 2 * votes > i + 1 - lo);
        }
    }

    #[test]
    fn threshold_is_minimal_grid_point(train in prop::collection::vec(0.1..1.0f64, 1..40), cal in prop::collection::vec(0.1..3.0f64, 1..40)) {
        let cfg = ThresholdConfig::default();
        let c = calibrate_threshold(&train, &cal, &cfg).unwrap();
        let max = cal.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(c.threshold >= max);
        if c.steps > 0 {
            let prev = c.init + (c.steps - 1) as f64 * c.init.abs() * cfg.step_fraction;
            prop_assert!(prev < max);
        }
    }

    #[test]
    fn regression_metric_ranges(truth in series(2..100), noise in series(100..101)) {
        let pred: Vec<f64> = truth.iter().zip(&noise).map(|(t, n)| t + n).collect();
        let m = regression_metrics(&pred, &truth).unwrap();
        prop_assert!(m.mse >= 0.0 && m.mae >= 0.0);
        if let Some(r2) = m.r2 {
            prop_assert!(r2 <= 1.0);
        }
        let (t2, p2) = parse_predictions_csv(&predictions_csv(&truth, &pred)).unwrap();
        prop_assert_eq!(regression_metrics(&p2, &t2).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pca_error_non_increasing_in_components(seed in any::<u64>()) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let windows: Vec<Vec<f64>> = (0..30).map(|_| (0..20).map(|_| next()).collect()).collect();
        let probe: Vec<f64> = (0..20).map(|_| next()).collect();
        let mut last = f64::INFINITY;
        for k in 1..=20 {
            let e = PcaModel::fit_components(&windows, k).unwrap().error(&probe).unwrap();
            prop_assert!(e <= last + 1e-9, "k {k}: {e} > {last}");
            last = e;
        }
    }

    #[test]
    fn knn_ignores_training_order(
        rows in prop::collection::vec(prop::collection::vec(-3i32..3, 3), 8..30),
        query in prop::collection::vec(-3.0..3.0f64, 3),
        k in 1usize..8,
        shift in 1usize..29,
    ) {
        // Integer grids produce many tied distances.
        let features: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        prop_assume!((0..3).all(|j| features.iter().any(|f| f[j] != features[0][j])));
        let targets: Vec<f64> = (0..features.len()).map(|i| i as f64).collect();
        let n = features.len();
        let shift = shift % n;
        let a = KnnRegressor::fit(&features, &targets, k).unwrap().predict(&query).unwrap();
        let rf: Vec<Vec<f64>> = features.iter().cycle().skip(shift).take(n).cloned().collect();
        let rt: Vec<f64> = targets.iter().cycle().skip(shift).take(n).cloned().collect();
        let b = KnnRegressor::fit(&rf, &rt, k).unwrap().predict(&query).unwrap();
        // Ties at the k-th neighbour resolve by position, so the neighbour set
        // is order independent only when the k-th and (k+1)-th distances differ.
        let std = shm_fomo::baselines::Standardizer::fit(&features).unwrap();
        let q = std.apply(&query);
        let mut d: Vec<f64> = features
            .iter()
            .map(|f| std.apply(f).iter().zip(&q).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        d.sort_by(|x, y| x.total_cmp(y));
        if k < n && d[k] - d[k - 1] > 1e-9 {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
