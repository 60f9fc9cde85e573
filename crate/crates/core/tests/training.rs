use shm_fomo::eval::model_errors;
use shm_fomo::model::{MaeModel, ModelConfig};
use shm_fomo::signal::{build_dataset, PipelineConfig, SpectrogramWindow, VehicleClass};
use shm_fomo::synth::{gen_ambient, gen_traffic, BridgeConfig, TrafficConfig};
use shm_fomo::train::{finetune_ad, finetune_tle, pretrain, Phase, TrainPlan};

fn windows(bridge: &BridgeConfig, secs: f64) -> Vec<SpectrogramWindow> {
    let rec = gen_ambient(bridge, secs, false).unwrap();
    build_dataset(&[rec], &PipelineConfig::uc1())
        .unwrap()
        .windows
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn bridge_a(seed: u64) -> BridgeConfig {
    BridgeConfig {
        seed,
        ..Default::default()
    }
}

fn bridge_b(seed: u64) -> BridgeConfig {
    BridgeConfig {
        seed,
        modal_freqs: vec![4.6, 9.8, 17.3, 27.0],
        ..Default::default()
    }
}

#[test]
fn anomaly_finetune_adapts_to_a_new_structure() {
    let source = windows(&bridge_b(1), 400.0);
    let target = windows(&bridge_a(2), 400.0);
    let held_out = windows(&bridge_a(3), 300.0);

    let mut model = MaeModel::<f32>::new(ModelConfig::new(24, 16), 5).unwrap();
    let pre = TrainPlan {
        epochs: 20,
        warmup_epochs: 5,
        batch_size: 16,
        base_lr: 1e-3,
        seed: 5,
        ..TrainPlan::defaults(Phase::Pretrain)
    };
    pretrain(&mut model, &source, &pre).unwrap();
    let before = mean(&model_errors(&model, &held_out, 9).unwrap());

    let ft = TrainPlan {
        epochs: 20,
        batch_size: 16,
        base_lr: 1e-3,
        seed: 5,
        ..TrainPlan::defaults(Phase::FinetuneAd)
    };
    finetune_ad(&mut model, &target, &ft).unwrap();
    let after = mean(&model_errors(&model, &held_out, 9).unwrap());
    let shifted = mean(&model_errors(&model, &windows(&bridge_b(4), 300.0), 9).unwrap());
    eprintln!("before {before:.5} after {after:.5} source {shifted:.5}");
    assert!(after <= 0.7 * before, "error {before} -> {after}");
    assert!(
        shifted > after,
        "source structure {shifted} vs target {after}"
    );
}

#[test]
fn finetune_phases_are_reproducible() {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let rec = gen_traffic(
        &bridge_a(6),
        &TrafficConfig {
            seed: 6,
            ..TrafficConfig::dense()
        },
        600.0,
    )
    .unwrap();
    let cfg = PipelineConfig {
        stride_s: 20.0,
        ..PipelineConfig::uc2(VehicleClass::Any)
    };
    let traffic = build_dataset(&[rec.recording], &cfg).unwrap().windows;
    let ambient = windows(&bridge_a(7), 200.0);

    let run = || {
        pool.install(|| {
            let mut ad = MaeModel::<f32>::new(ModelConfig::new(24, 16), 8).unwrap();
            let plan = TrainPlan {
                epochs: 2,
                batch_size: 8,
                base_lr: 1e-3,
                seed: 8,
                ..TrainPlan::defaults(Phase::FinetuneAd)
            };
            let ad_log = finetune_ad(&mut ad, &ambient, &plan).unwrap();
            let base = MaeModel::<f32>::new(ModelConfig::new(24, 16), 8).unwrap();
            let plan = TrainPlan {
                epochs: 2,
                batch_size: 8,
                base_lr: 1e-3,
                seed: 8,
                ..TrainPlan::defaults(Phase::FinetuneTle)
            };
            let (_, tle_log) = finetune_tle(base, &traffic, &plan).unwrap();
            (ad_log.step_losses, tle_log.step_losses)
        })
    };
    let (a1, t1) = run();
    let (a2, t2) = run();
    assert!(!a1.is_empty() && !t1.is_empty());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&t1), bits(&t2));
}
