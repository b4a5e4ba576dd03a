use lsrs_core::nn::FeatureMap;
use lsrs_core::rng::StreamKey;
use lsrs_core::synth::{Checker, World};

fn calibrated() -> (World, Checker) {
    let world = World::standard(8, 32, 4).unwrap();
    let mut checker = Checker::new(&world);
    checker.calibrate(1000, 0.995, 0.5, StreamKey::root(1).derive_str("calibration")).unwrap();
    (world, checker)
}

#[test]
fn fresh_samples_pass_and_other_classes_are_rejected() {
    let (world, checker) = calibrated();
    let key = StreamKey::root(2).derive_str("fresh");
    for class in 0..8 {
        let samples: Vec<FeatureMap> = (0..1000)
            .map(|i| world.generate_sample(class, key.derive(class as u64).derive(i)).unwrap().image)
            .collect();
        let valid = samples.iter().filter(|s| checker.check_validity(s, class).unwrap().0).count();
        assert!(valid >= 995, "class {class}: {valid}/1000 fresh samples valid");
        for other in (0..8).filter(|&o| o != class) {
            let rejected = samples[..100]
                .iter()
                .filter(|s| !checker.check_validity(s, other).unwrap().0)
                .count();
            assert!(rejected >= 95, "class {class} checked as {other}: only {rejected}/100 rejected");
        }
    }
}

#[test]
fn blank_image_is_invalid_for_every_class() {
    let (_, checker) = calibrated();
    for class in 0..8 {
        let (ok, v) = checker.check_validity(&FeatureMap::zeros(32, 32, 4), class).unwrap();
        assert!(!ok && v > checker.thresholds()[class], "class {class}: violation {v}");
    }
}

#[test]
fn violation_moves_little_under_small_noise() {
    let world = World::standard(8, 32, 4).unwrap();
    let checker = Checker::new(&world);
    let key = StreamKey::root(4);
    for i in 0..100u64 {
        let class = (i % 8) as usize;
        let img = world.generate_sample(class, key.derive(i)).unwrap().image;
        let mut rng = key.derive_str("perturb").derive(i).stream();
        let mut noisy = img.clone();
        for v in noisy.data_mut() {
            let n: f32 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            *v += 0.01 * n;
        }
        let a = checker.violation(&img, class).unwrap();
        let b = checker.violation(&noisy, class).unwrap();
        assert!((a - b).abs() < 0.05, "sample {i}: {a} vs {b}");
    }
}
