//! Full-size toy training run on the 64×64 synthetic set.

use dualad::backbone::{init_networks, train, Arch, BackboneBundle, SizeTag, TrainHParams};
use dualad::dataset::{generate_synthetic, AnomalyFamily, Split, SynthConfig};
use dualad::detector::{calibrate, CalibrationConfig};
use dualad::picturable::local_map;

fn held_out_discrepancy(bundle: &BackboneBundle, images: &[dualad::dataset::ImageSample]) -> f64 {
    let per_image: Vec<f64> = images
        .iter()
        .map(|s| {
            let o = bundle.forward(&s.pixels).unwrap();
            let m = local_map(&o.teacher_map, &o.student_former).unwrap();
            m.values().iter().sum::<f64>() / m.values().len() as f64
        })
        .collect();
    per_image.iter().sum::<f64>() / per_image.len() as f64
}

#[test]
fn five_hundred_steps_on_synthetic_data() {
    let dataset = generate_synthetic(&SynthConfig::with_counts(200, 50, 40, 30, 30, 0)).unwrap();
    let trainset = dataset.split(Split::Train).unwrap();
    let validation = dataset.split(Split::Validation).unwrap();
    let initial = init_networks(Arch::for_input(64, 64, 1, SizeTag::S), 0).unwrap();
    let hp = TrainHParams {
        steps: 500,
        learning_rate: 3e-3,
        seed: 0,
        ..Default::default()
    };
    let (trained, trace) = train(initial.clone(), trainset, &hp).unwrap();

    // Compare against the untrained networks under the same teacher standardization.
    let mut before = initial;
    before.fit_teacher_norm(trainset);
    let (d0, d1) = (
        held_out_discrepancy(&before, validation),
        held_out_discrepancy(&trained, validation),
    );
    assert!(
        d0 / d1 >= 10.0,
        "held-out discrepancy {d0} -> {d1}, ratio {:.2}",
        d0 / d1
    );

    let windows = trace.window_means(50);
    assert_eq!(windows.len(), 10);
    for w in windows.windows(2) {
        assert!(w[1] <= w[0], "smoothed loss went up: {windows:?}");
    }

    // Mahalanobis scores: held-out normal images sit closer than unpicturable anomalies.
    let detector = calibrate(trained, &dataset, &CalibrationConfig::default()).unwrap();
    let mean_score = |samples: Vec<&dualad::dataset::ImageSample>| {
        let n = samples.len() as f64;
        samples
            .iter()
            .map(|s| detector.score(&s.pixels).unwrap().unpicturable.unwrap())
            .sum::<f64>()
            / n
    };
    let normal = mean_score(validation.iter().collect());
    let unpicturable = mean_score(
        dataset
            .split(Split::Test)
            .unwrap()
            .iter()
            .filter(|s| s.anomaly_family == Some(AnomalyFamily::Unpicturable))
            .collect(),
    );
    assert!(
        normal < unpicturable,
        "normal {normal} vs unpicturable {unpicturable}"
    );
}
