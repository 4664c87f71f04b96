use pacgnet_core::detect::predict::predict;
use pacgnet_core::detect::synth::{generate, Scene, SynthConfig};
use pacgnet_core::detect::train::{loss_trace_csv, train, TrainConfig};
use pacgnet_core::detect::{Detector, ModelConfig};
use pacgnet_core::eval::iou;
use pacgnet_core::PyramidConfig;

fn small_detector(enable: bool) -> Detector {
    Detector::new(ModelConfig {
        pyramid: PyramidConfig {
            input_size: 32,
            widths: [4, 8, 8, 8, 8],
            enable_scg: enable,
            enable_pfmg: enable,
        },
        num_classes: 2,
    })
    .unwrap()
}

fn scenes(count: usize, objects: usize, size: usize) -> Vec<Scene> {
    let cfg = SynthConfig {
        image_size: size,
        min_objects: objects,
        max_objects: objects,
        seed: 5,
        ..SynthConfig::default()
    };
    generate(&cfg, count).unwrap()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let det = small_detector(true);
    let mut ps = det.init_params(1).unwrap();
    let before = ps.clone();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        lr: 0.0,
        ..TrainConfig::default()
    };
    train(&det, &mut ps, &scenes(3, 2, 32), &cfg).unwrap();
    for (name, p) in before.iter() {
        assert_eq!(ps.value(name).unwrap(), &p.value, "{name}");
    }
}

#[test]
fn same_seed_same_run() {
    let data = scenes(5, 2, 32);
    let run = || {
        let det = small_detector(true);
        let mut ps = det.init_params(3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let trace = train(&det, &mut ps, &data, &cfg).unwrap();
        (loss_trace_csv(&trace), ps.to_checkpoint())
    };
    assert_eq!(run(), run());
}

#[test]
fn single_scene_overfits() {
    let det = Detector::new(ModelConfig {
        pyramid: PyramidConfig::default(),
        num_classes: 2,
    })
    .unwrap();
    let data = scenes(1, 1, 64);
    assert_eq!(data[0].objects.len(), 1);
    let mut ps = det.init_params(0).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let trace = train(&det, &mut ps, &data, &cfg).unwrap();
    let (first, last) = (trace[0].total(), trace.last().unwrap().total());
    assert!(trace.iter().all(|e| e.total().is_finite()));
    assert!(last < 0.1 * first, "loss {first} -> {last}");

    let dets = predict(&det, &ps, &data[0], 0, 0.3, 0.5).unwrap();
    let gt = data[0].objects[0].bbox;
    assert!(
        dets.iter().any(|d| iou(&d.bbox, &gt).unwrap() >= 0.5),
        "no detection overlaps {gt:?}: {dets:?}"
    );
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let det = small_detector(true);
    let ps = det.init_params(9).unwrap();
    let (det2, ps2) = Detector::from_checkpoint(&ps.to_checkpoint(), 32).unwrap();
    let s = &scenes(1, 2, 32)[0];
    assert_eq!(
        predict(&det, &ps, s, 0, 0.0, 0.5).unwrap(),
        predict(&det2, &ps2, s, 0, 0.0, 0.5).unwrap()
    );
}
