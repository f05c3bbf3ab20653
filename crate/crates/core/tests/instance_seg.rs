use bbam_core::detector::Detection;
use bbam_core::pseudogt::{box_fill_labels, ground_truth_labels};
use bbam_core::segtrain::{
    evaluate_instance_model, train_instance_seg, CropConfig, SegModelConfig, SegTrainConfig,
};
use bbam_core::synthdata::{channel_mean, DatasetManifest, GeneratorConfig, Scene};

fn scenes(n: usize) -> Vec<Scene> {
    let g = GeneratorConfig {
        width: 64,
        height: 64,
        max_instances: 3,
        ..Default::default()
    };
    DatasetManifest::new("train", n, 7, g).generate().unwrap()
}

fn oracle_detections(scenes: &[Scene]) -> Vec<Vec<Detection>> {
    scenes
        .iter()
        .map(|s| {
            s.instances
                .iter()
                .map(|i| Detection {
                    class_id: i.class_id,
                    score: 1.0,
                    bbox: i.bbox,
                })
                .collect()
        })
        .collect()
}

#[test]
fn mask_head_beats_box_fill_on_its_training_scenes() {
    let data = scenes(6);
    let mean = channel_mean(&data);
    let crop = CropConfig {
        size: 32,
        ..Default::default()
    };
    let cfg = SegTrainConfig {
        model: SegModelConfig {
            widths: [6, 8, 8, 8],
        },
        epochs: 25,
        lr: 1e-2,
        batch_images: 2,
        ..Default::default()
    };
    let (gt_model, log) = train_instance_seg(
        &data,
        &ground_truth_labels(&data),
        mean,
        &crop,
        &cfg,
        |_| {},
    )
    .unwrap();
    assert!(log.last().unwrap().loss < 0.6 * log[0].loss, "{log:?}");
    let (box_model, _) =
        train_instance_seg(&data, &box_fill_labels(&data), mean, &crop, &cfg, |_| {}).unwrap();
    let dets = oracle_detections(&data);
    let gt = evaluate_instance_model(&gt_model, &data, &dets, &crop, 5).unwrap();
    let boxed = evaluate_instance_model(&box_model, &data, &dets, &crop, 5).unwrap();
    assert!(gt.abo > boxed.abo, "{} vs {}", gt.abo, boxed.abo);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let data = scenes(2);
    let labels = ground_truth_labels(&data[..1]);
    let cfg = SegTrainConfig {
        epochs: 1,
        ..Default::default()
    };
    assert!(train_instance_seg(
        &data,
        &labels,
        [0.5; 3],
        &CropConfig::default(),
        &cfg,
        |_| {}
    )
    .is_err());
    let bad_crop = CropConfig {
        size: 40,
        ..Default::default()
    };
    assert!(train_instance_seg(
        &data,
        &ground_truth_labels(&data),
        [0.5; 3],
        &bad_crop,
        &cfg,
        |_| {}
    )
    .is_err());
}
