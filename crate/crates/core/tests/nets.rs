use ndarray::{Array2, Array3, Array4};

use cpc_align::nets::{
    discriminator_forward, extractor_forward, head_forward, load_checkpoint, save_checkpoint,
    Checkpoint, ClassifierHead, Discriminator, Extractor, ExtractorConfig, FeatureMap,
    FeatureSource, HeadRole,
};
use cpc_align::Error;

fn pattern_image(side: usize, scale: f32) -> Array3<f32> {
    Array3::from_shape_fn((3, side, side), |(c, y, x)| {
        scale * ((c * 37 + y * 5 + x * 3) % 17) as f32 / 16.0
    })
}

#[test]
fn resnet50_like_maps_448_input_to_2048x14x14() {
    let e = Extractor::new_seeded(ExtractorConfig::resnet50_like(), 0).unwrap();
    let feat = extractor_forward(&e, &pattern_image(448, 1.0), FeatureSource::Positive).unwrap();
    assert_eq!(feat.values.dim(), (2048, 14, 14));
}

#[test]
fn tiny_maps_64_input_to_32x4x4() {
    let e = Extractor::new_seeded(ExtractorConfig::tiny(), 0).unwrap();
    let feat = extractor_forward(&e, &pattern_image(64, 1.0), FeatureSource::Aligned).unwrap();
    assert_eq!(feat.values.dim(), (32, 4, 4));
}

#[test]
fn forward_is_deterministic_in_evaluation_mode() {
    let e = Extractor::new_seeded(ExtractorConfig::tiny(), 3).unwrap();
    let img = pattern_image(64, 0.7);
    let a = extractor_forward(&e, &img, FeatureSource::Aligned).unwrap();
    let b = extractor_forward(&e, &img, FeatureSource::Aligned).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn extractor_rejects_wrong_side_and_non_finite_input() {
    let e = Extractor::new_seeded(ExtractorConfig::tiny(), 0).unwrap();
    let wrong = pattern_image(32, 1.0);
    assert!(matches!(
        extractor_forward(&e, &wrong, FeatureSource::Aligned),
        Err(Error::Shape { .. })
    ));
    let mut bad = pattern_image(64, 1.0);
    bad[(0, 0, 0)] = f32::NAN;
    assert!(matches!(
        extractor_forward(&e, &bad, FeatureSource::Aligned),
        Err(Error::Numeric(_))
    ));
}

fn feat_map(values: Array3<f32>) -> FeatureMap {
    FeatureMap {
        values,
        source: FeatureSource::Aligned,
    }
}

#[test]
fn head_on_constant_features_gives_row_sums_times_value() {
    let mut head = ClassifierHead::new_seeded(HeadRole::F1, 32, 0);
    head.linear.bias.fill(0.0);
    let v = 0.4f32;
    let feat = feat_map(Array3::from_elem((32, 4, 4), v));
    let logits = head_forward(&head, &feat).unwrap();
    for k in 0..2 {
        let row_sum: f32 = head.linear.weight.row(k).sum();
        assert!((logits[k] - v * row_sum).abs() < 1e-5);
    }
}

#[test]
fn head_with_zero_weights_returns_bias() {
    let mut head = ClassifierHead::new_seeded(HeadRole::F2, 32, 0);
    head.linear.weight.fill(0.0);
    head.linear.bias[0] = 1.25;
    head.linear.bias[1] = -0.5;
    let feat = feat_map(Array3::from_shape_fn((32, 4, 4), |(c, y, x)| {
        (c + y + x) as f32 * 0.01
    }));
    let logits = head_forward(&head, &feat).unwrap();
    assert_eq!(logits, [1.25, -0.5]);
}

#[test]
fn identity_rows_pick_out_channel_means() {
    let mut head = ClassifierHead::new_seeded(HeadRole::F1, 32, 0);
    head.linear.weight.fill(0.0);
    head.linear.bias.fill(0.0);
    head.linear.weight[(0, 0)] = 1.0;
    head.linear.weight[(1, 1)] = 1.0;
    let feat = feat_map(Array3::from_shape_fn((32, 4, 4), |(c, y, x)| {
        ((c * 13 + y * 3 + x) % 7) as f32 / 7.0
    }));
    let logits = head_forward(&head, &feat).unwrap();
    for k in 0..2 {
        let mean: f32 = feat.values.index_axis(ndarray::Axis(0), k).mean().unwrap();
        assert!((logits[k] - mean).abs() < 1e-6);
    }
}

#[test]
fn head_is_linear_after_pooling() {
    let head = ClassifierHead::new_seeded(HeadRole::F1, 32, 5);
    let x = feat_map(Array3::from_shape_fn((32, 4, 4), |(c, y, x)| {
        ((c + 2 * y + 3 * x) % 9) as f32 / 9.0 - 0.3
    }));
    let zero = feat_map(Array3::zeros((32, 4, 4)));
    let alpha = 2.5f32;
    let scaled = feat_map(x.values.mapv(|v| alpha * v));
    let fx = head_forward(&head, &x).unwrap();
    let f0 = head_forward(&head, &zero).unwrap();
    let fax = head_forward(&head, &scaled).unwrap();
    for k in 0..2 {
        assert!((fax[k] - f0[k] - alpha * (fx[k] - f0[k])).abs() < 1e-4);
    }
}

#[test]
fn head_rejects_channel_mismatch() {
    let head = ClassifierHead::new_seeded(HeadRole::F1, 32, 0);
    let feat = Array4::<f32>::zeros((1, 16, 4, 4));
    assert!(matches!(head.forward_batch(&feat), Err(Error::Shape { .. })));
}

#[test]
fn zeroed_discriminator_outputs_one_half() {
    let mut d = Discriminator::new_seeded(32, 4, 0);
    d.conv1.weight.fill(0.0);
    d.conv1.bias.fill(0.0);
    d.conv2.weight.fill(0.0);
    d.conv2.bias.fill(0.0);
    d.fc1.weight.fill(0.0);
    d.fc1.bias.fill(0.0);
    d.fc2.weight.fill(0.0);
    d.fc2.bias.fill(0.0);
    let feat = feat_map(Array3::from_elem((32, 4, 4), 0.9));
    let p = discriminator_forward(&d, &feat).unwrap();
    assert_eq!(p, 0.5);
}

#[test]
fn discriminator_outputs_live_strictly_inside_unit_interval() {
    let d = Discriminator::new_seeded(32, 4, 7);
    for i in 0..20 {
        let feat = feat_map(Array3::from_shape_fn((32, 4, 4), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3 + i) % 23) as f32 / 11.0 - 1.0
        }));
        let p = discriminator_forward(&d, &feat).unwrap();
        assert!(p > 0.0 && p < 1.0, "probability {p} outside (0,1)");
        let p2 = discriminator_forward(&d, &feat).unwrap();
        assert_eq!(p, p2);
    }
}

#[test]
fn discriminator_rejects_wrong_shape() {
    let d = Discriminator::new_seeded(32, 4, 0);
    let feat = Array4::<f32>::zeros((1, 32, 8, 8));
    assert!(d.logits(&feat).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = ExtractorConfig::tiny();
    let e = Extractor::new_seeded(cfg, 11).unwrap();
    let head = ClassifierHead::new_seeded(HeadRole::F2, cfg.out_channels, 12);
    let d = Discriminator::new_seeded(cfg.out_channels, cfg.out_side, 13);
    let mut ckpt = Checkpoint::new(cfg);
    ckpt.epoch = 9;
    ckpt.rng_seed = 4;
    ckpt.rng_word_pos = (7u128 << 64) | 3;
    ckpt.insert_prefixed("teacher", e.named_tensors());
    ckpt.insert_prefixed("f2", head.named_tensors());
    ckpt.insert_prefixed("d", d.named_tensors());
    save_checkpoint(&ckpt, &path).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.epoch, 9);
    assert_eq!(loaded.rng_word_pos, (7u128 << 64) | 3);
    let e2 = loaded.extractor("teacher", 999).unwrap();
    let h2 = loaded.head("f2", HeadRole::F2).unwrap();
    let d2 = loaded.discriminator("d").unwrap();
    assert_eq!(e.param_hash(), e2.param_hash());
    assert_eq!(head.param_hash(), h2.param_hash());
    assert_eq!(d.param_hash(), d2.param_hash());

    let img = pattern_image(64, 0.8);
    let f1 = extractor_forward(&e, &img, FeatureSource::Positive).unwrap();
    let f2 = extractor_forward(&e2, &img, FeatureSource::Positive).unwrap();
    assert_eq!(f1.values, f2.values);
    assert_eq!(
        head_forward(&head, &f1).unwrap(),
        head_forward(&h2, &f2).unwrap()
    );
}

#[test]
fn wrong_version_is_a_compatibility_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut ckpt = Checkpoint::new(ExtractorConfig::tiny());
    ckpt.version = 999;
    save_checkpoint(&ckpt, &path).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Compatibility(_))
    ));
}

#[test]
fn non_checkpoint_bytes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    std::fs::write(&path, b"plainly not a checkpoint").unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Compatibility(_))
    ));
}

#[test]
fn truncated_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = ExtractorConfig::tiny();
    let e = Extractor::new_seeded(cfg, 0).unwrap();
    let mut ckpt = Checkpoint::new(cfg);
    ckpt.insert_prefixed("teacher", e.named_tensors());
    save_checkpoint(&ckpt, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 32]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Io { .. })));
}

#[test]
fn missing_prefix_is_reported_on_load() {
    let ckpt = Checkpoint::new(ExtractorConfig::tiny());
    assert!(!ckpt.has_prefix("teacher"));
    assert!(matches!(
        ckpt.extractor("teacher", 0),
        Err(Error::Compatibility(_))
    ));
}

#[test]
fn config_by_name_matches_constructors_and_rejects_unknown() {
    let r = ExtractorConfig::by_name("resnet50-like").unwrap();
    assert_eq!((r.in_side, r.out_channels, r.out_side), (448, 2048, 14));
    let t = ExtractorConfig::by_name("tiny").unwrap();
    assert_eq!((t.in_side, t.out_channels, t.out_side), (64, 32, 4));
    assert!(ExtractorConfig::by_name("vgg").is_err());
}

#[test]
fn head_gradients_match_finite_differences() {
    let head = ClassifierHead::new_seeded(HeadRole::F1, 8, 2);
    let feat = Array4::from_shape_fn((2, 8, 3, 3), |(b, c, y, x)| {
        ((b * 11 + c * 5 + y * 2 + x) % 13) as f32 / 13.0 - 0.4
    });
    let grad_logits = Array2::from_shape_fn((2, 2), |(b, k)| 0.3 + 0.1 * (b + k) as f32);
    let (gfeat, _, _) = head.backward(&feat, &grad_logits);
    // Directional check at a few coordinates.
    let eps = 1e-3f32;
    let objective = |f: &Array4<f32>| -> f32 {
        let logits = head.forward_batch(f).unwrap();
        logits
            .indexed_iter()
            .map(|((b, k), v)| v * grad_logits[(b, k)])
            .sum()
    };
    for &(b, c, y, x) in &[(0, 0, 0, 0), (1, 3, 2, 1), (0, 7, 1, 2)] {
        let mut plus = feat.clone();
        plus[(b, c, y, x)] += eps;
        let mut minus = feat.clone();
        minus[(b, c, y, x)] -= eps;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
        assert!(
            (fd - gfeat[(b, c, y, x)]).abs() < 1e-3,
            "head grad mismatch at {:?}: fd {fd}, analytic {}",
            (b, c, y, x),
            gfeat[(b, c, y, x)]
        );
    }
}
