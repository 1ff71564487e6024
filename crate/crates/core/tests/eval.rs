use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cpc_align::datamodel::{make_folds, AugmentPolicy, Dataset, PixelImage};
use cpc_align::eval::{
    accuracy, export_feature_heatmap, export_heatmap_grid, heatmap_distance, heatmap_plane,
    predict, render_feature_heatmap, run_fold, timing_benchmark, PipelineConfig, Report,
};
use cpc_align::nets::{
    Checkpoint, ClassifierHead, Extractor, ExtractorConfig, FeatureMap, FeatureSource, HeadRole,
};
use cpc_align::synthgen::{generate_dataset, SynthConfig};
use cpc_align::Error;

fn student_checkpoint(seed: u64) -> Checkpoint {
    let cfg = ExtractorConfig::tiny();
    let mut ckpt = Checkpoint::new(cfg);
    let e = Extractor::new_seeded(cfg, seed).unwrap();
    let f1 = ClassifierHead::new_seeded(HeadRole::F1, cfg.out_channels, seed + 1);
    ckpt.insert_prefixed("student", e.named_tensors());
    ckpt.insert_prefixed("f1", f1.named_tensors());
    ckpt.wl_norm = Some(cpc_align::datamodel::NormStats {
        mean: [0.5; 3],
        std: [0.25; 3],
    });
    ckpt
}

fn random_images(n: usize, side: usize, seed: u64) -> Vec<PixelImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Array3::from_shape_fn((3, side, side), |_| rng.gen_range(0.0..1.0)))
        .collect()
}

#[test]
fn zeroed_head_predicts_class_zero_by_tie_break() {
    let mut ckpt = student_checkpoint(0);
    let mut f1 = ClassifierHead::new_seeded(HeadRole::F1, 32, 0);
    f1.linear.weight.fill(0.0);
    f1.linear.bias.fill(0.0);
    ckpt.insert_prefixed("f1", f1.named_tensors());
    let preds = predict(&ckpt, &random_images(4, 64, 1)).unwrap();
    for (class, dist) in preds {
        assert_eq!(class, 0);
        assert!((dist.p[0] - 0.5).abs() < 1e-9);
    }
}

#[test]
fn batch_predictions_match_single_image_predictions() {
    let ckpt = student_checkpoint(2);
    let images = random_images(7, 64, 3);
    let batch = predict(&ckpt, &images).unwrap();
    assert_eq!(batch.len(), 7);
    for (i, img) in images.iter().enumerate() {
        let single = predict(&ckpt, std::slice::from_ref(img)).unwrap();
        assert_eq!(batch[i].0, single[0].0);
        assert_eq!(batch[i].1.p, single[0].1.p);
    }
}

#[test]
fn predict_requires_student_and_f1() {
    let mut ckpt = student_checkpoint(4);
    ckpt.tensors.retain(|k, _| !k.starts_with("f1."));
    assert!(matches!(
        predict(&ckpt, &random_images(1, 64, 0)),
        Err(Error::Compatibility(_))
    ));
}

#[test]
fn predictions_ignore_every_non_inference_branch() {
    // Adding (or perturbing) teacher, unaligned, F2, and D tensors must
    // not change the weak-modality prediction path.
    let base = student_checkpoint(5);
    let images = random_images(6, 64, 6);
    let before = predict(&base, &images).unwrap();

    let mut noisy = base.clone();
    let cfg = ExtractorConfig::tiny();
    let teacher = Extractor::new_seeded(cfg, 77).unwrap();
    let unaligned = Extractor::new_seeded(cfg, 78).unwrap();
    let f2 = ClassifierHead::new_seeded(HeadRole::F2, cfg.out_channels, 79);
    let d = cpc_align::nets::Discriminator::new_seeded(cfg.out_channels, cfg.out_side, 80);
    noisy.insert_prefixed("teacher", teacher.named_tensors());
    noisy.insert_prefixed("unaligned", unaligned.named_tensors());
    noisy.insert_prefixed("f2", f2.named_tensors());
    noisy.insert_prefixed("d", d.named_tensors());
    let after = predict(&noisy, &images).unwrap();
    for (a, b) in before.iter().zip(after.iter()) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.p, b.1.p);
    }
}

#[test]
fn accuracy_arithmetic_matches_hand_counts() {
    let r = accuracy(&[1, 1, 0, 1], &[1, 0, 0, 1]).unwrap();
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.n_valid, 4);
    assert_eq!(r.confusion[0][1], 1);

    // Majority-class floor on a 307:116 imbalance.
    let labels: Vec<u8> = std::iter::repeat(1u8)
        .take(307)
        .chain(std::iter::repeat(0u8).take(116))
        .collect();
    let preds = vec![1u8; 423];
    let r = accuracy(&preds, &labels).unwrap();
    assert!((r.accuracy - 307.0 / 423.0).abs() < 1e-12);
    assert_eq!(r.per_class_recall[1], 1.0);
    assert_eq!(r.per_class_recall[0], 0.0);

    let r = accuracy(&[0, 1, 0], &[0, 1, 0]).unwrap();
    assert_eq!(r.accuracy, 1.0);

    assert!(accuracy(&[0], &[]).is_err());
    assert!(accuracy(&[], &[]).is_err());
}

#[test]
fn report_mean_is_the_arithmetic_mean_of_folds() {
    let r = Report::from_folds("full", "tiny", vec![0.8, 0.8, 0.8, 0.9, 0.9], None);
    assert!((r.mean - 0.84).abs() < 1e-12);
    let table = Report::render_table(std::slice::from_ref(&r));
    assert!(table.contains("FOLD5"));
    assert!(table.contains("Mean"));
    assert!(table.contains("84.0%"));
}

#[test]
fn timing_benchmark_reports_positive_stable_latency() {
    let ckpt = student_checkpoint(7);
    let (mean1, median1) = timing_benchmark(&ckpt, 30, 3).unwrap();
    let (_, median2) = timing_benchmark(&ckpt, 30, 3).unwrap();
    assert!(mean1 > 0.0 && median1 > 0.0);
    let ratio = median1.max(median2) / median1.min(median2);
    assert!(ratio < 1.5, "medians unstable: {median1} vs {median2}");
    assert!(timing_benchmark(&ckpt, 10, 0).is_err());
}

fn feat(values: Array3<f32>) -> FeatureMap {
    FeatureMap {
        values,
        source: FeatureSource::Aligned,
    }
}

#[test]
fn constant_feature_map_gives_a_uniform_mid_heatmap() {
    let plane = heatmap_plane(&feat(Array3::from_elem((32, 4, 4), 3.7)));
    for v in plane.iter() {
        assert_eq!(*v, 0.5);
    }
}

#[test]
fn heatmap_plane_is_min_max_normalized() {
    let plane = heatmap_plane(&feat(Array3::from_shape_fn((8, 4, 4), |(c, y, x)| {
        (c + y * 4 + x) as f32
    })));
    let min = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    assert_eq!(min, 0.0);
    assert_eq!(max, 1.0);
}

#[test]
fn heatmap_overlay_matches_base_image_dimensions_and_is_deterministic() {
    let base = random_images(1, 64, 8).pop().unwrap();
    let f = feat(Array3::from_shape_fn((32, 4, 4), |(c, y, x)| {
        ((c + y + x) % 5) as f32
    }));
    let a = render_feature_heatmap(&f, &base);
    let b = render_feature_heatmap(&f, &base);
    assert_eq!(a.dim(), (3, 64, 64));
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hm.png");
    export_feature_heatmap(&f, &base, &path).unwrap();
    assert!(path.exists());
}

#[test]
fn heatmap_grid_lays_out_rows_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let img = Array3::from_elem((3, 16, 16), 0.5f32);
    let rows = vec![vec![img.clone(), img.clone()], vec![img.clone(), img]];
    let path = dir.path().join("grid.png");
    export_heatmap_grid(&rows, &path).unwrap();
    let loaded = cpc_align::datamodel::load_image(&path).unwrap();
    // 2 rows/cols of 16px with 2px padding between.
    assert_eq!(loaded.dim(), (3, 34, 34));
    assert!(export_heatmap_grid(&[], &path).is_err());
}

#[test]
fn heatmap_distance_is_zero_on_identical_maps_and_symmetric() {
    let a = feat(Array3::from_shape_fn((8, 4, 4), |(c, y, x)| {
        (c * 2 + y + x) as f32
    }));
    let b = feat(Array3::from_shape_fn((8, 4, 4), |(c, y, x)| {
        (c + y * 3 + x) as f32
    }));
    assert_eq!(heatmap_distance(&a, &a), 0.0);
    assert!((heatmap_distance(&a, &b) - heatmap_distance(&b, &a)).abs() < 1e-12);
    assert!(heatmap_distance(&a, &b) >= 0.0);
}

#[test]
fn scaling_logits_never_changes_the_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let l0: f64 = rng.gen_range(-3.0..3.0);
        let l1: f64 = rng.gen_range(-3.0..3.0);
        let alpha: f64 = rng.gen_range(0.1..10.0);
        let d1 = cpc_align::losses::softmax([l0, l1]).unwrap();
        let d2 = cpc_align::losses::softmax([alpha * l0, alpha * l1]).unwrap();
        assert_eq!(
            cpc_align::trainer::argmax2(&d1),
            cpc_align::trainer::argmax2(&d2)
        );
    }
}

#[test]
fn one_fold_pipeline_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        n_pairs: 60,
        seed: 10,
        ..SynthConfig::default()
    };
    let manifest = generate_dataset(&synth, dir.path()).unwrap();
    let dataset = Dataset::from_manifest(&manifest, 64).unwrap();
    let plan = make_folds(&manifest, 2, 10).unwrap();
    let mut cfg = PipelineConfig::tiny_default(10);
    cfg.pretrain_opt.epochs = 2;
    cfg.align_opt.epochs = 2;
    cfg.augment = AugmentPolicy::identity();
    let run = run_fold(&dataset, &plan, 0, &cfg).unwrap();
    assert_eq!(run.align_metrics.len(), 2);
    assert!(run.teacher_ckpt.has_prefix("teacher") && run.teacher_ckpt.has_prefix("f2"));
    assert!(run.aligned_ckpt.has_prefix("student") && run.aligned_ckpt.has_prefix("f1"));
    for acc in [
        run.teacher_val_acc,
        run.unaligned_val_acc,
        run.aligned_val_acc,
    ] {
        assert!((0.0..=1.0).contains(&acc));
    }
    // The aligned checkpoint must drive weak-modality inference alone.
    let preds = predict(&run.aligned_ckpt, &dataset.wl[..4]).unwrap();
    assert_eq!(preds.len(), 4);
}

#[test]
fn probe_discriminator_separates_disjoint_feature_clouds() {
    // Clearly separated populations → near-perfect probe; identical
    // populations → chance.
    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cloud = |offset: f32| -> Array4<f32> {
        Array4::from_shape_fn((n, 32, 4, 4), |_| rng.gen_range(-0.5..0.5) + offset)
    };
    let pos_train = cloud(2.0);
    let neg_train = cloud(-2.0);
    let pos_test = cloud(2.0);
    let neg_test = cloud(-2.0);
    let acc = cpc_align::eval::probe_discriminator_accuracy(
        &pos_train, &neg_train, &pos_test, &neg_test, 10, 0,
    )
    .unwrap();
    assert!(acc > 0.95, "separable clouds probe acc {acc}");

    let same_a = cloud(0.0);
    let same_b = cloud(0.0);
    let same_c = cloud(0.0);
    let same_d = cloud(0.0);
    let acc = cpc_align::eval::probe_discriminator_accuracy(
        &same_a, &same_b, &same_c, &same_d, 3, 0,
    )
    .unwrap();
    assert!(
        (0.3..=0.7).contains(&acc),
        "identical clouds probe acc {acc}"
    );
}

#[test]
fn report_serializes_to_machine_readable_json() {
    let r = Report::from_folds("full", "tiny", vec![0.8, 0.9], Some(1.25));
    let json = serde_json::to_string(&r).unwrap();
    let back: Report = serde_json::from_str(&json).unwrap();
    assert_eq!(back.method, "full");
    assert_eq!(back.folds, vec![0.8, 0.9]);
    assert!((back.mean - 0.85).abs() < 1e-12);
    assert_eq!(back.speed_ms, Some(1.25));
}

#[test]
fn heatmap_plane_shape_matches_feature_grid() {
    let plane: Array2<f32> = heatmap_plane(&feat(Array3::zeros((32, 4, 4))));
    assert_eq!(plane.dim(), (4, 4));
}
