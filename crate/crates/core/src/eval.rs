//! Inference, accuracy metrics, k-fold aggregation into table-shaped
//! reports, per-image timing, and feature heatmap export.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{normalize, save_image, AugmentPolicy, Dataset, FoldPlan, PixelImage};
use crate::error::{Error, Result};
use crate::losses::{softmax, ClassDistribution, TripletConfig};
use crate::nets::{
    sigmoid, Checkpoint, Discriminator, ExtractorConfig, FeatureMap, PROB_EPS,
};
use crate::nn::Adam;
use crate::trainer::{
    argmax2, derive_seed, eval_accuracy, pretrain, train_alignment, EpochMetrics, LossWeights,
    Modality, OptimizerConfig,
};

/// Per-fold evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_valid: usize,
    pub accuracy: f64,
    pub per_class_recall: [f64; 2],
    /// `confusion[label][pred]`.
    pub confusion: [[usize; 2]; 2],
}

/// One table row: per-fold accuracies plus their mean and the measured
/// per-image latency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub backbone: String,
    pub folds: Vec<f64>,
    pub mean: f64,
    pub speed_ms: Option<f64>,
}

impl Report {
    pub fn from_folds(method: &str, backbone: &str, folds: Vec<f64>, speed_ms: Option<f64>) -> Self {
        let mean = folds.iter().sum::<f64>() / folds.len().max(1) as f64;
        Report {
            method: method.to_string(),
            backbone: backbone.to_string(),
            folds,
            mean,
            speed_ms,
        }
    }

    /// Aligned-text rendering, one row per report.
    pub fn render_table(reports: &[Report]) -> String {
        let k = reports.iter().map(|r| r.folds.len()).max().unwrap_or(0);
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:<14} {:<9}", "Method", "Backbone", "Speed"));
        for i in 0..k {
            out.push_str(&format!(" {:<7}", format!("FOLD{}", i + 1)));
        }
        out.push_str(" Mean\n");
        for r in reports {
            let speed = r
                .speed_ms
                .map(|s| format!("{s:.2} ms"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{:<12} {:<14} {:<9}", r.method, r.backbone, speed));
            for f in &r.folds {
                out.push_str(&format!(" {:<7}", format!("{:.1}%", f * 100.0)));
            }
            out.push_str(&format!(" {:.1}%\n", r.mean * 100.0));
        }
        out
    }
}

/// Weak-modality inference through student + F1. Accepts only weak
/// images; each sample runs at batch size 1, so batch composition can
/// never change a prediction.
pub fn predict(
    student_ckpt: &Checkpoint,
    weak_images: &[PixelImage],
) -> Result<Vec<(u8, ClassDistribution)>> {
    if !student_ckpt.has_prefix("f1") {
        return Err(Error::Compatibility("checkpoint missing F1 head".into()));
    }
    if !student_ckpt.has_prefix("student") {
        return Err(Error::Compatibility("checkpoint missing student extractor".into()));
    }
    let extractor = student_ckpt.extractor("student", 0)?;
    let head = student_ckpt.head("f1", crate::nets::HeadRole::F1)?;
    let stats = student_ckpt
        .wl_norm
        .ok_or_else(|| Error::Compatibility("checkpoint missing weak-modality norm stats".into()))?;
    let mut out = Vec::with_capacity(weak_images.len());
    for img in weak_images {
        let (c, h, w) = img.dim();
        let x = normalize(img, &stats)
            .into_shape_with_order((1, c, h, w))
            .expect("shape");
        let feat = extractor.forward_batch(&x)?;
        let logits = head.forward_batch(&feat)?;
        let dist = softmax([logits[(0, 0)] as f64, logits[(0, 1)] as f64])?;
        out.push((argmax2(&dist), dist));
    }
    Ok(out)
}

/// Fraction correct plus confusion counts.
pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<FoldResult> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "prediction/label length mismatch: {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    let mut confusion = [[0usize; 2]; 2];
    for (p, l) in preds.iter().zip(labels.iter()) {
        confusion[*l as usize][*p as usize] += 1;
    }
    let n = preds.len();
    let correct = confusion[0][0] + confusion[1][1];
    let mut per_class_recall = [0.0; 2];
    for c in 0..2 {
        let total = confusion[c][0] + confusion[c][1];
        per_class_recall[c] = if total > 0 {
            confusion[c][c] as f64 / total as f64
        } else {
            f64::NAN
        };
    }
    Ok(FoldResult {
        fold: 0,
        n_valid: n,
        accuracy: correct as f64 / n as f64,
        per_class_recall,
        confusion,
    })
}

/// Everything needed to run one fold of the full pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub extractor: ExtractorConfig,
    pub pretrain_opt: OptimizerConfig,
    pub align_opt: OptimizerConfig,
    pub weights: LossWeights,
    pub triplet: TripletConfig,
    pub augment: AugmentPolicy,
}

impl PipelineConfig {
    /// Desk-scale defaults on the tiny backbone.
    pub fn tiny_default(seed: u64) -> Self {
        PipelineConfig {
            extractor: ExtractorConfig::tiny(),
            pretrain_opt: OptimizerConfig {
                epochs: 8,
                seed,
                ..OptimizerConfig::default()
            },
            align_opt: OptimizerConfig {
                epochs: 30,
                learning_rate: 2e-4,
                seed,
                ..OptimizerConfig::default()
            },
            weights: LossWeights::default(),
            triplet: TripletConfig::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

/// Artifacts of one fold's pretrain + align + evaluate run.
pub struct FoldRun {
    pub fold: usize,
    pub teacher_ckpt: Checkpoint,
    pub unaligned_ckpt: Checkpoint,
    pub aligned_ckpt: Checkpoint,
    pub teacher_val_acc: f64,
    pub unaligned_val_acc: f64,
    pub aligned_val_acc: f64,
    pub align_metrics: Vec<EpochMetrics>,
}

/// Runs the full pipeline on one fold. Seeds are derived from
/// (config seed, fold) so folds are independent and reproducible.
pub fn run_fold(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    cfg: &PipelineConfig,
) -> Result<FoldRun> {
    let mut pre_cfg = cfg.pretrain_opt;
    pre_cfg.seed = derive_seed(cfg.pretrain_opt.seed, 100 + fold as u64);
    let teacher = pretrain(
        Modality::Strong,
        dataset,
        plan,
        fold,
        cfg.extractor,
        &pre_cfg,
        &cfg.augment,
    )?;
    let mut pre_cfg_w = pre_cfg;
    pre_cfg_w.seed = derive_seed(cfg.pretrain_opt.seed, 200 + fold as u64);
    let unaligned = pretrain(
        Modality::Weak,
        dataset,
        plan,
        fold,
        cfg.extractor,
        &pre_cfg_w,
        &cfg.augment,
    )?;
    let mut al_cfg = cfg.align_opt;
    al_cfg.seed = derive_seed(cfg.align_opt.seed, 300 + fold as u64);
    let aligned = train_alignment(
        dataset,
        plan,
        fold,
        &teacher.checkpoint,
        &unaligned.checkpoint,
        &al_cfg,
        cfg.weights,
        cfg.triplet,
        &cfg.augment,
    )?;
    Ok(FoldRun {
        fold,
        teacher_val_acc: teacher.best_val_acc,
        unaligned_val_acc: unaligned.best_val_acc,
        aligned_val_acc: aligned.best_val_acc,
        teacher_ckpt: teacher.checkpoint,
        unaligned_ckpt: unaligned.checkpoint,
        aligned_ckpt: aligned.checkpoint,
        align_metrics: aligned.metrics,
    })
}

/// Runs the full pipeline on every fold and assembles one report row.
/// `jobs > 1` fans folds out to a thread pool; per-fold seeds make the
/// result independent of scheduling.
pub fn cross_validate(
    dataset: &Dataset,
    plan: &FoldPlan,
    cfg: &PipelineConfig,
    jobs: usize,
) -> Result<Report> {
    let folds: Vec<usize> = (0..plan.k).collect();
    let runs: Vec<Result<FoldRun>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            folds
                .par_iter()
                .map(|f| run_fold(dataset, plan, *f, cfg))
                .collect()
        })
    } else {
        folds.iter().map(|f| run_fold(dataset, plan, *f, cfg)).collect()
    };
    let mut accs = Vec::with_capacity(plan.k);
    for run in runs {
        accs.push(run?.aligned_val_acc);
    }
    Ok(Report::from_folds(
        &cfg.weights.method_label(),
        cfg.extractor.label(),
        accs,
        None,
    ))
}

/// Wall-clock per-image latency of [`predict`] at batch size 1.
/// Informational only; absolute numbers are hardware-bound.
pub fn timing_benchmark(
    student_ckpt: &Checkpoint,
    n_images: usize,
    warmup: usize,
) -> Result<(f64, f64)> {
    if n_images < 30 {
        return Err(Error::Contract("timing needs at least 30 images".into()));
    }
    let side = student_ckpt.config.in_side;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images: Vec<PixelImage> = (0..(n_images + warmup))
        .map(|_| Array3::from_shape_fn((3, side, side), |_| rng.gen_range(0.0..1.0)))
        .collect();
    let mut times_ms = Vec::with_capacity(n_images);
    for (i, img) in images.iter().enumerate() {
        let t0 = Instant::now();
        predict(student_ckpt, std::slice::from_ref(img))?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        if i >= warmup {
            times_ms.push(dt);
        }
    }
    let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
    let mut sorted = times_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    Ok((mean, median))
}

impl ExtractorConfig {
    pub fn label(&self) -> &'static str {
        match self.name {
            crate::nets::BackboneName::Resnet50Like => "resnet50-like",
            crate::nets::BackboneName::Tiny => "tiny",
        }
    }
}

/// Channel mean of a feature map, min-max normalized to [0, 1]. A
/// constant map normalizes to 0.5 by convention.
pub fn heatmap_plane(feat: &FeatureMap) -> Array2<f32> {
    let (c, h, w) = feat.values.dim();
    let mut plane = Array2::<f32>::zeros((h, w));
    for ci in 0..c {
        plane += &feat.values.index_axis(Axis(0), ci);
    }
    plane /= c as f32;
    let min = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max - min < 1e-12 {
        plane.fill(0.5);
    } else {
        plane.mapv_inplace(|v| (v - min) / (max - min));
    }
    plane
}

fn resize_plane(plane: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    let mut out = Array2::<f32>::zeros((oh, ow));
    for oy in 0..oh {
        let sy = (((oy as f32 + 0.5) * h as f32 / oh as f32) - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for ox in 0..ow {
            let sx = (((ox as f32 + 0.5) * w as f32 / ow as f32) - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            let top = plane[(y0, x0)] + fx * (plane[(y0, x1)] - plane[(y0, x0)]);
            let bot = plane[(y1, x0)] + fx * (plane[(y1, x1)] - plane[(y1, x0)]);
            out[(oy, ox)] = top + fy * (bot - top);
        }
    }
    out
}

/// Fixed blue-to-red color map.
fn colormap(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (1.5 - (v - 1.0).abs() * 4.0).clamp(0.0, 1.0),
        (1.5 - (v - 0.5).abs() * 4.0).clamp(0.0, 1.0),
        (1.5 - v * 4.0).clamp(0.0, 1.0),
    ]
}

/// Renders the channel-mean heatmap of `feat`, upsampled to the base
/// image's size and alpha-blended over its grayscale.
pub fn render_feature_heatmap(feat: &FeatureMap, base_image: &PixelImage) -> PixelImage {
    let (_, h, w) = base_image.dim();
    let plane = resize_plane(&heatmap_plane(feat), h, w);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let gray =
                (base_image[(0, y, x)] + base_image[(1, y, x)] + base_image[(2, y, x)]) / 3.0;
            let c = colormap(plane[(y, x)]);
            for ch in 0..3 {
                out[(ch, y, x)] = 0.5 * gray + 0.5 * c[ch];
            }
        }
    }
    out
}

/// Writes the heatmap overlay for one feature map next to its image.
pub fn export_feature_heatmap(
    feat: &FeatureMap,
    base_image: &PixelImage,
    out_path: &Path,
) -> Result<()> {
    save_image(&render_feature_heatmap(feat, base_image), out_path)
}

/// Companion grid: one column per sample, rows = weak image, unaligned
/// heatmap, aligned heatmap, teacher (strong-modality) heatmap.
pub fn export_heatmap_grid(rows: &[Vec<PixelImage>], out_path: &Path) -> Result<()> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Contract("empty heatmap grid".into()));
    }
    let (_, h, w) = rows[0][0].dim();
    let pad = 2usize;
    let gh = rows.len() * (h + pad) - pad;
    let gw = rows[0].len() * (w + pad) - pad;
    let mut grid = Array3::<f32>::ones((3, gh, gw));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let oy = ri * (h + pad);
            let ox = ci * (w + pad);
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        grid[(ch, oy + y, ox + x)] = img[(ch, y, x)];
                    }
                }
            }
        }
    }
    save_image(&grid, out_path)
}

/// Mean absolute difference between two normalized heatmap planes;
/// the quantitative proxy for "aligned features look like teacher
/// features".
pub fn heatmap_distance(a: &FeatureMap, b: &FeatureMap) -> f64 {
    let pa = heatmap_plane(a);
    let pb = heatmap_plane(b);
    let mut s = 0.0;
    for (x, y) in pa.iter().zip(pb.iter()) {
        s += (*x - *y).abs() as f64;
    }
    s / pa.len() as f64
}

/// Trains a fresh discriminator on frozen feature batches and reports
/// held-out accuracy at threshold 0.5. This quantifies how separable
/// the two feature populations remain: lower accuracy means better
/// alignment.
pub fn probe_discriminator_accuracy(
    pos_train: &Array4<f32>,
    neg_train: &Array4<f32>,
    pos_test: &Array4<f32>,
    neg_test: &Array4<f32>,
    epochs: usize,
    seed: u64,
) -> Result<f64> {
    let (_, c, h, _) = pos_train.dim();
    let mut d = Discriminator::new_seeded(c, h, seed);
    let mut opt = Adam::new(1e-3, 0.0);
    let n_pos = pos_train.dim().0;
    let n_neg = neg_train.dim().0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let batch = 16usize;
    for _ in 0..epochs {
        let mut order: Vec<(usize, bool)> = (0..n_pos)
            .map(|i| (i, true))
            .chain((0..n_neg).map(|i| (i, false)))
            .collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let mut x = Array4::<f32>::zeros((chunk.len(), c, h, h));
            let mut targets = Vec::with_capacity(chunk.len());
            for (bi, (i, is_pos)) in chunk.iter().enumerate() {
                let src = if *is_pos {
                    pos_train.index_axis(Axis(0), *i)
                } else {
                    neg_train.index_axis(Axis(0), *i)
                };
                x.index_axis_mut(Axis(0), bi).assign(&src);
                targets.push(u8::from(*is_pos));
            }
            let (logits, trace) = d.logits_trace(&x)?;
            let nf = chunk.len() as f64;
            let mut glog = ndarray::Array1::<f32>::zeros(chunk.len());
            for i in 0..chunk.len() {
                let p = (sigmoid(logits[i]) as f64).clamp(PROB_EPS as f64, 1.0 - PROB_EPS as f64);
                glog[i] = ((p - targets[i] as f64) / nf) as f32;
            }
            let (grads, _) = d.backward(&trace, glog.view());
            opt.step(d.adam_pairs(&grads));
        }
    }
    let mut correct = 0usize;
    let logits_pos = d.logits(pos_test)?;
    let logits_neg = d.logits(neg_test)?;
    for v in logits_pos.iter() {
        if *v > 0.0 {
            correct += 1;
        }
    }
    for v in logits_neg.iter() {
        if *v <= 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / (pos_test.dim().0 + neg_test.dim().0) as f64)
}

/// Re-exported so CLI evaluation of pretrain checkpoints stays cheap.
pub fn checkpoint_accuracy(
    ckpt: &Checkpoint,
    extractor_prefix: &str,
    head_prefix: &str,
    role: crate::nets::HeadRole,
    images: &[PixelImage],
    labels: &[u8],
    modality: Modality,
) -> Result<f64> {
    let extractor = ckpt.extractor(extractor_prefix, 0)?;
    let head = ckpt.head(head_prefix, role)?;
    let stats = match modality {
        Modality::Weak => ckpt.wl_norm,
        Modality::Strong => ckpt.nbi_norm,
    }
    .ok_or_else(|| Error::Compatibility("missing norm stats".into()))?;
    eval_accuracy(&extractor, &head, images, labels, &stats)
}
