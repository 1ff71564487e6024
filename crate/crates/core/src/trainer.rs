//! Three-phase optimization: pretrain the teacher (+F2) on the strong
//! modality, pretrain the unaligned extractor on the weak modality,
//! then alternate discriminator and student updates under
//! L = L_c + L_a + L_t.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    augment, augment_single, compute_norm_stats, normalize, AugmentPolicy, Dataset, FoldPlan,
    NormStats, PixelImage,
};
use crate::error::{Error, Result};
use crate::losses::{
    alignment_loss, cross_entropy_class, cross_entropy_class_grad, discriminator_loss,
    discriminator_loss_grad, softmax, softmax_backward, triplet_contrastive,
    triplet_contrastive_grad, triplet_satisfied, ClassDistribution, TripletConfig,
};
use crate::nets::{
    sigmoid, Checkpoint, ClassifierHead, Discriminator, Extractor, ExtractorConfig,
    FrozenBranches, HeadRole, PROB_EPS,
};
use crate::nn::Adam;

/// Optimizer hyperparameters. Defaults are the reference training
/// recipe (Adam, lr 1e-3, weight decay 1e-8, 500 epochs, batch 16).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-8,
            epochs: 500,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config(format!("invalid optimizer config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Strong,
    Weak,
}

/// Loss-weight triple (w_c, w_a, w_t). (1,1,1) is the full method;
/// (1,0,1) ablates domain alignment, (1,1,0) ablates contrastive
/// learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_c: f64,
    pub w_a: f64,
    pub w_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_c: 1.0,
            w_a: 1.0,
            w_t: 1.0,
        }
    }
}

impl LossWeights {
    pub fn without_da() -> Self {
        LossWeights {
            w_c: 1.0,
            w_a: 0.0,
            w_t: 1.0,
        }
    }

    pub fn without_cl() -> Self {
        LossWeights {
            w_c: 1.0,
            w_a: 1.0,
            w_t: 0.0,
        }
    }

    pub fn method_label(&self) -> String {
        match (self.w_a == 0.0, self.w_t == 0.0) {
            (false, false) => "full".into(),
            (true, false) => "w/o DA".into(),
            (false, true) => "w/o CL".into(),
            (true, true) => "supervised-only".into(),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// Stacks normalized images into a batch array.
fn stack_normalized(images: &[PixelImage], stats: &NormStats) -> Array4<f32> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::<f32>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&normalize(img, stats));
    }
    out
}

fn shuffled(indices: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order = indices.to_vec();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Argmax with ties broken toward the lower class index.
pub fn argmax2(p: &ClassDistribution) -> u8 {
    u8::from(p.p[1] > p.p[0])
}

/// Evaluation-mode accuracy of (extractor, head) on one modality.
pub fn eval_accuracy(
    extractor: &Extractor,
    head: &ClassifierHead,
    images: &[PixelImage],
    labels: &[u8],
    stats: &NormStats,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for chunk in (0..images.len()).collect::<Vec<_>>().chunks(32) {
        let imgs: Vec<PixelImage> = chunk.iter().map(|i| images[*i].clone()).collect();
        let batch = stack_normalized(&imgs, stats);
        let feats = extractor.forward_batch(&batch)?;
        let logits = head.forward_batch(&feats)?;
        for (row, idx) in logits.axis_iter(Axis(0)).zip(chunk.iter()) {
            let dist = softmax([row[0] as f64, row[1] as f64])?;
            if argmax2(&dist) == labels[*idx] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug)]
pub struct PretrainResult {
    pub checkpoint: Checkpoint,
    pub best_val_acc: f64,
    pub history: Vec<PretrainEpoch>,
}

/// Trains an extractor plus classification head on one modality of the
/// training folds. For the strong modality the head is F2 and is
/// retained next to the teacher; for the weak modality only the
/// extractor is reused downstream (the head stays in the checkpoint for
/// baseline evaluation).
pub fn pretrain(
    modality: Modality,
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    extractor_cfg: ExtractorConfig,
    cfg: &OptimizerConfig,
    policy: &AugmentPolicy,
) -> Result<PretrainResult> {
    cfg.validate()?;
    extractor_cfg.validate()?;
    if dataset.side != extractor_cfg.in_side {
        return Err(Error::Shape {
            expected: format!("dataset side {}", extractor_cfg.in_side),
            got: format!("{}", dataset.side),
        });
    }
    let manifest_ids: Vec<&str> = dataset.ids.iter().map(String::as_str).collect();
    let train_idx: Vec<usize> = manifest_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| plan.assignments.get(**id).is_some_and(|f| *f != fold))
        .map(|(i, _)| i)
        .collect();
    let val_idx: Vec<usize> = manifest_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| plan.assignments.get(**id) == Some(&fold))
        .map(|(i, _)| i)
        .collect();
    if train_idx.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let pick = |i: usize| -> &PixelImage {
        match modality {
            Modality::Strong => &dataset.nbi[i],
            Modality::Weak => &dataset.wl[i],
        }
    };
    let stats = compute_norm_stats(train_idx.iter().map(|i| pick(*i)));

    let (extractor_prefix, head_prefix, role) = match modality {
        Modality::Strong => ("teacher", "f2", HeadRole::F2),
        Modality::Weak => ("unaligned", "head", HeadRole::F1),
    };
    let mut extractor = Extractor::new_seeded(extractor_cfg, derive_seed(cfg.seed, 1))?;
    let mut head = ClassifierHead::new_seeded(role, extractor_cfg.out_channels, derive_seed(cfg.seed, 2));
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));

    let val_images: Vec<PixelImage> = val_idx.iter().map(|i| pick(*i).clone()).collect();
    let val_labels: Vec<u8> = val_idx.iter().map(|i| dataset.labels[*i]).collect();

    let mut best = (extractor.clone(), head.clone());
    let mut best_val = if val_idx.is_empty() {
        f64::NEG_INFINITY
    } else {
        eval_accuracy(&extractor, &head, &val_images, &val_labels, &stats)?
    };
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled(&train_idx, &mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut imgs = Vec::with_capacity(chunk.len());
            for i in chunk {
                imgs.push(augment_single(pick(*i), policy, &mut rng)?);
            }
            let x = stack_normalized(&imgs, &stats);
            let n = chunk.len();
            let (feat, trace) = extractor.forward_trace(&x)?;
            let logits = head.forward_batch(&feat)?;
            let mut glogits = Array2::<f32>::zeros((n, 2));
            let mut loss = 0.0;
            for (bi, i) in chunk.iter().enumerate() {
                let lg = [logits[(bi, 0)] as f64, logits[(bi, 1)] as f64];
                let label = dataset.labels[*i] as usize;
                loss += cross_entropy_class(lg, label)?;
                let g = cross_entropy_class_grad(lg, label)?;
                glogits[(bi, 0)] = (g[0] / n as f64) as f32;
                glogits[(bi, 1)] = (g[1] / n as f64) as f32;
            }
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_no,
                    msg: format!("non-finite loss {loss}"),
                });
            }
            let (gfeat, gw_head, gb_head) = head.backward(&feat, &glogits);
            let egrads = extractor.backward(&trace, &gfeat);
            let mut pairs = extractor.adam_pairs(&egrads);
            pairs.push((
                head.linear.weight.as_slice_mut().unwrap(),
                gw_head.as_slice().unwrap(),
            ));
            pairs.push((
                head.linear.bias.as_slice_mut().unwrap(),
                gb_head.as_slice().unwrap(),
            ));
            opt.step(pairs);
            epoch_loss += loss;
            n_batches += 1;
        }
        let val_acc = if val_idx.is_empty() {
            f64::NAN
        } else {
            eval_accuracy(&extractor, &head, &val_images, &val_labels, &stats)?
        };
        if val_acc > best_val {
            best_val = val_acc;
            best = (extractor.clone(), head.clone());
        }
        history.push(PretrainEpoch {
            epoch,
            train_loss: epoch_loss / n_batches.max(1) as f64,
            val_acc,
        });
    }

    let (best_extractor, best_head) = best;
    let mut ckpt = Checkpoint::new(extractor_cfg);
    ckpt.epoch = cfg.epochs as u64;
    ckpt.rng_seed = cfg.seed;
    ckpt.rng_word_pos = rng.get_word_pos();
    match modality {
        Modality::Strong => ckpt.nbi_norm = Some(stats),
        Modality::Weak => ckpt.wl_norm = Some(stats),
    }
    ckpt.insert_prefixed(extractor_prefix, best_extractor.named_tensors());
    ckpt.insert_prefixed(head_prefix, best_head.named_tensors());
    for (name, data) in opt.state_tensors() {
        let len = data.len();
        ckpt.tensors.insert(format!("opt.{name}"), (vec![len], data));
    }
    Ok(PretrainResult {
        checkpoint: ckpt,
        best_val_acc: if best_val.is_finite() { best_val } else { f64::NAN },
        history,
    })
}

/// Trainable and frozen parameters plus optimizer state for the
/// alignment phase.
pub struct AlignTrainState {
    pub student: Extractor,
    pub f1: ClassifierHead,
    pub d: Discriminator,
    pub frozen: FrozenBranches,
    pub opt_student: Adam,
    pub opt_d: Adam,
    pub weights: LossWeights,
    pub triplet: TripletConfig,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl AlignTrainState {
    pub fn new(
        teacher_ckpt: &Checkpoint,
        unaligned_ckpt: &Checkpoint,
        cfg: &OptimizerConfig,
        weights: LossWeights,
        triplet: TripletConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let frozen = FrozenBranches::from_checkpoints(teacher_ckpt, unaligned_ckpt)?;
        let config = teacher_ckpt.config;
        // Warm start from the weak-modality pretrain: alignment refines
        // an already-working student instead of fighting the adversary
        // from random init.
        let student = unaligned_ckpt.extractor("unaligned", derive_seed(cfg.seed, 11))?;
        let f1 = unaligned_ckpt.head("head", HeadRole::F1)?;
        let d = Discriminator::new_seeded(
            config.out_channels,
            config.out_side,
            derive_seed(cfg.seed, 13),
        );
        Ok(AlignTrainState {
            student,
            f1,
            d,
            frozen,
            opt_student: Adam::new(cfg.learning_rate, cfg.weight_decay),
            opt_d: Adam::new(cfg.learning_rate, cfg.weight_decay),
            weights,
            triplet,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 14)),
        })
    }

    /// Hash of every frozen parameter; must never change.
    pub fn frozen_hash(&self) -> u64 {
        self.frozen
            .teacher
            .param_hash()
            .rotate_left(1)
            .wrapping_add(self.frozen.unaligned.param_hash())
            .rotate_left(1)
            .wrapping_add(self.frozen.f2.param_hash())
    }
}

/// One batch of matching (weak, strong, label) triples, already
/// normalized per modality.
pub struct AlignBatch {
    pub wl: Array4<f32>,
    pub nbi: Array4<f32>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossReport {
    pub l_d: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub l_t: f64,
}

/// One alternating update: the discriminator steps on
/// `CE(D(X_p), 1) + CE(D(X_a), 0)` with X_a detached, then {student, F1}
/// step jointly on `w_c·L_c + w_a·L_a + w_t·L_t` with D held fixed.
pub fn align_step(state: &mut AlignTrainState, batch: &AlignBatch) -> Result<LossReport> {
    let n = batch.labels.len();
    if batch.wl.dim().0 != n || batch.nbi.dim().0 != n {
        return Err(Error::Shape {
            expected: format!("batch of {n}"),
            got: format!("wl {:?}, nbi {:?}", batch.wl.dim(), batch.nbi.dim()),
        });
    }
    let nf = n as f64;

    // Feature extraction across the three branches.
    let feat_p = state.frozen.teacher.forward_batch(&batch.nbi)?;
    let feat_n = state.frozen.unaligned.forward_batch(&batch.wl)?;
    let (feat_a, student_trace) = state.student.forward_trace(&batch.wl)?;

    // Substep 1: discriminator update. X_a is a constant here.
    // Instance noise (relative to the positive branch's spread) keeps
    // the discriminator from saturating, which would starve the
    // student of a usable alignment gradient.
    const D_INSTANCE_NOISE: f32 = 0.5;
    let mut zfeat_p = feat_p.clone();
    let mut zfeat_a = feat_a.clone();
    {
        use rand_distr::Distribution;
        let count = zfeat_p.len() as f32;
        let mean = zfeat_p.sum() / count;
        let var = zfeat_p.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / count;
        let sigma = D_INSTANCE_NOISE * var.sqrt().max(1e-6);
        let normal = rand_distr::Normal::new(0.0f32, sigma).expect("valid sigma");
        let rng = &mut state.rng;
        zfeat_p.mapv_inplace(|v| v + normal.sample(rng));
        zfeat_a.mapv_inplace(|v| v + normal.sample(rng));
    }
    let (logits_p, trace_p) = state.d.logits_trace(&zfeat_p)?;
    let (logits_a, trace_a) = state.d.logits_trace(&zfeat_a)?;
    let mut l_d = 0.0;
    let mut glog_p = ndarray::Array1::<f32>::zeros(n);
    let mut glog_a = ndarray::Array1::<f32>::zeros(n);
    for i in 0..n {
        let pp = (sigmoid(logits_p[i]) as f64).clamp(PROB_EPS as f64, 1.0 - PROB_EPS as f64);
        let pa = (sigmoid(logits_a[i]) as f64).clamp(PROB_EPS as f64, 1.0 - PROB_EPS as f64);
        l_d += discriminator_loss(pp, pa);
        // Chain through the logistic: dp/dz = p (1 - p).
        let (gp, ga) = discriminator_loss_grad(pp, pa);
        glog_p[i] = (gp * pp * (1.0 - pp) / nf) as f32;
        glog_a[i] = (ga * pa * (1.0 - pa) / nf) as f32;
    }
    l_d /= nf;
    let (dgrads_p, _) = state.d.backward(&trace_p, glog_p.view());
    let (dgrads_a, _) = state.d.backward(&trace_a, glog_a.view());
    let mut d_grads = dgrads_p;
    for (acc, new) in [
        (&mut d_grads.conv1, &dgrads_a.conv1),
        (&mut d_grads.conv2, &dgrads_a.conv2),
    ] {
        acc.0 += &new.0;
        acc.1 += &new.1;
    }
    for (acc, new) in [(&mut d_grads.fc1, &dgrads_a.fc1), (&mut d_grads.fc2, &dgrads_a.fc2)] {
        acc.0 += &new.0;
        acc.1 += &new.1;
    }
    state.opt_d.step(state.d.adam_pairs(&d_grads));

    // Substep 2: student + F1 update with the refreshed D held fixed.
    let mut gfeat = Array4::<f32>::zeros(feat_a.dim());

    // L_c through F1.
    let logits_f1 = state.f1.forward_batch(&feat_a)?;
    let mut l_c = 0.0;
    let mut glogits_f1 = Array2::<f32>::zeros((n, 2));
    for i in 0..n {
        let lg = [logits_f1[(i, 0)] as f64, logits_f1[(i, 1)] as f64];
        let label = batch.labels[i] as usize;
        l_c += cross_entropy_class(lg, label)?;
        let g = cross_entropy_class_grad(lg, label)?;
        glogits_f1[(i, 0)] = (g[0] * state.weights.w_c / nf) as f32;
        glogits_f1[(i, 1)] = (g[1] * state.weights.w_c / nf) as f32;
    }
    l_c /= nf;
    let (gfeat_c, gw_f1, gb_f1) = state.f1.backward(&feat_a, &glogits_f1);
    gfeat += &gfeat_c;

    // L_a through the fixed, just-updated discriminator.
    let (logits_a2, trace_a2) = state.d.logits_trace(&zfeat_a)?;
    let mut l_a = 0.0;
    let mut glog_a2 = ndarray::Array1::<f32>::zeros(n);
    for i in 0..n {
        let pa = (sigmoid(logits_a2[i]) as f64).clamp(PROB_EPS as f64, 1.0 - PROB_EPS as f64);
        l_a += alignment_loss(pa);
        // -1/p * p(1-p) = p - 1.
        glog_a2[i] = ((pa - 1.0) * state.weights.w_a / nf) as f32;
    }
    l_a /= nf;
    if state.weights.w_a != 0.0 {
        let (_, mut gfeat_a) = state.d.backward(&trace_a2, glog_a2.view());
        // Trust-region cap: the adversarial gradient may not exceed
        // the classification gradient's norm. Keeps a saturated D from
        // blowing the student off the supervised solution.
        let na = gfeat_a.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        let nc = gfeat.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        if na > nc && na > 0.0 {
            let scale = (nc / na) as f32;
            gfeat_a.mapv_inplace(|g| g * scale);
        }
        gfeat += &gfeat_a;
    }

    // L_t over F2 distributions; positive and negative branches carry
    // no gradient.
    let logits_f2_a = state.frozen.f2.forward_batch(&feat_a)?;
    let logits_f2_p = state.frozen.f2.forward_batch(&feat_p)?;
    let logits_f2_n = state.frozen.f2.forward_batch(&feat_n)?;
    let mut l_t = 0.0;
    let mut glogits_f2 = Array2::<f32>::zeros((n, 2));
    for i in 0..n {
        let dist_a = softmax([logits_f2_a[(i, 0)] as f64, logits_f2_a[(i, 1)] as f64])?;
        let dist_p = softmax([logits_f2_p[(i, 0)] as f64, logits_f2_p[(i, 1)] as f64])?;
        let dist_n = softmax([logits_f2_n[(i, 0)] as f64, logits_f2_n[(i, 1)] as f64])?;
        l_t += triplet_contrastive(&dist_a, &dist_p, &dist_n, &state.triplet);
        let gdist = triplet_contrastive_grad(&dist_a, &dist_p, &dist_n, &state.triplet);
        let gz = softmax_backward(&dist_a, gdist);
        glogits_f2[(i, 0)] = (gz[0] * state.weights.w_t / nf) as f32;
        glogits_f2[(i, 1)] = (gz[1] * state.weights.w_t / nf) as f32;
    }
    l_t /= nf;
    if state.weights.w_t != 0.0 {
        // Input gradient only; F2 itself is frozen.
        let (gfeat_t, _, _) = state.frozen.f2.backward(&feat_a, &glogits_f2);
        gfeat += &gfeat_t;
    }

    for (name, v) in [("l_d", l_d), ("l_c", l_c), ("l_a", l_a), ("l_t", l_t)] {
        if !v.is_finite() {
            return Err(Error::Training {
                epoch: state.epoch,
                batch: 0,
                msg: format!("non-finite {name} = {v}"),
            });
        }
    }

    let sgrads = state.student.backward(&student_trace, &gfeat);
    let mut pairs = state.student.adam_pairs(&sgrads);
    pairs.push((
        state.f1.linear.weight.as_slice_mut().unwrap(),
        gw_f1.as_slice().unwrap(),
    ));
    pairs.push((
        state.f1.linear.bias.as_slice_mut().unwrap(),
        gb_f1.as_slice().unwrap(),
    ));
    state.opt_student.step(pairs);

    Ok(LossReport { l_d, l_c, l_a, l_t })
}

/// One metrics-log row.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_d: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub l_t: f64,
    pub val_acc: f64,
    pub triplet_sat_rate: f64,
    pub probe_d_acc: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,l_d,l_c,l_a,l_t,val_acc,triplet_sat_rate,probe_d_acc";

pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.l_d, r.l_c, r.l_a, r.l_t, r.val_acc, r.triplet_sat_rate, r.probe_d_acc
        ));
    }
    out
}

pub struct AlignResult {
    pub checkpoint: Checkpoint,
    pub best_val_acc: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Validation-set diagnostics for one epoch: weak-modality accuracy
/// through student+F1, triplet satisfaction rate, and the current
/// discriminator's accuracy separating X_p from X_a.
fn validation_metrics(
    state: &AlignTrainState,
    dataset: &Dataset,
    val_idx: &[usize],
) -> Result<(f64, f64, f64)> {
    let mut correct = 0usize;
    let mut satisfied = 0usize;
    let mut d_correct = 0usize;
    for chunk in val_idx.to_vec().chunks(32) {
        let wl_imgs: Vec<PixelImage> = chunk.iter().map(|i| dataset.wl[*i].clone()).collect();
        let nbi_imgs: Vec<PixelImage> = chunk.iter().map(|i| dataset.nbi[*i].clone()).collect();
        let wl = stack_normalized(&wl_imgs, &state.frozen.wl_norm);
        let nbi = stack_normalized(&nbi_imgs, &state.frozen.nbi_norm);
        let feat_a = state.student.forward_batch(&wl)?;
        let feat_p = state.frozen.teacher.forward_batch(&nbi)?;
        let feat_n = state.frozen.unaligned.forward_batch(&wl)?;
        let logits_f1 = state.f1.forward_batch(&feat_a)?;
        let f2_a = state.frozen.f2.forward_batch(&feat_a)?;
        let f2_p = state.frozen.f2.forward_batch(&feat_p)?;
        let f2_n = state.frozen.f2.forward_batch(&feat_n)?;
        let d_p = state.d.logits(&feat_p)?;
        let d_a = state.d.logits(&feat_a)?;
        for (bi, i) in chunk.iter().enumerate() {
            let dist = softmax([logits_f1[(bi, 0)] as f64, logits_f1[(bi, 1)] as f64])?;
            if argmax2(&dist) == dataset.labels[*i] {
                correct += 1;
            }
            let dist_a = softmax([f2_a[(bi, 0)] as f64, f2_a[(bi, 1)] as f64])?;
            let dist_p = softmax([f2_p[(bi, 0)] as f64, f2_p[(bi, 1)] as f64])?;
            let dist_n = softmax([f2_n[(bi, 0)] as f64, f2_n[(bi, 1)] as f64])?;
            if triplet_satisfied(&dist_a, &dist_p, &dist_n, &state.triplet) {
                satisfied += 1;
            }
            if d_p[bi] > 0.0 {
                d_correct += 1;
            }
            if d_a[bi] <= 0.0 {
                d_correct += 1;
            }
        }
    }
    let nv = val_idx.len() as f64;
    Ok((
        correct as f64 / nv,
        satisfied as f64 / nv,
        d_correct as f64 / (2.0 * nv),
    ))
}

/// Full alignment phase: iterates [`align_step`] over shuffled batches
/// and returns the best-validation-accuracy checkpoint plus the
/// per-epoch metrics log.
pub fn train_alignment(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    teacher_ckpt: &Checkpoint,
    unaligned_ckpt: &Checkpoint,
    cfg: &OptimizerConfig,
    weights: LossWeights,
    triplet: TripletConfig,
    policy: &AugmentPolicy,
) -> Result<AlignResult> {
    let mut state = AlignTrainState::new(teacher_ckpt, unaligned_ckpt, cfg, weights, triplet)?;
    if dataset.side != teacher_ckpt.config.in_side {
        return Err(Error::Shape {
            expected: format!("dataset side {}", teacher_ckpt.config.in_side),
            got: format!("{}", dataset.side),
        });
    }
    let train_idx: Vec<usize> = (0..dataset.len())
        .filter(|i| {
            plan.assignments
                .get(dataset.ids[*i].as_str())
                .is_some_and(|f| *f != fold)
        })
        .collect();
    let val_idx: Vec<usize> = (0..dataset.len())
        .filter(|i| plan.assignments.get(dataset.ids[*i].as_str()) == Some(&fold))
        .collect();
    if train_idx.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }

    let frozen_hash = state.frozen_hash();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut best = (state.student.clone(), state.f1.clone(), state.d.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 21));

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let order = shuffled(&train_idx, &mut rng);
        let mut sums = LossReport::default();
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut wl_imgs = Vec::with_capacity(chunk.len());
            let mut nbi_imgs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for i in chunk {
                let (w, s) = augment(&dataset.wl[*i], &dataset.nbi[*i], policy, &mut rng)?;
                wl_imgs.push(w);
                nbi_imgs.push(s);
                labels.push(dataset.labels[*i]);
            }
            let batch = AlignBatch {
                wl: stack_normalized(&wl_imgs, &state.frozen.wl_norm),
                nbi: stack_normalized(&nbi_imgs, &state.frozen.nbi_norm),
                labels,
            };
            let report = align_step(&mut state, &batch)?;
            sums.l_d += report.l_d;
            sums.l_c += report.l_c;
            sums.l_a += report.l_a;
            sums.l_t += report.l_t;
            n_batches += 1;
        }
        debug_assert_eq!(state.frozen_hash(), frozen_hash);
        let nb = n_batches.max(1) as f64;
        let (val_acc, sat_rate, probe_acc) = if val_idx.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            validation_metrics(&state, dataset, &val_idx)?
        };
        if val_acc > best_val {
            best_val = val_acc;
            best = (state.student.clone(), state.f1.clone(), state.d.clone());
        }
        metrics.push(EpochMetrics {
            epoch,
            l_d: sums.l_d / nb,
            l_c: sums.l_c / nb,
            l_a: sums.l_a / nb,
            l_t: sums.l_t / nb,
            val_acc,
            triplet_sat_rate: sat_rate,
            probe_d_acc: probe_acc,
        });
    }
    if state.frozen_hash() != frozen_hash {
        return Err(Error::Contract("frozen parameters changed".into()));
    }

    let (best_student, best_f1, best_d) = if best_val.is_finite() {
        best
    } else {
        (state.student.clone(), state.f1.clone(), state.d.clone())
    };
    let mut ckpt = Checkpoint::new(teacher_ckpt.config);
    ckpt.epoch = cfg.epochs as u64;
    ckpt.rng_seed = cfg.seed;
    ckpt.rng_word_pos = rng.get_word_pos();
    ckpt.wl_norm = Some(state.frozen.wl_norm);
    ckpt.nbi_norm = Some(state.frozen.nbi_norm);
    ckpt.insert_prefixed("student", best_student.named_tensors());
    ckpt.insert_prefixed("f1", best_f1.named_tensors());
    ckpt.insert_prefixed("d", best_d.named_tensors());
    ckpt.insert_prefixed("teacher", state.frozen.teacher.named_tensors());
    ckpt.insert_prefixed("unaligned", state.frozen.unaligned.named_tensors());
    ckpt.insert_prefixed("f2", state.frozen.f2.named_tensors());
    Ok(AlignResult {
        checkpoint: ckpt,
        best_val_acc: best_val,
        metrics,
    })
}
