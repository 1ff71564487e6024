//! Scalar objectives: classification cross-entropy (L_c), adversarial
//! alignment loss (L_a), discriminator loss, KL divergence, the
//! margin triplet contrastive loss (L_t), and the equal-weight total.
//!
//! Everything is f64 with analytic gradients next to each value; the
//! trainer chains these per-sample (distributions are 2-vectors, so the
//! precision costs nothing) and the finite-difference suite checks the
//! gradients directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp floor for probabilities before any log.
pub const EPS: f64 = 1e-7;

/// Probability vector over the two classes, clamped and normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDistribution {
    pub p: [f64; 2],
}

impl ClassDistribution {
    /// Clamps both components to `[EPS, 1]` and renormalizes.
    pub fn new(raw: [f64; 2]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite distribution {raw:?}")));
        }
        let c = [raw[0].clamp(EPS, 1.0), raw[1].clamp(EPS, 1.0)];
        let s = c[0] + c[1];
        Ok(ClassDistribution {
            p: [c[0] / s, c[1] / s],
        })
    }
}

/// Margin hyperparameter for the triplet loss, 0.85 by default.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    /// Swap the KL argument order (the divergence is asymmetric and the
    /// convention is unstated upstream; `false` means the aligned
    /// distribution is the first argument).
    pub reverse_kl: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.85,
            reverse_kl: false,
        }
    }
}

/// Numerically stable 2-way softmax with clamp + renormalization.
pub fn softmax(logits: [f64; 2]) -> Result<ClassDistribution> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let s = e[0] + e[1];
    ClassDistribution::new([e[0] / s, e[1] / s])
}

/// Pulls a gradient w.r.t. a softmax output back to the logits:
/// `g_z = p ⊙ (g - <g, p>)`.
pub fn softmax_backward(dist: &ClassDistribution, grad_dist: [f64; 2]) -> [f64; 2] {
    let dot = grad_dist[0] * dist.p[0] + grad_dist[1] * dist.p[1];
    [
        dist.p[0] * (grad_dist[0] - dot),
        dist.p[1] * (grad_dist[1] - dot),
    ]
}

/// `-log softmax(logits)[label]`, one sample's contribution to L_c.
pub fn cross_entropy_class(logits: [f64; 2], label: usize) -> Result<f64> {
    if label > 1 {
        return Err(Error::Contract(format!("label {label} outside {{0, 1}}")));
    }
    let d = softmax(logits)?;
    Ok(-d.p[label].ln())
}

/// Gradient of [`cross_entropy_class`] w.r.t. the logits: `p - onehot`.
pub fn cross_entropy_class_grad(logits: [f64; 2], label: usize) -> Result<[f64; 2]> {
    if label > 1 {
        return Err(Error::Contract(format!("label {label} outside {{0, 1}}")));
    }
    let d = softmax(logits)?;
    let mut g = d.p;
    g[label] -= 1.0;
    Ok(g)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Binary cross-entropy on a clamped probability.
pub fn bce(prob: f64, target: u8) -> f64 {
    let p = clamp_prob(prob);
    match target {
        1 => -p.ln(),
        _ => -(1.0 - p).ln(),
    }
}

/// d bce / d prob (zero where the clamp is active).
pub fn bce_grad(prob: f64, target: u8) -> f64 {
    if prob <= EPS || prob >= 1.0 - EPS {
        return 0.0;
    }
    match target {
        1 => -1.0 / prob,
        _ => 1.0 / (1.0 - prob),
    }
}

/// L_a = bce(D(X_a), 1) = -log D(X_a). The real label is 1: the student
/// is rewarded when the discriminator believes its features are strong-
/// modality features.
pub fn alignment_loss(d_out_on_xa: f64) -> f64 {
    bce(d_out_on_xa, 1)
}

pub fn alignment_loss_grad(d_out_on_xa: f64) -> f64 {
    bce_grad(d_out_on_xa, 1)
}

/// Discriminator objective: teacher features labeled real (1), aligned
/// student features labeled fake (0). X_a is treated as constant here.
pub fn discriminator_loss(d_out_on_xp: f64, d_out_on_xa: f64) -> f64 {
    bce(d_out_on_xp, 1) + bce(d_out_on_xa, 0)
}

pub fn discriminator_loss_grad(d_out_on_xp: f64, d_out_on_xa: f64) -> (f64, f64) {
    (bce_grad(d_out_on_xp, 1), bce_grad(d_out_on_xa, 0))
}

/// `KL(p || q) = Σ p_i ln(p_i / q_i)`, natural log. Inputs are assumed
/// clamped and normalized (see [`ClassDistribution::new`]).
pub fn kl_divergence(p: &ClassDistribution, q: &ClassDistribution) -> f64 {
    let mut s = 0.0;
    for i in 0..2 {
        s += p.p[i] * (p.p[i] / q.p[i]).ln();
    }
    s
}

/// Gradients of [`kl_divergence`] w.r.t. `p` and `q` component-wise
/// (treating the components as free positive variables).
pub fn kl_divergence_grad(p: &ClassDistribution, q: &ClassDistribution) -> ([f64; 2], [f64; 2]) {
    let mut gp = [0.0; 2];
    let mut gq = [0.0; 2];
    for i in 0..2 {
        gp[i] = (p.p[i] / q.p[i]).ln() + 1.0;
        gq[i] = -p.p[i] / q.p[i];
    }
    (gp, gq)
}

fn kl_oriented(a: &ClassDistribution, b: &ClassDistribution, reverse: bool) -> f64 {
    if reverse {
        kl_divergence(b, a)
    } else {
        kl_divergence(a, b)
    }
}

/// Gradient of `kl_oriented(a, b)` w.r.t. `a`.
fn kl_oriented_grad_a(a: &ClassDistribution, b: &ClassDistribution, reverse: bool) -> [f64; 2] {
    if reverse {
        kl_divergence_grad(b, a).1
    } else {
        kl_divergence_grad(a, b).0
    }
}

/// L_t = max(KL(a, p) - KL(a, n) + μ, 0). The positive and negative
/// branches come from frozen extractors, so only the gradient w.r.t.
/// the aligned distribution is ever needed.
pub fn triplet_contrastive(
    dist_a: &ClassDistribution,
    dist_p: &ClassDistribution,
    dist_n: &ClassDistribution,
    cfg: &TripletConfig,
) -> f64 {
    let kl_ap = kl_oriented(dist_a, dist_p, cfg.reverse_kl);
    let kl_an = kl_oriented(dist_a, dist_n, cfg.reverse_kl);
    (kl_ap - kl_an + cfg.margin).max(0.0)
}

/// Gradient of [`triplet_contrastive`] w.r.t. `dist_a` (zero when the
/// hinge is inactive).
pub fn triplet_contrastive_grad(
    dist_a: &ClassDistribution,
    dist_p: &ClassDistribution,
    dist_n: &ClassDistribution,
    cfg: &TripletConfig,
) -> [f64; 2] {
    if triplet_contrastive(dist_a, dist_p, dist_n, cfg) <= 0.0 {
        return [0.0; 2];
    }
    let gp = kl_oriented_grad_a(dist_a, dist_p, cfg.reverse_kl);
    let gn = kl_oriented_grad_a(dist_a, dist_n, cfg.reverse_kl);
    [gp[0] - gn[0], gp[1] - gn[1]]
}

/// Triplet satisfaction: the margin constraint holds strictly, i.e. the
/// anchor sits closer to the positive than to the negative.
pub fn triplet_satisfied(
    dist_a: &ClassDistribution,
    dist_p: &ClassDistribution,
    dist_n: &ClassDistribution,
    cfg: &TripletConfig,
) -> bool {
    kl_oriented(dist_a, dist_p, cfg.reverse_kl) < kl_oriented(dist_a, dist_n, cfg.reverse_kl)
}

/// L = L_c + L_a + L_t, all coefficients 1.
pub fn total_loss(l_c: f64, l_a: f64, l_t: f64) -> Result<f64> {
    for (name, v) in [("l_c", l_c), ("l_a", l_a), ("l_t", l_t)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss term {name} = {v}")));
        }
    }
    Ok(l_c + l_a + l_t)
}
