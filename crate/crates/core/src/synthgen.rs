//! Seeded generator of paired two-modality synthetic datasets with a
//! controllable modality gap.
//!
//! The "strong" modality is a clean rendering of a latent class pattern
//! (oriented sinusoidal texture plus bright blobs; class-conditional
//! blob-count ranges are disjoint, so the clean task is
//! nearly separable by construction). The "weak" modality is the same
//! rendering degraded by box blur, contrast reduction, and additive
//! Gaussian noise. The class signal is geometric/textural, never a
//! color mean.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{save_image, BBox, Manifest, PairRecord, PixelImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub image_side: usize,
    /// Probability of class 1.
    pub class_prior: f64,
    /// Additive noise std on the weak modality, [0, 1] pixel units.
    pub gap_noise_sigma: f64,
    /// Box-blur radius in pixels on the weak modality.
    pub gap_blur_radius: usize,
    /// Multiplicative contrast factor (≤ 1) on the weak modality.
    pub gap_contrast: f64,
    /// Per-image, per-channel gain jitter half-range on the weak
    /// modality: gains drawn from U[1-j, 1+j]. A class-independent
    /// nuisance the strong modality never sees.
    pub gap_color_jitter: f64,
    /// Up to this many sharp specular-style bright spots are stamped
    /// onto each weak image after blurring. They mimic the true blobs
    /// (whose count carries class), so they corrupt the weak-modality
    /// cue; the strong modality never has them.
    pub gap_artifact_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The desk-scale acceptance configuration.
    fn default() -> Self {
        SynthConfig {
            n_pairs: 1000,
            image_side: 64,
            class_prior: 0.5,
            gap_noise_sigma: 0.25,
            gap_blur_radius: 2,
            gap_contrast: 0.6,
            gap_color_jitter: 0.0,
            gap_artifact_max: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs < 2 {
            return Err(Error::Config("n_pairs must be >= 2".into()));
        }
        if self.image_side < 16 {
            return Err(Error::Config("image_side must be >= 16".into()));
        }
        if !(0.0..=1.0).contains(&self.class_prior) {
            return Err(Error::Config("class_prior outside [0, 1]".into()));
        }
        if self.gap_noise_sigma < 0.0 {
            return Err(Error::Config("gap_noise_sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.gap_contrast) {
            return Err(Error::Config("gap_contrast must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gap_color_jitter) {
            return Err(Error::Config("gap_color_jitter must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Class-determining structure shared by both renderings of a pair.
#[derive(Debug, Clone)]
pub struct LatentPattern {
    pub class: u8,
    /// Texture frequency in cycles per image side, class-independent.
    pub texture_freq: f64,
    pub orientation: f64,
    pub phase: f64,
    pub blob_count: usize,
    /// Normalized (u, v) centers in [0.1, 0.9].
    pub blob_positions: Vec<(f64, f64)>,
    pub blob_radius: f64,
}

pub fn sample_latent(class: u8, rng: &mut ChaCha8Rng) -> LatentPattern {
    // Texture is a class-independent nuisance; only blob count carries
    // the class.
    let texture_freq = rng.gen_range(1.5..7.5);
    let blob_count = if class == 0 {
        rng.gen_range(1..=2)
    } else {
        rng.gen_range(4..=6)
    };
    let orientation = rng.gen_range(0.0..std::f64::consts::PI);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let blob_positions = (0..blob_count)
        .map(|_| (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)))
        .collect();
    LatentPattern {
        class,
        texture_freq,
        orientation,
        phase,
        blob_count,
        blob_positions,
        blob_radius: 0.09,
    }
}

/// High-contrast clean rendering (the strong-modality analog).
pub fn render_clean(latent: &LatentPattern, side: usize) -> PixelImage {
    // Fixed per-channel gains; identical for both classes so a color-
    // mean classifier cannot separate them.
    const GAINS: [f64; 3] = [1.0, 0.92, 0.84];
    let (cos_t, sin_t) = (latent.orientation.cos(), latent.orientation.sin());
    let mut img = Array3::<f32>::zeros((3, side, side));
    for y in 0..side {
        let v = (y as f64 + 0.5) / side as f64;
        for x in 0..side {
            let u = (x as f64 + 0.5) / side as f64;
            let t = u * cos_t + v * sin_t;
            let mut val =
                0.5 + 0.45 * (std::f64::consts::TAU * latent.texture_freq * t + latent.phase).sin();
            for (bu, bv) in &latent.blob_positions {
                let d2 = (u - bu).powi(2) + (v - bv).powi(2);
                val += 0.6 * (-d2 / (2.0 * latent.blob_radius.powi(2))).exp();
            }
            let val = val.clamp(0.0, 1.0);
            for ch in 0..3 {
                img[(ch, y, x)] = (val * GAINS[ch]) as f32;
            }
        }
    }
    img
}

/// Separable box blur with clamped borders.
pub fn box_blur(img: &PixelImage, radius: usize) -> PixelImage {
    if radius == 0 {
        return img.clone();
    }
    let (c, h, w) = img.dim();
    let r = radius as isize;
    let norm = (2 * radius + 1) as f32;
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dx in -r..=r {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    s += img[(ch, y, sx)];
                }
                tmp[(ch, y, x)] = s / norm;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -r..=r {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    s += tmp[(ch, sy, x)];
                }
                out[(ch, y, x)] = s / norm;
            }
        }
    }
    out
}

/// Degrades a clean rendering into the weak-modality analog.
pub fn degrade(clean: &PixelImage, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> PixelImage {
    let mut img = box_blur(clean, cfg.gap_blur_radius);
    if cfg.gap_contrast < 1.0 {
        let contrast = cfg.gap_contrast as f32;
        img.mapv_inplace(|v| 0.5 + (v - 0.5) * contrast);
    }
    if cfg.gap_artifact_max > 0 {
        let n_fake = rng.gen_range(0..=cfg.gap_artifact_max);
        let side = img.dim().1;
        for _ in 0..n_fake {
            let (bu, bv): (f64, f64) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
            // Same post-contrast brightness as a true blob but half
            // the radius — size-selectivity is the only tell, and a
            // size-selective extractor can reproduce the strong-
            // modality features exactly.
            let r = 0.06;
            let amp = 0.6 * cfg.gap_contrast;
            for y in 0..side {
                let v = (y as f64 + 0.5) / side as f64;
                for x in 0..side {
                    let u = (x as f64 + 0.5) / side as f64;
                    let d2 = (u - bu).powi(2) + (v - bv).powi(2);
                    let bump = (amp * (-d2 / (2.0 * r * r)).exp()) as f32;
                    if bump > 1e-3 {
                        for ch in 0..3 {
                            img[(ch, y, x)] += bump;
                        }
                    }
                }
            }
        }
    }
    if cfg.gap_color_jitter > 0.0 {
        let j = cfg.gap_color_jitter;
        let gains: [f32; 3] =
            std::array::from_fn(|_| rng.gen_range((1.0 - j)..=(1.0 + j)) as f32);
        let offset = rng.gen_range((-j / 2.0)..=(j / 2.0)) as f32;
        for ch in 0..3 {
            img.index_axis_mut(ndarray::Axis(0), ch)
                .mapv_inplace(|v| v * gains[ch] + offset);
        }
    }
    if cfg.gap_noise_sigma > 0.0 {
        // Low-frequency noise: white noise pushed through the same box
        // blur, rescaled to keep sigma. Spatial pooling cannot average
        // it out the way it would iid pixel noise.
        let normal = Normal::new(0.0f64, cfg.gap_noise_sigma).expect("valid sigma");
        let shape = img.raw_dim();
        let mut noise = Array3::<f32>::zeros(shape);
        noise.mapv_inplace(|_| normal.sample(rng) as f32);
        const NOISE_BLUR: usize = 2;
        let noise = box_blur(&noise, NOISE_BLUR);
        let gain = (2 * NOISE_BLUR + 1) as f32; // restore per-pixel std
        img.zip_mut_with(&noise, |v, n| *v = (*v + gain * n).clamp(0.0, 1.0));
    } else {
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    img
}

/// Renders one (weak, strong) pixel pair for a latent pattern.
pub fn generate_pair(
    latent: &LatentPattern,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PixelImage, PixelImage)> {
    cfg.validate()?;
    let clean = render_clean(latent, cfg.image_side);
    let weak = degrade(&clean, cfg, rng);
    Ok((weak, clean))
}

/// Per-pair generator derived from (seed, pair index) so pairs can be
/// produced independently.
pub fn pair_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Writes `n_pairs` PNG pairs plus a JSON-Lines manifest under
/// `out_dir` and returns the loaded-equivalent manifest.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let wl_dir = out_dir.join("wl");
    let nbi_dir = out_dir.join("nbi");
    fs::create_dir_all(&wl_dir).map_err(|e| Error::io(&wl_dir, e))?;
    fs::create_dir_all(&nbi_dir).map_err(|e| Error::io(&nbi_dir, e))?;
    let side = cfg.image_side as u32;
    let full = BBox {
        x: 0,
        y: 0,
        w: side,
        h: side,
    };
    let mut records = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let mut rng = pair_rng(cfg.seed, i as u64);
        let class = u8::from(rng.gen_bool(cfg.class_prior));
        let latent = sample_latent(class, &mut rng);
        let (weak, strong) = generate_pair(&latent, cfg, &mut rng)?;
        let pair_id = format!("pair_{i:05}");
        let wl_rel = format!("wl/{pair_id}.png");
        let nbi_rel = format!("nbi/{pair_id}.png");
        save_image(&weak, &out_dir.join(&wl_rel))?;
        save_image(&strong, &out_dir.join(&nbi_rel))?;
        records.push(PairRecord {
            pair_id,
            wl_path: wl_rel,
            nbi_path: nbi_rel,
            label: class,
            wl_bbox: full,
            nbi_bbox: full,
        });
    }
    let manifest = Manifest::new(records, out_dir.to_path_buf(), "synthgen".into());
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
