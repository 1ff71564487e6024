//! Dataset representation: manifest ingestion, bounding-box crop and
//! resize, paired augmentation, and deterministic fold construction.
//!
//! Pixel images are `Array3<f32>` in channel-first `(3, H, W)` layout
//! with values in `[0, 1]`. Normalization to zero mean / unit variance
//! happens only at the training boundary via [`NormStats`].

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel image, channel-first `(3, H, W)`, values in `[0, 1]`.
pub type PixelImage = Array3<f32>;

/// Axis-aligned crop region in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        BBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// One manifest line. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub pair_id: String,
    pub wl_path: String,
    pub nbi_path: String,
    pub label: u8,
    pub wl_bbox: BBox,
    pub nbi_bbox: BBox,
}

/// On-disk dataset description. Record order is canonical.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<PairRecord>,
    pub class_names: Vec<String>,
    pub source_tag: String,
    /// Directory the manifest was loaded from; relative image paths
    /// resolve against it.
    pub base_dir: PathBuf,
}

pub const DEFAULT_CLASS_NAMES: [&str; 2] = ["hyperplastic", "adenomatous"];

impl Manifest {
    pub fn new(records: Vec<PairRecord>, base_dir: PathBuf, source_tag: String) -> Self {
        Manifest {
            records,
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            source_tag,
            base_dir,
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Serializes to the JSON-Lines wire format, one record per line
    /// with a trailing newline. `serialize ∘ parse` is a fixpoint.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Loads and validates a JSON-Lines manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut records = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord =
            serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
                path: path.to_path_buf(),
                line: lineno,
                msg: e.to_string(),
            })?;
        let validate = |msg: String| Error::ManifestValidation {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        if rec.label > 1 {
            return Err(validate(format!("label {} outside {{0, 1}}", rec.label)));
        }
        for b in [&rec.wl_bbox, &rec.nbi_bbox] {
            if b.w == 0 || b.h == 0 {
                return Err(validate(format!("zero-area bounding box {:?}", b)));
            }
        }
        if !seen_ids.insert(rec.pair_id.clone()) {
            return Err(validate(format!("duplicate pair_id {:?}", rec.pair_id)));
        }
        for rel in [&rec.wl_path, &rec.nbi_path] {
            let resolved = if Path::new(rel).is_absolute() {
                PathBuf::from(rel)
            } else {
                base_dir.join(rel)
            };
            if !resolved.is_file() {
                return Err(validate(format!("missing image file {:?}", resolved)));
            }
        }
        records.push(rec);
    }
    Ok(Manifest::new(
        records,
        base_dir,
        path.display().to_string(),
    ))
}

/// Deterministic k-fold assignment of pair ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Validation ids for fold `nr`, in manifest record order.
    pub fn valid_ids<'a>(&self, manifest: &'a Manifest, fold: usize) -> Vec<&'a str> {
        manifest
            .records
            .iter()
            .map(|r| r.pair_id.as_str())
            .filter(|id| self.assignments.get(*id) == Some(&fold))
            .collect()
    }

    pub fn train_ids<'a>(&self, manifest: &'a Manifest, fold: usize) -> Vec<&'a str> {
        manifest
            .records
            .iter()
            .map(|r| r.pair_id.as_str())
            .filter(|id| self.assignments.get(*id).is_some_and(|f| *f != fold))
            .collect()
    }
}

/// Uniformly shuffled (by seed) assignment into k near-equal folds.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("fold count k = {k} must be >= 2")));
    }
    if manifest.records.len() < k {
        return Err(Error::Config(format!(
            "k = {k} exceeds record count {}",
            manifest.records.len()
        )));
    }
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates; folds are positions mod k so sizes differ by at most 1.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut assignments = BTreeMap::new();
    for (pos, rec_idx) in order.iter().enumerate() {
        assignments.insert(manifest.records[*rec_idx].pair_id.clone(), pos % k);
    }
    Ok(FoldPlan {
        seed,
        k,
        assignments,
    })
}

/// Crops `bbox` out of `image` and bilinearly resamples to `side`×`side`.
pub fn crop_and_resize(image: &PixelImage, bbox: BBox, side: usize) -> Result<PixelImage> {
    let (c, h, w) = image.dim();
    if side == 0 {
        return Err(Error::Geometry("target side must be positive".into()));
    }
    if bbox.w == 0 || bbox.h == 0 {
        return Err(Error::Geometry(format!("zero-area box {:?}", bbox)));
    }
    let (bx, by, bw, bh) = (bbox.x as usize, bbox.y as usize, bbox.w as usize, bbox.h as usize);
    if bx + bw > w || by + bh > h {
        return Err(Error::Geometry(format!(
            "box {:?} exceeds image bounds {}x{}",
            bbox, w, h
        )));
    }
    let mut out = Array3::<f32>::zeros((c, side, side));
    let sx_scale = bw as f32 / side as f32;
    let sy_scale = bh as f32 / side as f32;
    for oy in 0..side {
        // Half-pixel-centered source coordinate, clamped to the box.
        let sy = ((oy as f32 + 0.5) * sy_scale - 0.5).clamp(0.0, (bh - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(bh - 1);
        let fy = sy - y0 as f32;
        for ox in 0..side {
            let sx = ((ox as f32 + 0.5) * sx_scale - 0.5).clamp(0.0, (bw - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(bw - 1);
            let fx = sx - x0 as f32;
            for ch in 0..c {
                let v00 = image[(ch, by + y0, bx + x0)];
                let v01 = image[(ch, by + y0, bx + x1)];
                let v10 = image[(ch, by + y1, bx + x0)];
                let v11 = image[(ch, by + y1, bx + x1)];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(ch, oy, ox)] = top + fy * (bot - top);
            }
        }
    }
    Ok(out)
}

/// Flip/rotation augmentation policy. Quarter-turn rotations only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    /// Allowed quarter turns, as multiples of 90 degrees in {0,1,2,3}.
    pub rotations: Vec<u8>,
    /// Apply the same draws to both modalities of a pair.
    pub paired_identical: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            rotations: vec![0, 1, 2, 3],
            paired_identical: true,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            rotations: vec![0],
            paired_identical: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.flip_h_prob, self.flip_v_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.rotations.is_empty() || self.rotations.iter().any(|r| *r > 3) {
            return Err(Error::Config(
                "rotations must be a non-empty subset of quarter turns".into(),
            ));
        }
        Ok(())
    }
}

pub fn flip_h(img: &PixelImage) -> PixelImage {
    let mut out = img.clone();
    out.invert_axis(Axis(2));
    out
}

pub fn flip_v(img: &PixelImage) -> PixelImage {
    let mut out = img.clone();
    out.invert_axis(Axis(1));
    out
}

/// Rotates a square image counter-clockwise by `quarters` quarter turns.
pub fn rot90(img: &PixelImage, quarters: u8) -> PixelImage {
    let mut cur = img.clone();
    for _ in 0..(quarters % 4) {
        let mut t = cur.permuted_axes([0, 2, 1]).to_owned();
        t.invert_axis(Axis(1));
        cur = t;
    }
    cur
}

#[derive(Debug, Clone, Copy)]
struct AugDraw {
    do_h: bool,
    do_v: bool,
    quarters: u8,
}

fn draw(policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> AugDraw {
    let do_h = rng.gen_bool(policy.flip_h_prob);
    let do_v = rng.gen_bool(policy.flip_v_prob);
    let quarters = policy.rotations[rng.gen_range(0..policy.rotations.len())];
    AugDraw {
        do_h,
        do_v,
        quarters,
    }
}

fn apply_draw(img: &PixelImage, d: AugDraw) -> PixelImage {
    let mut out = img.clone();
    if d.do_h {
        out = flip_h(&out);
    }
    if d.do_v {
        out = flip_v(&out);
    }
    if d.quarters != 0 {
        out = rot90(&out, d.quarters);
    }
    out
}

/// Applies seeded flip/rotation draws to a cropped pixel pair.
pub fn augment(
    wl: &PixelImage,
    nbi: &PixelImage,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(PixelImage, PixelImage)> {
    policy.validate()?;
    let square = |img: &PixelImage| img.dim().1 == img.dim().2;
    let rotations_enabled = policy.rotations.iter().any(|r| *r % 2 == 1);
    if rotations_enabled && (!square(wl) || !square(nbi)) {
        return Err(Error::Shape {
            expected: "square images for quarter-turn rotation".into(),
            got: format!("{:?} / {:?}", wl.dim(), nbi.dim()),
        });
    }
    let d_wl = draw(policy, rng);
    let d_nbi = if policy.paired_identical {
        d_wl
    } else {
        draw(policy, rng)
    };
    Ok((apply_draw(wl, d_wl), apply_draw(nbi, d_nbi)))
}

/// Single-image variant of [`augment`]; one draw from the generator.
pub fn augment_single(
    img: &PixelImage,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<PixelImage> {
    policy.validate()?;
    let rotations_enabled = policy.rotations.iter().any(|r| *r % 2 == 1);
    if rotations_enabled && img.dim().1 != img.dim().2 {
        return Err(Error::Shape {
            expected: "square image for quarter-turn rotation".into(),
            got: format!("{:?}", img.dim()),
        });
    }
    let d = draw(policy, rng);
    Ok(apply_draw(img, d))
}

/// Per-channel normalization statistics computed from a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

pub fn compute_norm_stats<'a>(images: impl Iterator<Item = &'a PixelImage>) -> NormStats {
    let mut sum = [0f64; 3];
    let mut sumsq = [0f64; 3];
    let mut n = [0f64; 3];
    for img in images {
        for ch in 0..3 {
            for v in img.index_axis(Axis(0), ch).iter() {
                sum[ch] += *v as f64;
                sumsq[ch] += (*v as f64) * (*v as f64);
                n[ch] += 1.0;
            }
        }
    }
    let mut mean = [0f32; 3];
    let mut std = [1f32; 3];
    for ch in 0..3 {
        if n[ch] > 0.0 {
            let m = sum[ch] / n[ch];
            mean[ch] = m as f32;
            std[ch] = ((sumsq[ch] / n[ch] - m * m).max(1e-8)).sqrt() as f32;
        }
    }
    NormStats { mean, std }
}

pub fn normalize(img: &PixelImage, stats: &NormStats) -> PixelImage {
    let mut out = img.clone();
    for ch in 0..3 {
        let mut plane = out.index_axis_mut(Axis(0), ch);
        plane.mapv_inplace(|v| (v - stats.mean[ch]) / stats.std[ch]);
    }
    out
}

/// Reads a 3-channel PNG or JPEG into `[0, 1]` pixels.
pub fn load_image(path: &Path) -> Result<PixelImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = p.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_image(img: &PixelImage, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[(0, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[(1, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[(2, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// A manifest with its images loaded, cropped and resized to one side.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub wl: Vec<PixelImage>,
    pub nbi: Vec<PixelImage>,
    pub labels: Vec<u8>,
    pub side: usize,
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest, side: usize) -> Result<Dataset> {
        let mut ids = Vec::new();
        let mut wl = Vec::new();
        let mut nbi = Vec::new();
        let mut labels = Vec::new();
        for rec in &manifest.records {
            let wl_img = load_image(&manifest.resolve(&rec.wl_path))?;
            let nbi_img = load_image(&manifest.resolve(&rec.nbi_path))?;
            wl.push(crop_and_resize(&wl_img, rec.wl_bbox, side)?);
            nbi.push(crop_and_resize(&nbi_img, rec.nbi_bbox, side)?);
            ids.push(rec.pair_id.clone());
            labels.push(rec.label);
        }
        Ok(Dataset {
            ids,
            wl,
            nbi,
            labels,
            side,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices of records whose pair_id belongs to `ids`.
    pub fn indices_of(&self, ids: &[&str]) -> Vec<usize> {
        let set: HashSet<&str> = ids.iter().copied().collect();
        (0..self.len())
            .filter(|i| set.contains(self.ids[*i].as_str()))
            .collect()
    }
}
