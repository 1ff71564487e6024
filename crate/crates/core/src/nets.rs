//! Network definitions: the shared-backbone feature extractors, the two
//! single-FC classifier heads (F1, F2), the discriminator, and the
//! checkpoint container.
//!
//! Three extractors (teacher, student, unaligned) share one
//! architecture per run. The "resnet50-like" configuration realizes the
//! 2048x14x14 feature contract for 448x448 inputs; "tiny" (32x4x4 from
//! 64x64) exists so full training runs finish in CPU minutes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::NormStats;
use crate::error::{Error, Result};
use crate::nn::{
    gap, gap_backward, leaky_relu2, leaky_relu2_backward, leaky_relu4, leaky_relu4_backward,
    Conv2d, Linear,
};

pub const PROB_EPS: f32 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneName {
    Resnet50Like,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Random,
    Pretrained,
}

/// Shape contract for one extractor family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub name: BackboneName,
    pub in_side: usize,
    pub out_channels: usize,
    pub out_side: usize,
    pub init: InitMode,
}

impl ExtractorConfig {
    pub fn resnet50_like() -> Self {
        ExtractorConfig {
            name: BackboneName::Resnet50Like,
            in_side: 448,
            out_channels: 2048,
            out_side: 14,
            init: InitMode::Random,
        }
    }

    pub fn tiny() -> Self {
        ExtractorConfig {
            name: BackboneName::Tiny,
            in_side: 64,
            out_channels: 32,
            out_side: 4,
            init: InitMode::Random,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "resnet50-like" => Ok(Self::resnet50_like()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown extractor config {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.name {
            BackboneName::Resnet50Like => {
                self.in_side == 448 && self.out_channels == 2048 && self.out_side == 14
            }
            BackboneName::Tiny => {
                self.in_side == 64 && self.out_channels == 32 && self.out_side == 4
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent extractor config {self:?}")))
        }
    }
}

/// Identifies which branch produced a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// X_a, the student's output on the weak modality.
    Aligned,
    /// X_p, the teacher's output on the strong modality.
    Positive,
    /// X_n, the unaligned baseline's output on the weak modality.
    Negative,
}

/// One sample's C×h×w activation grid.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f32>,
    pub source: FeatureSource,
}

/// Strided conv stack with leaky activations after every convolution.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub convs: Vec<Conv2d>,
}

pub struct ExtractorTrace {
    /// Input to each conv layer (length = layer count).
    xs: Vec<Array4<f32>>,
    /// Pre-activation of each layer.
    zs: Vec<Array4<f32>>,
}

#[derive(Debug, Clone)]
pub struct ExtractorGrads {
    pub convs: Vec<(Array4<f32>, Array1<f32>)>,
}

impl Extractor {
    pub fn new_seeded(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan: Vec<(usize, usize, usize, usize, usize)> = match config.name {
            // (in, out, k, stride, pad)
            BackboneName::Tiny => vec![
                (3, 8, 3, 2, 1),
                (8, 16, 3, 2, 1),
                (16, 32, 3, 2, 1),
                (32, 32, 3, 2, 1),
            ],
            BackboneName::Resnet50Like => vec![
                (3, 16, 3, 2, 1),
                (16, 32, 3, 2, 1),
                (32, 64, 3, 2, 1),
                (64, 128, 3, 2, 1),
                (128, 256, 3, 2, 1),
                (256, 2048, 1, 1, 0),
            ],
        };
        let convs = plan
            .into_iter()
            .map(|(ci, co, k, s, p)| Conv2d::new_seeded(ci, co, k, s, p, &mut rng))
            .collect();
        Ok(Extractor { config, convs })
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.config.in_side || w != self.config.in_side {
            return Err(Error::Shape {
                expected: format!("(_, 3, {0}, {0})", self.config.in_side),
                got: format!("{:?}", x.dim()),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite extractor input".into()));
        }
        Ok(())
    }

    pub fn forward_batch(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = leaky_relu4(&conv.forward(&cur));
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &Array4<f32>) -> Result<(Array4<f32>, ExtractorTrace)> {
        self.check_input(x)?;
        let mut xs = Vec::with_capacity(self.convs.len());
        let mut zs = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            xs.push(cur.clone());
            let z = conv.forward(&cur);
            cur = leaky_relu4(&z);
            zs.push(z);
        }
        Ok((cur, ExtractorTrace { xs, zs }))
    }

    pub fn backward(&self, trace: &ExtractorTrace, grad_out: &Array4<f32>) -> ExtractorGrads {
        let mut grads: Vec<(Array4<f32>, Array1<f32>)> = Vec::with_capacity(self.convs.len());
        let mut g = grad_out.clone();
        for i in (0..self.convs.len()).rev() {
            let gz = leaky_relu4_backward(&trace.zs[i], &g);
            let (gx, gw, gb) = self.convs[i].backward(&trace.xs[i], &gz);
            grads.push((gw, gb));
            g = gx;
        }
        grads.reverse();
        ExtractorGrads { convs: grads }
    }

    pub fn adam_pairs<'a>(
        &'a mut self,
        grads: &'a ExtractorGrads,
    ) -> Vec<(&'a mut [f32], &'a [f32])> {
        self.convs
            .iter_mut()
            .zip(grads.convs.iter())
            .flat_map(|(c, (gw, gb))| {
                vec![
                    (
                        c.weight.as_slice_mut().unwrap(),
                        gw.as_slice().unwrap(),
                    ),
                    (c.bias.as_slice_mut().unwrap(), gb.as_slice().unwrap()),
                ]
            })
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((
                format!("conv{i}.w"),
                c.weight.shape().to_vec(),
                c.weight.iter().copied().collect(),
            ));
            out.push((
                format!("conv{i}.b"),
                c.bias.shape().to_vec(),
                c.bias.to_vec(),
            ));
        }
        out
    }

    pub fn load_tensors(&mut self, take: &mut impl FnMut(&str) -> Result<Vec<f32>>) -> Result<()> {
        for i in 0..self.convs.len() {
            let w = take(&format!("conv{i}.w"))?;
            let b = take(&format!("conv{i}.b"))?;
            let wd = self.convs[i].weight.dim();
            self.convs[i].weight = Array4::from_shape_vec(wd, w)
                .map_err(|e| Error::Compatibility(format!("conv{i}.w: {e}")))?;
            self.convs[i].bias = Array1::from_vec(b);
        }
        Ok(())
    }

    pub fn param_hash(&self) -> u64 {
        hash_slices(self.convs.iter().flat_map(|c| {
            [
                c.weight.as_slice().unwrap(),
                c.bias.as_slice().unwrap(),
            ]
        }))
    }
}

/// Per-sample forward through an extractor in evaluation mode.
pub fn extractor_forward(
    extractor: &Extractor,
    image: &Array3<f32>,
    source: FeatureSource,
) -> Result<FeatureMap> {
    let (c, h, w) = image.dim();
    let batch = image
        .to_owned()
        .into_shape_with_order((1, c, h, w))
        .expect("shape");
    let out = extractor.forward_batch(&batch)?;
    let (_, oc, oh, ow) = out.dim();
    Ok(FeatureMap {
        values: out
            .into_shape_with_order((oc, oh, ow))
            .expect("shape"),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadRole {
    F1,
    F2,
}

/// Global average pooling followed by a single FC layer to 2 logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub role: HeadRole,
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new_seeded(role: HeadRole, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClassifierHead {
            role,
            linear: Linear::new_seeded(channels, 2, &mut rng),
        }
    }

    pub fn forward_batch(&self, feat: &Array4<f32>) -> Result<Array2<f32>> {
        let (_, c, _, _) = feat.dim();
        if c != self.linear.weight.dim().1 {
            return Err(Error::Shape {
                expected: format!("{} channels", self.linear.weight.dim().1),
                got: format!("{c} channels"),
            });
        }
        Ok(self.linear.forward(&gap(feat)))
    }

    /// Backward through the head. Returns (grad wrt feature map,
    /// grad weight, grad bias).
    pub fn backward(
        &self,
        feat: &Array4<f32>,
        grad_logits: &Array2<f32>,
    ) -> (Array4<f32>, Array2<f32>, Array1<f32>) {
        let pooled = gap(feat);
        let (gp, gw, gb) = self.linear.backward(&pooled, grad_logits);
        (gap_backward(feat.dim(), &gp), gw, gb)
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        vec![
            (
                "fc.w".into(),
                self.linear.weight.shape().to_vec(),
                self.linear.weight.iter().copied().collect(),
            ),
            (
                "fc.b".into(),
                self.linear.bias.shape().to_vec(),
                self.linear.bias.to_vec(),
            ),
        ]
    }

    pub fn load_tensors(&mut self, take: &mut impl FnMut(&str) -> Result<Vec<f32>>) -> Result<()> {
        let w = take("fc.w")?;
        let b = take("fc.b")?;
        let wd = self.linear.weight.dim();
        self.linear.weight = Array2::from_shape_vec(wd, w)
            .map_err(|e| Error::Compatibility(format!("fc.w: {e}")))?;
        self.linear.bias = Array1::from_vec(b);
        Ok(())
    }

    pub fn param_hash(&self) -> u64 {
        hash_slices(
            [
                self.linear.weight.as_slice().unwrap(),
                self.linear.bias.as_slice().unwrap(),
            ]
            .into_iter(),
        )
    }
}

/// Per-sample head evaluation: GAP then the linear map. Logits are
/// unnormalized.
pub fn head_forward(head: &ClassifierHead, feat: &FeatureMap) -> Result<[f32; 2]> {
    let (c, h, w) = feat.values.dim();
    let batch = feat
        .values
        .to_owned()
        .into_shape_with_order((1, c, h, w))
        .expect("shape");
    let logits = head.forward_batch(&batch)?;
    Ok([logits[(0, 0)], logits[(0, 1)]])
}

/// Two conv stages plus two FC stages ending in one logit.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub in_channels: usize,
    pub in_side: usize,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct DiscriminatorTrace {
    x0: Array4<f32>,
    z1: Array4<f32>,
    x1: Array4<f32>,
    z2: Array4<f32>,
    x2_flat: Array2<f32>,
    z3: Array2<f32>,
    x3: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorGrads {
    pub conv1: (Array4<f32>, Array1<f32>),
    pub conv2: (Array4<f32>, Array1<f32>),
    pub fc1: (Array2<f32>, Array1<f32>),
    pub fc2: (Array2<f32>, Array1<f32>),
}

impl Discriminator {
    pub fn new_seeded(in_channels: usize, in_side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Clamp the widths so small feature maps still leave the
        // flatten stage with enough capacity to discriminate.
        let c4 = (in_channels / 4).clamp(16, 256);
        let c16 = (in_channels / 16).clamp(8, 64);
        let conv1 = Conv2d::new_seeded(in_channels, c4, 3, 2, 1, &mut rng);
        let s1 = conv1.out_side(in_side);
        let conv2 = Conv2d::new_seeded(c4, c16, 3, 2, 1, &mut rng);
        let s2 = conv2.out_side(s1);
        let flat = c16 * s2 * s2;
        let fc1 = Linear::new_seeded(flat, 128, &mut rng);
        let fc2 = Linear::new_seeded(128, 1, &mut rng);
        Discriminator {
            in_channels,
            in_side,
            conv1,
            conv2,
            fc1,
            fc2,
        }
    }

    fn check_input(&self, feat: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = feat.dim();
        if c != self.in_channels || h != self.in_side || w != self.in_side {
            return Err(Error::Shape {
                expected: format!("(_, {}, {1}, {1})", self.in_channels, self.in_side),
                got: format!("{:?}", feat.dim()),
            });
        }
        Ok(())
    }

    /// Batch of raw logits (one per sample).
    pub fn logits_trace(&self, feat: &Array4<f32>) -> Result<(Array1<f32>, DiscriminatorTrace)> {
        self.check_input(feat)?;
        let n = feat.dim().0;
        let z1 = self.conv1.forward(feat);
        let x1 = leaky_relu4(&z1);
        let z2 = self.conv2.forward(&x1);
        let x2 = leaky_relu4(&z2);
        let flat_dim = x2.len() / n;
        let x2_flat = x2
            .into_shape_with_order((n, flat_dim))
            .expect("contiguous");
        let z3 = self.fc1.forward(&x2_flat);
        let x3 = leaky_relu2(&z3);
        let logits2 = self.fc2.forward(&x3);
        let logits = logits2.column(0).to_owned();
        Ok((
            logits,
            DiscriminatorTrace {
                x0: feat.clone(),
                z1,
                x1,
                z2,
                x2_flat,
                z3,
                x3,
            },
        ))
    }

    pub fn logits(&self, feat: &Array4<f32>) -> Result<Array1<f32>> {
        Ok(self.logits_trace(feat)?.0)
    }

    /// Backward from per-sample logit gradients. Returns parameter
    /// grads and the gradient with respect to the input feature map.
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace,
        grad_logits: ArrayView1<f32>,
    ) -> (DiscriminatorGrads, Array4<f32>) {
        let n = trace.x0.dim().0;
        let g2 = grad_logits
            .to_owned()
            .into_shape_with_order((n, 1))
            .expect("shape");
        let (gx3, gw_fc2, gb_fc2) = self.fc2.backward(&trace.x3, &g2);
        let gz3 = leaky_relu2_backward(&trace.z3, &gx3);
        let (gx2_flat, gw_fc1, gb_fc1) = self.fc1.backward(&trace.x2_flat, &gz3);
        let x2_shape = {
            let (_, c, h, w) = trace.z2.dim();
            (n, c, h, w)
        };
        let gx2 = gx2_flat
            .into_shape_with_order(x2_shape)
            .expect("contiguous");
        let gz2 = leaky_relu4_backward(&trace.z2, &gx2);
        let (gx1, gw_c2, gb_c2) = self.conv2.backward(&trace.x1, &gz2);
        let gz1 = leaky_relu4_backward(&trace.z1, &gx1);
        let (gx0, gw_c1, gb_c1) = self.conv1.backward(&trace.x0, &gz1);
        (
            DiscriminatorGrads {
                conv1: (gw_c1, gb_c1),
                conv2: (gw_c2, gb_c2),
                fc1: (gw_fc1, gb_fc1),
                fc2: (gw_fc2, gb_fc2),
            },
            gx0,
        )
    }

    pub fn adam_pairs<'a>(
        &'a mut self,
        g: &'a DiscriminatorGrads,
    ) -> Vec<(&'a mut [f32], &'a [f32])> {
        vec![
            (
                self.conv1.weight.as_slice_mut().unwrap(),
                g.conv1.0.as_slice().unwrap(),
            ),
            (
                self.conv1.bias.as_slice_mut().unwrap(),
                g.conv1.1.as_slice().unwrap(),
            ),
            (
                self.conv2.weight.as_slice_mut().unwrap(),
                g.conv2.0.as_slice().unwrap(),
            ),
            (
                self.conv2.bias.as_slice_mut().unwrap(),
                g.conv2.1.as_slice().unwrap(),
            ),
            (
                self.fc1.weight.as_slice_mut().unwrap(),
                g.fc1.0.as_slice().unwrap(),
            ),
            (
                self.fc1.bias.as_slice_mut().unwrap(),
                g.fc1.1.as_slice().unwrap(),
            ),
            (
                self.fc2.weight.as_slice_mut().unwrap(),
                g.fc2.0.as_slice().unwrap(),
            ),
            (
                self.fc2.bias.as_slice_mut().unwrap(),
                g.fc2.1.as_slice().unwrap(),
            ),
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (name, w, b) in [
            ("conv1", &self.conv1.weight, &self.conv1.bias),
            ("conv2", &self.conv2.weight, &self.conv2.bias),
        ] {
            out.push((
                format!("{name}.w"),
                w.shape().to_vec(),
                w.iter().copied().collect(),
            ));
            out.push((format!("{name}.b"), b.shape().to_vec(), b.to_vec()));
        }
        for (name, l) in [("fc1", &self.fc1), ("fc2", &self.fc2)] {
            out.push((
                format!("{name}.w"),
                l.weight.shape().to_vec(),
                l.weight.iter().copied().collect(),
            ));
            out.push((
                format!("{name}.b"),
                l.bias.shape().to_vec(),
                l.bias.to_vec(),
            ));
        }
        out
    }

    pub fn load_tensors(&mut self, take: &mut impl FnMut(&str) -> Result<Vec<f32>>) -> Result<()> {
        self.conv1.weight = Array4::from_shape_vec(self.conv1.weight.dim(), take("conv1.w")?)
            .map_err(|e| Error::Compatibility(e.to_string()))?;
        self.conv1.bias = Array1::from_vec(take("conv1.b")?);
        self.conv2.weight = Array4::from_shape_vec(self.conv2.weight.dim(), take("conv2.w")?)
            .map_err(|e| Error::Compatibility(e.to_string()))?;
        self.conv2.bias = Array1::from_vec(take("conv2.b")?);
        self.fc1.weight = Array2::from_shape_vec(self.fc1.weight.dim(), take("fc1.w")?)
            .map_err(|e| Error::Compatibility(e.to_string()))?;
        self.fc1.bias = Array1::from_vec(take("fc1.b")?);
        self.fc2.weight = Array2::from_shape_vec(self.fc2.weight.dim(), take("fc2.w")?)
            .map_err(|e| Error::Compatibility(e.to_string()))?;
        self.fc2.bias = Array1::from_vec(take("fc2.b")?);
        Ok(())
    }

    pub fn param_hash(&self) -> u64 {
        hash_slices(
            [
                self.conv1.weight.as_slice().unwrap(),
                self.conv1.bias.as_slice().unwrap(),
                self.conv2.weight.as_slice().unwrap(),
                self.conv2.bias.as_slice().unwrap(),
                self.fc1.weight.as_slice().unwrap(),
                self.fc1.bias.as_slice().unwrap(),
                self.fc2.weight.as_slice().unwrap(),
                self.fc2.bias.as_slice().unwrap(),
            ]
            .into_iter(),
        )
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-sample discriminator probability, clamped strictly inside (0, 1).
pub fn discriminator_forward(d: &Discriminator, feat: &FeatureMap) -> Result<f32> {
    let (c, h, w) = feat.values.dim();
    let batch = feat
        .values
        .to_owned()
        .into_shape_with_order((1, c, h, w))
        .expect("shape");
    let logit = d.logits(&batch)?[0];
    Ok(sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// FNV-1a over the parameter bytes; used by the freeze-contract checks.
pub fn hash_slices<'a>(slices: impl Iterator<Item = &'a [f32]>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for s in slices {
        for v in s {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CPCALCKP";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ExtractorConfig,
    epoch: u64,
    wl_norm: Option<NormStats>,
    nbi_norm: Option<NormStats>,
    rng_seed: u64,
    rng_word_pos_lo: u64,
    rng_word_pos_hi: u64,
    tensors: Vec<TensorMeta>,
}

/// Named-parameter container persisted as a JSON header followed by raw
/// little-endian f32 blobs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExtractorConfig,
    pub epoch: u64,
    pub wl_norm: Option<NormStats>,
    pub nbi_norm: Option<NormStats>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(config: ExtractorConfig) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            epoch: 0,
            wl_norm: None,
            nbi_norm: None,
            rng_seed: 0,
            rng_word_pos: 0,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_prefixed(&mut self, prefix: &str, tensors: Vec<(String, Vec<usize>, Vec<f32>)>) {
        for (name, shape, data) in tensors {
            self.tensors.insert(format!("{prefix}.{name}"), (shape, data));
        }
    }

    /// Closure handing out tensors under `prefix` for `load_tensors`.
    pub fn taker<'a>(&'a self, prefix: &'a str) -> impl FnMut(&str) -> Result<Vec<f32>> + 'a {
        move |name: &str| {
            let key = format!("{prefix}.{name}");
            self.tensors
                .get(&key)
                .map(|(_, d)| d.clone())
                .ok_or_else(|| Error::Compatibility(format!("checkpoint missing tensor {key}")))
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let pat = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&pat))
    }

    pub fn extractor(&self, prefix: &str, seed: u64) -> Result<Extractor> {
        let mut e = Extractor::new_seeded(self.config, seed)?;
        e.load_tensors(&mut self.taker(prefix))?;
        Ok(e)
    }

    pub fn head(&self, prefix: &str, role: HeadRole) -> Result<ClassifierHead> {
        let mut h = ClassifierHead::new_seeded(role, self.config.out_channels, 0);
        h.load_tensors(&mut self.taker(prefix))?;
        Ok(h)
    }

    pub fn discriminator(&self, prefix: &str) -> Result<Discriminator> {
        let mut d = Discriminator::new_seeded(self.config.out_channels, self.config.out_side, 0);
        d.load_tensors(&mut self.taker(prefix))?;
        Ok(d)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tensors: Vec<TensorMeta> = ckpt
        .tensors
        .iter()
        .map(|(name, (shape, data))| TensorMeta {
            name: name.clone(),
            shape: shape.clone(),
            len: data.len(),
        })
        .collect();
    let header = CheckpointHeader {
        version: ckpt.version,
        config: ckpt.config,
        epoch: ckpt.epoch,
        wl_norm: ckpt.wl_norm,
        nbi_norm: ckpt.nbi_norm,
        rng_seed: ckpt.rng_seed,
        rng_word_pos_lo: ckpt.rng_word_pos as u64,
        rng_word_pos_hi: (ckpt.rng_word_pos >> 64) as u64,
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(CHECKPOINT_MAGIC)
        .and_then(|_| file.write_all(&(header_json.len() as u64).to_le_bytes()))
        .and_then(|_| file.write_all(&header_json))
        .map_err(|e| Error::io(path, e))?;
    for (_, (_, data)) in ckpt.tensors.iter() {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Compatibility("not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_buf = vec![0u8; header_len];
    file.read_exact(&mut header_buf)
        .map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_buf)
        .map_err(|e| Error::Compatibility(format!("bad checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint version {} != supported {}",
            header.version, CHECKPOINT_VERSION
        )));
    }
    let mut tensors = BTreeMap::new();
    for meta in &header.tensors {
        let mut buf = vec![0u8; meta.len * 4];
        file.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(meta.name.clone(), (meta.shape.clone(), data));
    }
    Ok(Checkpoint {
        version: header.version,
        config: header.config,
        epoch: header.epoch,
        wl_norm: header.wl_norm,
        nbi_norm: header.nbi_norm,
        rng_seed: header.rng_seed,
        rng_word_pos: (header.rng_word_pos_hi as u128) << 64 | header.rng_word_pos_lo as u128,
        tensors,
    })
}

/// Shared state for the alignment phase loaded from the two pretrain
/// checkpoints: frozen teacher + F2 and frozen unaligned extractor.
pub struct FrozenBranches {
    pub teacher: Extractor,
    pub unaligned: Extractor,
    pub f2: ClassifierHead,
    pub wl_norm: NormStats,
    pub nbi_norm: NormStats,
}

impl FrozenBranches {
    pub fn from_checkpoints(teacher_ckpt: &Checkpoint, unaligned_ckpt: &Checkpoint) -> Result<Self> {
        if teacher_ckpt.config != unaligned_ckpt.config {
            return Err(Error::Compatibility(format!(
                "extractor configs differ: {:?} vs {:?}",
                teacher_ckpt.config, unaligned_ckpt.config
            )));
        }
        let teacher = teacher_ckpt.extractor("teacher", 0)?;
        let f2 = teacher_ckpt.head("f2", HeadRole::F2)?;
        let unaligned = unaligned_ckpt.extractor("unaligned", 0)?;
        let nbi_norm = teacher_ckpt
            .nbi_norm
            .ok_or_else(|| Error::Compatibility("teacher checkpoint lacks nbi norm stats".into()))?;
        let wl_norm = unaligned_ckpt
            .wl_norm
            .ok_or_else(|| Error::Compatibility("unaligned checkpoint lacks wl norm stats".into()))?;
        Ok(FrozenBranches {
            teacher,
            unaligned,
            f2,
            wl_norm,
            nbi_norm,
        })
    }
}
