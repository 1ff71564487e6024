//! Minimal dense/convolutional layer kit with hand-written backward
//! passes. Everything is f32, batch-first, channel-first.
//!
//! Convolution uses im2col over the whole batch so the inner work is a
//! single matrix product. Backward passes recompute the column matrix
//! from the stored layer input rather than caching it.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f32 = 0.1;

/// 2-D convolution, kernel `(k, k)`, zero padding `pad`, stride `stride`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new_seeded(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let weight =
            Array4::from_shape_fn((out_ch, in_ch, k, k), |_| normal_sample(rng) * std);
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn out_side(&self, in_side: usize) -> usize {
        let k = self.weight.dim().2;
        (in_side + 2 * self.pad - k) / self.stride + 1
    }

    fn im2col(&self, x: &Array4<f32>) -> (Array2<f32>, usize, usize) {
        let (n, cin, h, w) = x.dim();
        let k = self.weight.dim().2;
        let (s, p) = (self.stride, self.pad);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut col = Array2::<f32>::zeros((cin * k * k, n * oh * ow));
        for ni in 0..n {
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ci * k * k + ky * k + kx;
                        for oy in 0..oh {
                            let sy = (oy * s + ky) as isize - p as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let sx = (ox * s + kx) as isize - p as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                col[(row, ni * oh * ow + oy * ow + ox)] =
                                    x[(ni, ci, sy as usize, sx as usize)];
                            }
                        }
                    }
                }
            }
        }
        (col, oh, ow)
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, _, _, _) = x.dim();
        let (out_ch, in_ch, k, _) = self.weight.dim();
        let (col, oh, ow) = self.im2col(x);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("contiguous weight");
        let mut y2 = w2.dot(&col); // [out_ch, n*oh*ow]
        for (mut row, b) in y2.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let y = y2
            .into_shape_with_order((out_ch, n, oh, ow))
            .expect("shape");
        let perm = y.view().permuted_axes([1, 0, 2, 3]);
        Array4::from_shape_vec((n, out_ch, oh, ow), perm.iter().copied().collect())
            .expect("shape")
    }

    /// Returns `(grad_x, grad_weight, grad_bias)`.
    pub fn backward(
        &self,
        x: &Array4<f32>,
        grad_y: &Array4<f32>,
    ) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
        let (n, cin, h, w) = x.dim();
        let (out_ch, in_ch, k, _) = self.weight.dim();
        let (col, oh, ow) = self.im2col(x);
        let gy_perm = grad_y.view().permuted_axes([1, 0, 2, 3]);
        let gy2 = Array2::from_shape_vec(
            (out_ch, n * oh * ow),
            gy_perm.iter().copied().collect(),
        )
        .expect("shape");
        let grad_bias = gy2.sum_axis(Axis(1));
        let gw2 = gy2.dot(&col.t());
        let grad_weight = gw2
            .into_shape_with_order((out_ch, in_ch, k, k))
            .expect("shape");
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("contiguous weight");
        let gcol = w2.t().dot(&gy2); // [cin*k*k, n*oh*ow]
        let mut grad_x = Array4::<f32>::zeros((n, cin, h, w));
        let (s, p) = (self.stride, self.pad);
        for ni in 0..n {
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ci * k * k + ky * k + kx;
                        for oy in 0..oh {
                            let sy = (oy * s + ky) as isize - p as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let sx = (ox * s + kx) as isize - p as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                grad_x[(ni, ci, sy as usize, sx as usize)] +=
                                    gcol[(row, ni * oh * ow + oy * ow + ox)];
                            }
                        }
                    }
                }
            }
        }
        (grad_x, grad_weight, grad_bias)
    }
}

/// Fully connected layer, `weight: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn new_seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f32).sqrt();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| normal_sample(rng) * std);
        Linear {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        y
    }

    pub fn backward(
        &self,
        x: &Array2<f32>,
        grad_y: &Array2<f32>,
    ) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
        let grad_weight = grad_y.t().dot(x);
        let grad_bias = grad_y.sum_axis(Axis(0));
        let grad_x = grad_y.dot(&self.weight);
        (grad_x, grad_weight, grad_bias)
    }
}

pub fn leaky_relu4(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu4_backward(x: &Array4<f32>, grad_y: &Array4<f32>) -> Array4<f32> {
    let mut g = grad_y.clone();
    g.zip_mut_with(x, |gv, xv| {
        if *xv <= 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    });
    g
}

pub fn leaky_relu2(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu2_backward(x: &Array2<f32>, grad_y: &Array2<f32>) -> Array2<f32> {
    let mut g = grad_y.clone();
    g.zip_mut_with(x, |gv, xv| {
        if *xv <= 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    });
    g
}

/// Global average pooling `[N, C, h, w] -> [N, C]`.
pub fn gap(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array2::<f32>::zeros((n, c));
    let denom = (h * w) as f32;
    for ni in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for hy in 0..h {
                for wx in 0..w {
                    s += x[(ni, ci, hy, wx)];
                }
            }
            y[(ni, ci)] = s / denom;
        }
    }
    y
}

pub fn gap_backward(shape: (usize, usize, usize, usize), grad_y: &Array2<f32>) -> Array4<f32> {
    let (n, c, h, w) = shape;
    let denom = (h * w) as f32;
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| grad_y[(ni, ci)] / denom)
}

/// Box-Muller sample, two RNG draws per value.
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over a fixed-order parameter list. The list length and
    /// per-tensor sizes must not change between calls.
    pub fn step(&mut self, params: Vec<(&mut [f32], &[f32])>) {
        if self.m.is_empty() {
            for (p, _) in &params {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed shape");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (p, g)) in params.into_iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.len() {
                let grad = g[i] + self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad * grad;
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers flattened for checkpointing, in parameter order.
    pub fn state_tensors(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("m{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("v{i}"), v.clone()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central finite-difference check of a scalar function of a flat
    /// parameter slice. f32-level tolerances.
    fn fd_check(
        mut f: impl FnMut(&[f32]) -> f32,
        x0: &[f32],
        analytic: &[f32],
        step: f32,
        rtol: f32,
    ) {
        let mut x = x0.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + step;
            let fp = f(&x);
            x[i] = orig - step;
            let fm = f(&x);
            x[i] = orig;
            let num = (fp - fm) / (2.0 * step);
            let denom = num.abs().max(analytic[i].abs()).max(1e-2);
            assert!(
                (num - analytic[i]).abs() / denom < rtol,
                "grad mismatch at {i}: numeric {num} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv_shapes() {
        let mut r = rng(0);
        let conv = Conv2d::new_seeded(3, 8, 3, 2, 1, &mut r);
        let x = Array4::<f32>::zeros((2, 3, 64, 64));
        let y = conv.forward(&x);
        assert_eq!(y.dim(), (2, 8, 32, 32));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(7);
        let conv = Conv2d::new_seeded(2, 3, 3, 2, 1, &mut r);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| normal_sample(&mut r) * 0.5);
        // Random fixed cotangent; loss = <gy, conv(x)>.
        let gy_shape = conv.forward(&x).dim();
        let gy = Array4::from_shape_fn(gy_shape, |_| normal_sample(&mut r) * 0.5);
        let (gx, gw, gb) = conv.backward(&x, &gy);

        let loss_for_x = |xs: &[f32]| {
            let xa = Array4::from_shape_vec(x.dim(), xs.to_vec()).unwrap();
            (&conv.forward(&xa) * &gy).sum()
        };
        fd_check(
            loss_for_x,
            x.as_slice().unwrap(),
            gx.as_slice().unwrap(),
            1e-2,
            2e-2,
        );

        let loss_for_w = |ws: &[f32]| {
            let mut c = conv.clone();
            c.weight = Array4::from_shape_vec(conv.weight.dim(), ws.to_vec()).unwrap();
            (&c.forward(&x) * &gy).sum()
        };
        fd_check(
            loss_for_w,
            conv.weight.as_slice().unwrap(),
            gw.as_slice().unwrap(),
            1e-2,
            2e-2,
        );

        let loss_for_b = |bs: &[f32]| {
            let mut c = conv.clone();
            c.bias = Array1::from_vec(bs.to_vec());
            (&c.forward(&x) * &gy).sum()
        };
        fd_check(
            loss_for_b,
            conv.bias.as_slice().unwrap(),
            gb.as_slice().unwrap(),
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng(9);
        let lin = Linear::new_seeded(5, 3, &mut r);
        let x = Array2::from_shape_fn((4, 5), |_| normal_sample(&mut r) * 0.5);
        let gy = Array2::from_shape_fn((4, 3), |_| normal_sample(&mut r) * 0.5);
        let (gx, gw, gb) = lin.backward(&x, &gy);

        fd_check(
            |xs| {
                let xa = Array2::from_shape_vec(x.dim(), xs.to_vec()).unwrap();
                (&lin.forward(&xa) * &gy).sum()
            },
            x.as_slice().unwrap(),
            gx.as_slice().unwrap(),
            1e-2,
            2e-2,
        );
        fd_check(
            |ws| {
                let mut l = lin.clone();
                l.weight = Array2::from_shape_vec(lin.weight.dim(), ws.to_vec()).unwrap();
                (&l.forward(&x) * &gy).sum()
            },
            lin.weight.as_slice().unwrap(),
            gw.as_slice().unwrap(),
            1e-2,
            2e-2,
        );
        fd_check(
            |bs| {
                let mut l = lin.clone();
                l.bias = Array1::from_vec(bs.to_vec());
                (&l.forward(&x) * &gy).sum()
            },
            lin.bias.as_slice().unwrap(),
            gb.as_slice().unwrap(),
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn gap_is_channel_mean() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, h, w)| (c * 4 + h * 2 + w) as f32);
        let y = gap(&x);
        assert_eq!(y[(0, 0)], 1.5);
        assert_eq!(y[(0, 1)], 5.5);
    }

    #[test]
    fn leaky_relu_roundtrip_gradient() {
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
        let gy = Array4::from_elem((1, 1, 1, 4), 1.0);
        let gx = leaky_relu4_backward(&x, &gy);
        assert_eq!(
            gx.as_slice().unwrap(),
            &[LEAKY_SLOPE, LEAKY_SLOPE, 1.0, 1.0]
        );
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let mut opt = Adam::new(0.1, 0.0);
        let mut p = vec![5.0f32, -3.0];
        for _ in 0..200 {
            let g: Vec<f32> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(vec![(p.as_mut_slice(), g.as_slice())]);
        }
        assert!(p.iter().all(|v| v.abs() < 0.1), "p = {p:?}");
    }
}
