//! Minimal dense/conv building blocks with hand-written gradients.
//!
//! Tensors are flat `f32` slices in row-major order; feature maps are `[C, H, W]`
//! per sample with H the mel axis and W the time axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C = op(A) · op(B) + beta · C` for row-major operands, where `op(A)` is
/// `m×k` and `op(B)` is `k×n`. A transposed operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every element addressed by these strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Convolution with `kernel / 2` zero padding on each side.
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, kernel: [usize; 2], stride: [usize; 2]) -> Result<Self> {
        let [kh, kw] = kernel;
        let [sh, sw] = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::param("kernel and stride must be positive"));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(format!("input {h}x{w} smaller than kernel {kh}x{kw}")));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        })
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.p()
    }
}

pub fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        *o = if iw >= 0 && iw < g.w as isize { src[iw as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients into `dx` (not cleared).
pub fn col2im(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let base = ci * g.h * g.w + ih as usize * g.w;
                    for ow in 0..g.wo {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dx[base + iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

const LEAKY_SLOPE: f32 = 0.01;

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative expressed through the activation's output (sign is preserved).
    pub fn grad_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Relu => (y > 0.0) as u8 as f32,
            Activation::LeakyRelu => {
                if y > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors packed into one flat buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorStore {
    pub entries: Vec<TensorEntry>,
    pub data: Vec<f32>,
}

impl TensorStore {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: impl FnMut(usize) -> f32) -> usize {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        self.data.extend((0..len).map(init));
        self.entries.push(TensorEntry {
            name: name.into(),
            shape,
            offset,
        });
        self.entries.len() - 1
    }

    pub fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let e = &self.entries[idx];
        e.offset..e.offset + e.len()
    }

    pub fn get(&self, idx: usize) -> &[f32] {
        &self.data[self.range(idx)]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut [f32] {
        let r = self.range(idx);
        &mut self.data[r]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

pub fn uniform_init<R: Rng>(rng: &mut R, bound: f32) -> impl FnMut(usize) -> f32 + '_ {
    move |_| rng.gen_range(-bound..=bound)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let step = c.lr * bc2.sqrt() / bc1;
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= step * *m / (v.sqrt() + c.eps * bc2.sqrt());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
        let mut y = vec![0.0f32; g.out_len()];
        for co in 0..g.cout {
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                                let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < g.h && (iw as usize) < g.w {
                                    acc += x[ci * g.h * g.w + ih as usize * g.w + iw as usize]
                                        * w[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                    }
                    y[co * g.p() + oh * g.wo + ow] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let g = ConvGeom::new(2, 7, 9, 3, [3, 3], [2, 2]).unwrap();
        assert_eq!((g.ho, g.wo), (4, 5));
        let x: Vec<f32> = (0..g.in_len()).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
        let w: Vec<f32> = (0..g.cout * g.k()).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2).collect();
        let mut cols = vec![0.0; g.k() * g.p()];
        im2col(&g, &x, &mut cols);
        let mut y = vec![0.0; g.out_len()];
        gemm(g.cout, g.k(), g.p(), &w, false, &cols, false, &mut y, 0.0);
        for (a, b) in y.iter().zip(naive_conv(&g, &x, &w)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 6, 1, [3, 3], [2, 1]).unwrap();
        let x: Vec<f32> = (0..g.in_len()).map(|i| (i as f32 * 0.7).sin()).collect();
        let c: Vec<f32> = (0..g.k() * g.p()).map(|i| (i as f32 * 0.3).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f32 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im(&g, &c, &mut dx);
        let rhs: f32 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn gemm_transpose_flags() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0f32, -2.0];
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, 2);
        for _ in 0..2000 {
            let g: Vec<f32> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }
}
