//! Minimal CPU building blocks for small convolutional networks.
//!
//! Parameters live in one flat `f64` buffer ([`ParamSet`]); layers hold offsets into
//! it. Every layer has an explicit forward pass that returns what its backward pass
//! needs, so gradients are exact up to floating-point rounding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::gaussian;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named parameter arrays backed by a single contiguous buffer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> usize {
        let offset = self.values.len();
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.values.extend(values);
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            offset,
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Round every value to the nearest `f32`, the precision checkpoints store.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

/// Channel-planar feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Fmap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Stack channels of `self` followed by `other`.
    pub fn concat(&self, other: &Fmap) -> Fmap {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Fmap::from_data(self.c + other.c, self.h, self.w, data)
    }

    /// Split channels at `first` (inverse of [`Fmap::concat`]).
    pub fn split(&self, first: usize) -> (Fmap, Fmap) {
        let n = first * self.plane();
        (
            Fmap::from_data(first, self.h, self.w, self.data[..n].to_vec()),
            Fmap::from_data(self.c - first, self.h, self.w, self.data[n..].to_vec()),
        )
    }

    pub fn add_assign(&mut self, other: &Fmap) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = alpha * A B + beta * C` with arbitrary strides (row-major when `cs == 1`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A too small");
    assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B too small");
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C too small");
    // SAFETY: the asserts above bound every element the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// 3x3 convolution, zero padding 1, stride 1 or 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv3x3 {
    pub fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, stride: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * 9) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let w = (0..cout * cin * 9).map(|_| std * gaussian(rng)).collect();
        let weight = params.push(format!("{name}.weight"), vec![cout, cin, 3, 3], w);
        let bias = params.push(format!("{name}.bias"), vec![cout], vec![0.0; cout]);
        Self {
            cin,
            cout,
            stride,
            weight,
            bias,
        }
    }

    fn k(&self) -> usize {
        self.cin * 9
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn im2col(&self, x: &Fmap) -> Vec<f64> {
        let (oh, ow) = self.out_size(x.h, x.w);
        let p = oh * ow;
        let mut col = vec![0.0; self.k() * p];
        for ci in 0..self.cin {
            let plane = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut col[((ci * 3 + ky) * 3 + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        let dst = &mut row[oy * ow..][..ow];
                        if self.stride == 1 {
                            // ix = ox + kx - 1
                            let (lo, hi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { ow - 1 } else { ow });
                            for ox in lo..hi {
                                dst[ox] = src[ox + kx - 1];
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - 1;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize) -> Fmap {
        let (oh, ow) = self.out_size(h, w);
        let p = oh * ow;
        let mut dx = Fmap::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &col[((ci * 3 + ky) * 3 + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * ow..][..ow];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the unfolded input needed by [`Conv3x3::backward`].
    pub fn forward(&self, params: &[f64], x: &Fmap) -> (Fmap, Vec<f64>) {
        debug_assert_eq!(x.c, self.cin);
        let (oh, ow) = self.out_size(x.h, x.w);
        let p = oh * ow;
        let col = self.im2col(x);
        let mut out = Fmap::zeros(self.cout, oh, ow);
        for co in 0..self.cout {
            let b = params[self.bias + co];
            out.data[co * p..(co + 1) * p].fill(b);
        }
        let w = &params[self.weight..self.weight + self.cout * self.k()];
        gemm(self.cout, self.k(), p, 1.0, w, (self.k(), 1), &col, (p, 1), 1.0, &mut out.data, (p, 1));
        (out, col)
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns the
    /// input gradient (when `need_dx`).
    pub fn backward(
        &self,
        params: &[f64],
        col: &[f64],
        in_hw: (usize, usize),
        dout: &Fmap,
        grads: Option<&mut [f64]>,
        need_dx: bool,
    ) -> Option<Fmap> {
        let p = dout.plane();
        let k = self.k();
        if let Some(g) = grads {
            for co in 0..self.cout {
                g[self.bias + co] += dout.data[co * p..(co + 1) * p].iter().sum::<f64>();
            }
            let gw = &mut g[self.weight..self.weight + self.cout * k];
            // dW += dY col^T
            gemm(self.cout, p, k, 1.0, &dout.data, (p, 1), col, (1, p), 1.0, gw, (k, 1));
        }
        if !need_dx {
            return None;
        }
        let w = &params[self.weight..self.weight + self.cout * k];
        let mut dcol = vec![0.0; k * p];
        // dcol = W^T dY
        gemm(k, self.cout, p, 1.0, w, (1, k), &dout.data, (p, 1), 0.0, &mut dcol, (p, 1));
        Some(self.col2im(&dcol, in_hw.0, in_hw.1))
    }
}

/// Dense layer `y = W x + b` with `W` stored `nout x nin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub nin: usize,
    pub nout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, nin: usize, nout: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = gain * (1.0 / nin as f64).sqrt();
        let w = (0..nin * nout).map(|_| std * gaussian(rng)).collect();
        let weight = params.push(format!("{name}.weight"), vec![nout, nin], w);
        let bias = params.push(format!("{name}.bias"), vec![nout], vec![0.0; nout]);
        Self {
            nin,
            nout,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.nout)
            .map(|o| {
                let row = &params[self.weight + o * self.nin..][..self.nin];
                params[self.bias + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: Option<&mut [f64]>) -> Vec<f64> {
        if let Some(g) = grads {
            for (o, d) in dy.iter().enumerate() {
                g[self.bias + o] += d;
                let row = &mut g[self.weight + o * self.nin..][..self.nin];
                for (gw, v) in row.iter_mut().zip(x) {
                    *gw += d * v;
                }
            }
        }
        let mut dx = vec![0.0; self.nin];
        for (o, d) in dy.iter().enumerate() {
            let row = &params[self.weight + o * self.nin..][..self.nin];
            for (g, w) in dx.iter_mut().zip(row) {
                *g += d * w;
            }
        }
        dx
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its pre-activation input.
pub fn silu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dy)
        .map(|(&x, &d)| {
            let s = sigmoid(x);
            d * s * (1.0 + x * (1.0 - s))
        })
        .collect()
}

pub fn silu_fmap(x: &Fmap) -> Fmap {
    Fmap::from_data(x.c, x.h, x.w, silu(&x.data))
}

pub fn silu_fmap_backward(pre: &Fmap, dy: &Fmap) -> Fmap {
    Fmap::from_data(pre.c, pre.h, pre.w, silu_backward(&pre.data, &dy.data))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Fmap) -> Fmap {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Fmap::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            let src = &x.data[(c * x.h + y / 2) * x.w..][..x.w];
            let dst = &mut out.data[(c * h + y) * w..][..w];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Fmap) -> Fmap {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Fmap::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            let src = &dy.data[(c * dy.h + y) * dy.w..][..dy.w];
            let dst = &mut dx.data[(c * h + y / 2) * w..][..w];
            for (xx, s) in src.iter().enumerate() {
                dst[xx / 2] += s;
            }
        }
    }
    dx
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Direct 7-loop convolution used as the reference for the im2col path.
    fn conv_reference(conv: &Conv3x3, params: &[f64], x: &Fmap) -> Fmap {
        let (oh, ow) = conv.out_size(x.h, x.w);
        let mut out = Fmap::zeros(conv.cout, oh, ow);
        for co in 0..conv.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = params[conv.bias + co];
                    for ci in 0..conv.cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * conv.stride + ky) as isize - 1;
                                let ix = (ox * conv.stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let w = params[conv.weight + ((co * conv.cin + ci) * 3 + ky) * 3 + kx];
                                acc += w * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random_fmap(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Fmap {
        Fmap::from_data(c, h, w, (0..c * h * w).map(|_| gaussian(rng)).collect())
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = RngStream::root(11).rng();
        for stride in [1, 2] {
            let mut ps = ParamSet::default();
            let conv = Conv3x3::new(&mut ps, "c", 3, 5, stride, 1.0, &mut rng);
            for b in ps.entry("c.bias").unwrap().range() {
                ps.values[b] = gaussian(&mut rng);
            }
            let x = random_fmap(3, 7, 6, &mut rng);
            let (y, _) = conv.forward(&ps.values, &x);
            let r = conv_reference(&conv, &ps.values, &x);
            assert_eq!((y.c, y.h, y.w), (r.c, r.h, r.w));
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = RngStream::root(12).rng();
        for stride in [1, 2] {
            let mut ps = ParamSet::default();
            let conv = Conv3x3::new(&mut ps, "c", 2, 3, stride, 1.0, &mut rng);
            let x = random_fmap(2, 5, 5, &mut rng);
            let (y, col) = conv.forward(&ps.values, &x);
            let probe = random_fmap(y.c, y.h, y.w, &mut rng);
            // loss = <probe, y>
            let loss = |p: &[f64], x: &Fmap| -> f64 {
                let (y, _) = conv.forward(p, x);
                y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
            };
            let mut g = vec![0.0; ps.len()];
            let dx = conv.backward(&ps.values, &col, (5, 5), &probe, Some(&mut g), true).unwrap();
            let h = 1e-6;
            for i in 0..ps.len() {
                let mut p = ps.values.clone();
                p[i] += h;
                let up = loss(&p, &x);
                p[i] -= 2.0 * h;
                let down = loss(&p, &x);
                assert!(((up - down) / (2.0 * h) - g[i]).abs() < 1e-6);
            }
            for i in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[i] += h;
                let up = loss(&ps.values, &xp);
                xp.data[i] -= 2.0 * h;
                let down = loss(&ps.values, &xp);
                assert!(((up - down) / (2.0 * h) - dx.data[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_adjoint() {
        let mut rng = RngStream::root(13).rng();
        let x = random_fmap(2, 3, 4, &mut rng);
        let dy = random_fmap(2, 6, 8, &mut rng);
        let lhs: f64 = upsample2(&x).data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2_backward(&dy).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative() {
        let xs = [-3.0, -0.5, 0.0, 0.7, 4.0];
        let d = silu_backward(&xs, &[1.0; 5]);
        for (x, g) in xs.iter().zip(d) {
            let h = 1e-6;
            let fd = (silu(&[x + h])[0] - silu(&[x - h])[0]) / (2.0 * h);
            assert!((fd - g).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
