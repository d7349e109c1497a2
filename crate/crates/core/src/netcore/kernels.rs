//! Layer kernels, generic over the scalar type. Dead channels are skipped;
//! their outputs stay exactly zero and their parameter gradients stay zero.

use super::{ConvDesc, Geometry, BN_EPS};
use crate::tensor::{Scalar, Tensor};

/// Valid output-column range `[lo, hi)` for kernel offset `k`.
#[inline]
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < input
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k { ((input + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Images per im2col chunk: enough columns to amortize the loop overhead
/// on small planes without materializing the whole batch on large ones.
fn chunk_len(n: usize, positions: usize) -> usize {
    (1024 / positions.max(1)).clamp(1, n.max(1))
}

/// Patch matrix of images `n0..n1` over the alive inputs: row
/// `(i, ky, kx)`, column `(image, oy, ox)`, zero where padding is read.
fn im2col<T: Scalar>(x: &Tensor<T>, d: &ConvDesc, g: Geometry, alive_in: &[usize], n0: usize, n1: usize) -> Vec<T> {
    let (k, s, p) = (d.kernel, d.stride, d.padding);
    let pos = g.out_h * g.out_w;
    let width = (n1 - n0) * pos;
    let mut cols = vec![T::zero(); alive_in.len() * k * k * width];
    for (ri, &i) in alive_in.iter().enumerate() {
        for ky in 0..k {
            let (ylo, yhi) = valid_range(g.out_h, g.in_h, ky, s, p);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(g.out_w, g.in_w, kx, s, p);
                let row = &mut cols[((ri * k + ky) * k + kx) * width..][..width];
                for n in n0..n1 {
                    let inp = x.plane(n, i);
                    let dst = &mut row[(n - n0) * pos..][..pos];
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - p;
                        for ox in xlo..xhi {
                            dst[oy * g.out_w + ox] = inp[iy * g.in_w + ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn alive_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDesc,
    g: Geometry,
    in_alive: &[bool],
    out_alive: &[bool],
) -> Tensor<T> {
    let kk = d.kernel * d.kernel;
    let pos = g.out_h * g.out_w;
    let alive_in = alive_indices(in_alive);
    let mut z = Tensor::zeros([x.n(), d.out_channels, g.out_h, g.out_w]);
    let chunk = chunk_len(x.n(), pos);
    let mut acc = Vec::new();
    for n0 in (0..x.n()).step_by(chunk) {
        let n1 = (n0 + chunk).min(x.n());
        let width = (n1 - n0) * pos;
        let cols = im2col(x, d, g, &alive_in, n0, n1);
        for o in (0..d.out_channels).filter(|&o| out_alive[o]) {
            acc.clear();
            acc.resize(width, bias.map_or(T::zero(), |b| b[o]));
            for (ri, &i) in alive_in.iter().enumerate() {
                let wrow = &w[(o * d.in_channels + i) * kk..][..kk];
                for (t, &wv) in wrow.iter().enumerate() {
                    let col = &cols[(ri * kk + t) * width..][..width];
                    for (a, &c) in acc.iter_mut().zip(col) {
                        *a += wv * c;
                    }
                }
            }
            for n in n0..n1 {
                z.plane_mut(n, o).copy_from_slice(&acc[(n - n0) * pos..][..pos]);
            }
        }
    }
    z
}

/// Accumulates weight/bias gradients into `dw`/`db`; returns the input
/// gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dz: &Tensor<T>,
    d: &ConvDesc,
    g: Geometry,
    in_alive: &[bool],
    out_alive: &[bool],
    dw: &mut [T],
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (k, s, p) = (d.kernel, d.stride, d.padding);
    let kk = k * k;
    let pos = g.out_h * g.out_w;
    let alive_in = alive_indices(in_alive);
    let alive_out = alive_indices(out_alive);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut db = db;
    let chunk = chunk_len(x.n(), pos);
    for n0 in (0..x.n()).step_by(chunk) {
        let n1 = (n0 + chunk).min(x.n());
        let width = (n1 - n0) * pos;
        let cols = im2col(x, d, g, &alive_in, n0, n1);
        let mut grads = vec![T::zero(); alive_out.len() * width];
        for (oi, &o) in alive_out.iter().enumerate() {
            let gr = &mut grads[oi * width..][..width];
            for n in n0..n1 {
                gr[(n - n0) * pos..][..pos].copy_from_slice(dz.plane(n, o));
            }
            if let Some(db) = db.as_deref_mut() {
                db[o] += gr.iter().copied().sum::<T>();
            }
            for (ri, &i) in alive_in.iter().enumerate() {
                for t in 0..kk {
                    let col = &cols[(ri * kk + t) * width..][..width];
                    dw[(o * d.in_channels + i) * kk + t] += gr.iter().zip(col).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        let Some(dx) = dx.as_mut() else { continue };
        let mut dcol = vec![T::zero(); width];
        for &i in &alive_in {
            for ky in 0..k {
                let (ylo, yhi) = valid_range(g.out_h, g.in_h, ky, s, p);
                for kx in 0..k {
                    let (xlo, xhi) = valid_range(g.out_w, g.in_w, kx, s, p);
                    let t = ky * k + kx;
                    dcol.fill(T::zero());
                    for (oi, &o) in alive_out.iter().enumerate() {
                        let wv = w[(o * d.in_channels + i) * kk + t];
                        for (a, &gv) in dcol.iter_mut().zip(&grads[oi * width..][..width]) {
                            *a += wv * gv;
                        }
                    }
                    for n in n0..n1 {
                        let src = &dcol[(n - n0) * pos..][..pos];
                        let plane = dx.plane_mut(n, i);
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            for ox in xlo..xhi {
                                plane[iy * g.in_w + ox * s + kx - p] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache<T> {
    pub xhat: Tensor<T>,
    /// 1/sqrt(var + eps) per channel, batch or running variance by mode.
    pub inv_std: Vec<T>,
    pub train: bool,
    pub batch_mean: Option<Vec<f64>>,
    /// Unbiased batch variance, for the running estimate.
    pub batch_var: Option<Vec<f64>>,
}

pub(crate) fn bn_forward<T: Scalar>(
    z: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    alive: &[bool],
    running: Option<(&[f64], &[f64])>,
) -> (Tensor<T>, BnCache<T>) {
    let (nb, c, hw) = (z.n(), z.c(), z.plane_len());
    let m = (nb * hw) as f64;
    let mut y = Tensor::zeros(z.shape());
    let mut xhat = Tensor::zeros(z.shape());
    let mut inv_std = vec![T::zero(); c];
    let train = running.is_none();
    let mut bmean = vec![0.0; c];
    let mut bvar = vec![0.0; c];
    for ch in 0..c {
        if !alive[ch] {
            continue;
        }
        let (mean, istd) = match running {
            None => {
                let mut sum = T::zero();
                for n in 0..nb {
                    sum += z.plane(n, ch).iter().copied().sum::<T>();
                }
                let mean = sum.scale(1.0 / m);
                let mut sq = T::zero();
                for n in 0..nb {
                    for &v in z.plane(n, ch) {
                        let d = v - mean;
                        sq += d * d;
                    }
                }
                let var = sq.scale(1.0 / m);
                bmean[ch] = mean.re();
                bvar[ch] = if m > 1.0 { var.re() * m / (m - 1.0) } else { var.re() };
                (mean, (var + T::from_f64(BN_EPS)).sqrt())
            }
            Some((rm, rv)) => (T::from_f64(rm[ch]), T::from_f64((rv[ch] + BN_EPS).sqrt())),
        };
        let istd = T::one() / istd;
        inv_std[ch] = istd;
        for n in 0..nb {
            let zp = z.plane(n, ch);
            let xp = xhat.plane_mut(n, ch);
            for (xv, &zv) in xp.iter_mut().zip(zp) {
                *xv = (zv - mean) * istd;
            }
            let yp = y.plane_mut(n, ch);
            for (yv, &xv) in yp.iter_mut().zip(xhat.plane(n, ch)) {
                *yv = gamma[ch] * xv + beta[ch];
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        train,
        batch_mean: train.then_some(bmean),
        batch_var: train.then_some(bvar),
    };
    (y, cache)
}

pub(crate) fn bn_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    alive: &[bool],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let (nb, c, hw) = (dy.n(), dy.c(), dy.plane_len());
    let m = (nb * hw) as f64;
    let mut dz = Tensor::zeros(dy.shape());
    for ch in 0..c {
        if !alive[ch] {
            continue;
        }
        let mut sum_dy = T::zero();
        let mut sum_dyx = T::zero();
        for n in 0..nb {
            for (&g, &x) in dy.plane(n, ch).iter().zip(cache.xhat.plane(n, ch)) {
                sum_dy += g;
                sum_dyx += g * x;
            }
        }
        dgamma[ch] += sum_dyx;
        dbeta[ch] += sum_dy;
        let k = gamma[ch] * cache.inv_std[ch];
        for n in 0..nb {
            let (g, x) = (dy.plane(n, ch), cache.xhat.plane(n, ch));
            let out = dz.plane_mut(n, ch);
            if cache.train {
                let mean_dy = sum_dy.scale(1.0 / m);
                let mean_dyx = sum_dyx.scale(1.0 / m);
                for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(x) {
                    *o = k * (gv - mean_dy - xv * mean_dyx);
                }
            } else {
                for (o, &gv) in out.iter_mut().zip(g) {
                    *o = k * gv;
                }
            }
        }
    }
    dz
}

pub(crate) fn relu<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if v.re() <= 0.0 {
            *v = T::zero();
        }
    }
}

/// Zero the gradient wherever the activation output was clipped.
pub(crate) fn relu_backward<T: Scalar>(dy: &mut Tensor<T>, out: &Tensor<T>) {
    for (g, o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o.re() <= 0.0 {
            *g = T::zero();
        }
    }
}

pub(crate) fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let inv = 1.0 / x.plane_len() as f64;
    let mut out = Tensor::zeros([x.n(), x.c(), 1, 1]);
    for n in 0..x.n() {
        for c in 0..x.c() {
            out.data_mut()[n * x.c() + c] = x.plane(n, c).iter().copied().sum::<T>().scale(inv);
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape);
    let inv = 1.0 / (shape[2] * shape[3]) as f64;
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            let g = dy.data()[n * shape[1] + c].scale(inv);
            dx.plane_mut(n, c).fill(g);
        }
    }
    dx
}

/// `x`: n×in features; `w`: classes×in row-major.
pub(crate) fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T], in_alive: &[bool], classes: usize) -> Tensor<T> {
    let (n, f) = (x.n(), x.c());
    let mut out = Tensor::zeros([n, classes, 1, 1]);
    for s in 0..n {
        let row = &x.data()[s * f..(s + 1) * f];
        for k in 0..classes {
            let mut acc = b[k];
            let wr = &w[k * f..(k + 1) * f];
            for i in 0..f {
                if in_alive[i] {
                    acc += wr[i] * row[i];
                }
            }
            out.data_mut()[s * classes + k] = acc;
        }
    }
    out
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    in_alive: &[bool],
    dw: &mut [T],
    db: &mut [T],
) -> Tensor<T> {
    let (n, f, classes) = (x.n(), x.c(), dy.c());
    let mut dx = Tensor::zeros(x.shape());
    for s in 0..n {
        let row = &x.data()[s * f..(s + 1) * f];
        for k in 0..classes {
            let g = dy.data()[s * classes + k];
            db[k] += g;
            for i in 0..f {
                if in_alive[i] {
                    dw[k * f + i] += g * row[i];
                    dx.data_mut()[s * f + i] += g * w[k * f + i];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(cin: usize, cout: usize, k: usize, s: usize, p: usize) -> ConvDesc {
        ConvDesc {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: p,
            batch_norm: false,
            relu: false,
            group: 0,
            in_group: None,
        }
    }

    /// Direct definition of a padded strided correlation.
    fn naive(x: &Tensor, w: &[f64], d: &ConvDesc, oh: usize, ow: usize) -> Tensor {
        let mut z = Tensor::zeros([x.n(), d.out_channels, oh, ow]);
        for n in 0..x.n() {
            for o in 0..d.out_channels {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..d.in_channels {
                            for ky in 0..d.kernel {
                                for kx in 0..d.kernel {
                                    let iy = (y * d.stride + ky) as isize - d.padding as isize;
                                    let ix = (xx * d.stride + kx) as isize - d.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h() && (ix as usize) < x.w() {
                                        acc += w[((o * d.in_channels + i) * d.kernel + ky) * d.kernel + kx]
                                            * x.plane(n, i)[iy as usize * x.w() + ix as usize];
                                    }
                                }
                            }
                        }
                        z.plane_mut(n, o)[y * ow + xx] = acc;
                    }
                }
            }
        }
        z
    }

    #[test]
    fn conv_matches_direct_definition() {
        for &(k, s, p, hw) in &[(3, 1, 1, 5), (3, 2, 1, 6), (1, 2, 0, 5), (3, 2, 1, 3), (3, 1, 0, 4)] {
            let d = desc(2, 3, k, s, p);
            let x = Tensor::from_vec([2, 2, hw, hw], (0..2 * 2 * hw * hw).map(|v| (v as f64 * 0.37).sin()).collect());
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|v| (v as f64 * 0.91).cos()).collect();
            let oh = d.out_size(hw);
            let g = Geometry { in_h: hw, in_w: hw, out_h: oh, out_w: oh };
            let z = conv_forward(&x, &w, None, &d, g, &[true; 2], &[true; 3]);
            assert!(z.max_abs_diff(&naive(&x, &w, &d, oh, oh)) < 1e-12, "k{k} s{s} p{p}");
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <conv(x), dz> = <x, conv^T(dz)> and = <w, dW>
        let d = desc(2, 3, 3, 2, 1);
        let hw = 5;
        let oh = d.out_size(hw);
        let g = Geometry { in_h: hw, in_w: hw, out_h: oh, out_w: oh };
        let x = Tensor::from_vec([1, 2, hw, hw], (0..50).map(|v| (v as f64 * 0.3).sin()).collect());
        let w: Vec<f64> = (0..54).map(|v| (v as f64 * 0.7).cos()).collect();
        let dz = Tensor::from_vec([1, 3, oh, oh], (0..3 * oh * oh).map(|v| (v as f64 * 1.3).sin()).collect());
        let z = conv_forward(&x, &w, None, &d, g, &[true; 2], &[true; 3]);
        let mut dw = vec![0.0; 54];
        let dx = conv_backward(&x, &w, &dz, &d, g, &[true; 2], &[true; 3], &mut dw, None, true).unwrap();
        let lhs: f64 = z.data().iter().zip(dz.data()).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }
}
