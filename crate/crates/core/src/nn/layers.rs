//! NCHW kernels with hand-written backward passes. Per-sample work runs on
//! the rayon pool; every cross-sample reduction is summed in sample order so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    /// Square kernel with "same" padding.
    pub fn square(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { cin, cout, kh: k, kw: k, stride, ph: k / 2, pw: k / 2 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.ph - self.kh) / self.stride + 1, (w + 2 * self.pw - self.kw) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kh, self.kw]
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Output columns `ox` whose input column `ox*s + k - p` lies in `[0, w)`.
#[inline]
fn valid_range(k: usize, p: usize, s: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if w + p > k { (w + p - k).div_ceil(s).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, cols: &mut [T]) {
    let p = ho * wo;
    let s = g.stride;
    for c in 0..g.cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                let (lo, hi) = valid_range(kx, g.pw, s, w, wo);
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * s + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if s == 1 {
                        let start = lo + kx - g.pw;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            line[ox] = src[ox * s + kx - g.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, dx: &mut [T]) {
    let p = ho * wo;
    let s = g.stride;
    for c in 0..g.cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let src = &cols[row..row + p];
                let (lo, hi) = valid_range(kx, g.pw, s, w, wo);
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in lo..hi {
                        let ix = ox * s + kx - g.pw;
                        dst[ix] = dst[ix] + line[ox];
                    }
                }
            }
        }
    }
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected an NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Convolution without bias. `weight` is (cout, cin, kh, kw).
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], g: &ConvGeom) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    assert_eq!(c, g.cin, "conv input channels");
    let (ho, wo) = g.out_hw(h, w);
    let (p, ckk) = (ho * wo, g.fan_in());
    let mut y = Tensor::zeros(&[n, g.cout, ho, wo]);
    y.data_mut().par_chunks_mut(g.cout * p).zip(x.data().par_chunks(c * h * w)).for_each(|(yn, xn)| {
        if g.is_pointwise() {
            T::gemm(g.cout, ckk, p, weight, false, xn, false, yn, false);
        } else {
            let mut cols = vec![T::zero(); ckk * p];
            im2col(xn, h, w, g, ho, wo, &mut cols);
            T::gemm(g.cout, ckk, p, weight, false, &cols, false, yn, false);
        }
    });
    y
}

/// Returns (dx when requested, dweight).
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    g: &ConvGeom,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Vec<T>>) {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = g.out_hw(h, w);
    let (p, ckk) = (ho * wo, g.fan_in());
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xn = &x.data()[i * c * h * w..(i + 1) * c * h * w];
            let dyn_ = &dy.data()[i * g.cout * p..(i + 1) * g.cout * p];
            let cols_owned;
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else if need_dw {
                let mut buf = vec![T::zero(); ckk * p];
                im2col(xn, h, w, g, ho, wo, &mut buf);
                cols_owned = buf;
                &cols_owned
            } else {
                &[]
            };
            let mut dw = Vec::new();
            if need_dw {
                dw = vec![T::zero(); g.cout * ckk];
                T::gemm(g.cout, p, ckk, dyn_, false, cols, true, &mut dw, false);
            }
            let mut dx = Vec::new();
            if need_dx {
                dx = vec![T::zero(); c * h * w];
                if g.is_pointwise() {
                    T::gemm(ckk, g.cout, p, weight, true, dyn_, false, &mut dx, false);
                } else {
                    let mut dcols = vec![T::zero(); ckk * p];
                    T::gemm(ckk, g.cout, p, weight, true, dyn_, false, &mut dcols, false);
                    col2im(&dcols, h, w, g, ho, wo, &mut dx);
                }
            }
            (dw, dx)
        })
        .collect();

    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); g.cout * ckk];
        for (part, _) in &parts {
            for (a, &b) in acc.iter_mut().zip(part) {
                *a = *a + b;
            }
        }
        acc
    });
    let dx = need_dx.then(|| {
        let mut data = Vec::with_capacity(n * c * h * w);
        for (_, part) in &parts {
            data.extend_from_slice(part);
        }
        Tensor::from_vec(&[n, c, h, w], data)
    });
    (dx, dw)
}

/// Normalization statistics used by a forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Statistics came from the batch itself (training mode).
    pub batch_stats: bool,
}

/// Sum with eight interleaved accumulators so the loop vectorizes; the
/// combination order is fixed, so results are reproducible.
#[inline]
fn lane_sum<T: Scalar>(v: &[T], f: impl Fn(usize, T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = v.chunks_exact(8);
    let mut base = 0;
    for c in &mut chunks {
        for l in 0..8 {
            acc[l] = acc[l] + f(base + l, c[l]);
        }
        base += 8;
    }
    for (l, &x) in chunks.remainder().iter().enumerate() {
        acc[l] = acc[l] + f(base + l, x);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Per-channel (mean, biased variance). Each plane is summed in `T`; plane
/// sums are combined in f64.
fn channel_stats<T: Scalar>(z: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims4(z);
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (plane, v) in z.data().chunks(hw).enumerate() {
        mean[plane % c] += lane_sum(v, |_, x| x).to_f64().unwrap();
    }
    for mu in &mut mean {
        *mu /= m;
    }
    for (plane, v) in z.data().chunks(hw).enumerate() {
        let mu = T::lit(mean[plane % c]);
        var[plane % c] += lane_sum(v, |_, x| (x - mu) * (x - mu)).to_f64().unwrap();
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

/// Batch normalization followed by ReLU. With `running` set the given
/// (mean, var) are used; otherwise batch statistics are computed and
/// returned as (mean, biased var).
#[allow(clippy::type_complexity)]
pub fn bn_relu_forward<T: Scalar>(
    z: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
    eps: f64,
) -> (Tensor<T>, BnCache<T>, Option<(Vec<T>, Vec<T>)>) {
    let (n, c, h, w) = dims4(z);
    let hw = h * w;
    let (mean, var, stats) = match running {
        Some((m, v)) => (
            m.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>(),
            v.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>(),
            None,
        ),
        None => {
            let (m, v) = channel_stats(z);
            let stats = (m.iter().map(|&x| T::lit(x)).collect(), v.iter().map(|&x| T::lit(x)).collect());
            (m, v, Some(stats))
        }
    };
    let mean_t: Vec<T> = mean.iter().map(|&x| T::lit(x)).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = vec![T::zero(); z.len()];
    let mut y = Tensor::zeros(z.shape());
    xhat.par_chunks_mut(hw)
        .zip(y.data_mut().par_chunks_mut(hw))
        .zip(z.data().par_chunks(hw))
        .enumerate()
        .for_each(|(plane, ((xh, yy), zz))| {
            let ch = plane % c;
            let (mu, is, ga, be) = (mean_t[ch], inv_std[ch], gamma[ch], beta[ch]);
            for k in 0..hw {
                let v = (zz[k] - mu) * is;
                xh[k] = v;
                let u = ga * v + be;
                yy[k] = if u > T::zero() { u } else { T::zero() };
            }
        });
    debug_assert_eq!(n * c * hw, y.len());
    (y, BnCache { xhat, inv_std, batch_stats: running.is_none() }, stats)
}

/// Returns (dz, dgamma, dbeta).
pub fn bn_relu_backward<T: Scalar>(
    dy: &Tensor<T>,
    y: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dims4(dy);
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (plane, ((g, yy), xh)) in dy.data().chunks(hw).zip(y.data().chunks(hw)).zip(cache.xhat.chunks(hw)).enumerate() {
        let du = |k: usize, v: T| if yy[k] > T::zero() { v } else { T::zero() };
        let sb = lane_sum(g, du);
        let sg = lane_sum(g, |k, v| du(k, v) * xh[k]);
        dbeta[plane % c] += sb.to_f64().unwrap();
        dgamma[plane % c] += sg.to_f64().unwrap();
    }
    debug_assert_eq!(n * c * hw, dy.len());
    let dg_t: Vec<T> = dgamma.iter().map(|&v| T::lit(v)).collect();
    let db_t: Vec<T> = dbeta.iter().map(|&v| T::lit(v)).collect();
    let mut dz = Tensor::zeros(dy.shape());
    let m_t = T::lit(m);
    dz.data_mut().par_chunks_mut(hw).enumerate().for_each(|(plane, out)| {
        let ch = plane % c;
        let base = plane * hw;
        let scale = gamma[ch] * cache.inv_std[ch];
        let (yy, g, xh) = (&y.data()[base..base + hw], &dy.data()[base..base + hw], &cache.xhat[base..base + hw]);
        if cache.batch_stats {
            let (k2, k3) = (scale / m_t * db_t[ch], scale / m_t * dg_t[ch]);
            for k in 0..hw {
                let du = if yy[k] > T::zero() { g[k] } else { T::zero() };
                out[k] = scale * du - k2 - k3 * xh[k];
            }
        } else {
            for k in 0..hw {
                out[k] = if yy[k] > T::zero() { scale * g[k] } else { T::zero() };
            }
        }
    });
    (dz, dg_t, db_t)
}

/// 3x3 average pooling, stride 1, padding 1, padded taps excluded.
pub fn avg_pool3_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = dims4(x);
    let mut y = Tensor::zeros(x.shape());
    y.data_mut().par_chunks_mut(h * w).zip(x.data().par_chunks(h * w)).for_each(|(out, src)| {
        for oy in 0..h {
            let (y0, y1) = (oy.saturating_sub(1), (oy + 2).min(h));
            for ox in 0..w {
                let (x0, x1) = (ox.saturating_sub(1), (ox + 2).min(w));
                let mut s = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s = s + src[iy * w + ix];
                    }
                }
                out[oy * w + ox] = s / T::lit(((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    });
    y
}

pub fn avg_pool3_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = dims4(dy);
    let mut dx = Tensor::zeros(dy.shape());
    dx.data_mut().par_chunks_mut(h * w).zip(dy.data().par_chunks(h * w)).for_each(|(out, g)| {
        for oy in 0..h {
            let (y0, y1) = (oy.saturating_sub(1), (oy + 2).min(h));
            for ox in 0..w {
                let (x0, x1) = (ox.saturating_sub(1), (ox + 2).min(w));
                let share = g[oy * w + ox] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        out[iy * w + ix] = out[iy * w + ix] + share;
                    }
                }
            }
        }
    });
    dx
}

/// 3x3 max pooling, stride 2, padding 1. Also returns the in-plane index of
/// each selected input (first maximum in scan order).
pub fn max_pool3s2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    y.data_mut()
        .par_chunks_mut(ho * wo)
        .zip(arg.par_chunks_mut(ho * wo))
        .zip(x.data().par_chunks(h * w))
        .for_each(|((out, idx), src)| {
            for oy in 0..ho {
                let (y0, y1) = ((2 * oy).saturating_sub(1), (2 * oy + 2).min(h));
                for ox in 0..wo {
                    let (x0, x1) = ((2 * ox).saturating_sub(1), (2 * ox + 2).min(w));
                    let mut best = (y0 * w + x0, src[y0 * w + x0]);
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = src[iy * w + ix];
                            if v > best.1 {
                                best = (iy * w + ix, v);
                            }
                        }
                    }
                    out[oy * wo + ox] = best.1;
                    idx[oy * wo + ox] = best.0 as u32;
                }
            }
        });
    (y, arg)
}

pub fn max_pool3s2_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u32], in_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (_, _, ho, wo) = dims4(dy);
    let mut dx = Tensor::zeros(in_shape);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .zip(dy.data().par_chunks(ho * wo))
        .zip(arg.par_chunks(ho * wo))
        .for_each(|((out, g), idx)| {
            for k in 0..ho * wo {
                let i = idx[k] as usize;
                out[i] = out[i] + g[k];
            }
        });
    dx
}

/// Global average pooling (N, C, H, W) -> (N, C).
pub fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    let inv = T::lit(1.0 / (h * w) as f64);
    let data = x.data().chunks(h * w).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn gap_backward<T: Scalar>(d: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c) = (d.shape()[0], d.shape()[1]);
    let inv = T::lit(1.0 / (h * w) as f64);
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in d.data() {
        data.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::from_vec(&[n, c, h, w], data)
}

/// Concatenates NCHW tensors along channels.
pub fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    let (n, _, h, w) = dims4(&parts[0]);
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * total * h * w);
    for i in 0..n {
        for p in parts {
            let chunk = p.shape()[1] * h * w;
            data.extend_from_slice(&p.data()[i * chunk..(i + 1) * chunk]);
        }
    }
    Tensor::from_vec(&[n, total, h, w], data)
}

pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let (n, c, h, w) = dims4(x);
    assert_eq!(widths.iter().sum::<usize>(), c);
    let mut out: Vec<Vec<T>> = widths.iter().map(|&k| Vec::with_capacity(n * k * h * w)).collect();
    for i in 0..n {
        let mut off = i * c * h * w;
        for (buf, &k) in out.iter_mut().zip(widths) {
            buf.extend_from_slice(&x.data()[off..off + k * h * w]);
            off += k * h * w;
        }
    }
    out.into_iter().zip(widths).map(|(d, &k)| Tensor::from_vec(&[n, k, h, w], d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct-loop convolution.
    fn conv_naive(x: &Tensor<f64>, wt: &[f64], g: &ConvGeom) -> Tensor<f64> {
        let (n, c, h, w) = dims4(x);
        let (ho, wo) = g.out_hw(h, w);
        let mut y = Tensor::zeros(&[n, g.cout, ho, wo]);
        for i in 0..n {
            for o in 0..g.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += wt[((o * c + ci) * g.kh + ky) * g.kw + kx]
                                            * x.data()[((i * c + ci) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((i * g.cout + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        y
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::seed::rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn geoms() -> Vec<ConvGeom> {
        vec![
            ConvGeom::square(3, 4, 3, 1),
            ConvGeom::square(3, 4, 3, 2),
            ConvGeom::square(3, 2, 1, 1),
            ConvGeom::square(3, 2, 1, 2),
            ConvGeom { cin: 2, cout: 3, kh: 1, kw: 5, stride: 1, ph: 0, pw: 2 },
            ConvGeom { cin: 2, cout: 3, kh: 5, kw: 1, stride: 2, ph: 2, pw: 0 },
        ]
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, g) in geoms().iter().enumerate() {
            let x = random(&[2, g.cin, 7, 6], k as u64);
            let wt = random(&g.weight_shape(), 100 + k as u64);
            let fast = conv_forward(&x, wt.data(), g);
            let slow = conv_naive(&x, wt.data(), g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> is bilinear, so its gradients are conv_backward's outputs
        for (k, g) in geoms().iter().enumerate() {
            let x = random(&[2, g.cin, 7, 6], k as u64);
            let wt = random(&g.weight_shape(), 200 + k as u64);
            let y = conv_forward(&x, wt.data(), g);
            let dy = random(y.shape(), 300 + k as u64);
            let (dx, dw) = conv_backward(&x, wt.data(), g, &dy, true, true);
            let (dx, dw) = (dx.unwrap(), dw.unwrap());
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
            let f = |xx: &Tensor<f64>, ww: &[f64]| dot(&dy, &conv_naive(xx, ww, g));
            let base = f(&x, wt.data());
            let step = 1e-6;
            for idx in [0, x.len() / 3, x.len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += step;
                assert!(((f(&xp, wt.data()) - base) / step - dx.data()[idx]).abs() < 1e-6);
            }
            for idx in [0, dw.len() / 2, dw.len() - 1] {
                let mut wp = wt.data().to_vec();
                wp[idx] += step;
                assert!(((f(&x, &wp) - base) / step - dw[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bn_train_mode_normalizes() {
        let z = random(&[4, 3, 5, 5], 7);
        let (y, cache, stats) = bn_relu_forward(&z, &[1.0; 3], &[10.0; 3], None, 0.0);
        let (mean, var) = stats.unwrap();
        assert_eq!(mean.len(), 3);
        assert!(var.iter().all(|&v| v > 0.0));
        // a large beta keeps every unit in the linear region
        let xt = Tensor::from_vec(z.shape(), cache.xhat.clone());
        let (m, v) = channel_stats(&xt);
        for ch in 0..3 {
            assert!(m[ch].abs() < 1e-12);
            assert!((v[ch] - 1.0).abs() < 1e-9);
        }
        assert!(y.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        let z = random(&[3, 2, 4, 4], 8);
        let gamma = [1.3, 0.7];
        let beta = [0.1, -0.2];
        let dy = random(z.shape(), 9);
        let loss = |zz: &Tensor<f64>, g: &[f64], b: &[f64]| {
            let (y, _, _) = bn_relu_forward(zz, g, b, None, 1e-3);
            y.data().iter().zip(dy.data()).map(|(p, q)| p * q).sum::<f64>()
        };
        let (y, cache, _) = bn_relu_forward(&z, &gamma, &beta, None, 1e-3);
        let (dz, dg, db) = bn_relu_backward(&dy, &y, &cache, &gamma);
        let h = 1e-6;
        for idx in [0, 5, 17, 40, z.len() - 1] {
            let mut zp = z.clone();
            zp.data_mut()[idx] += h;
            let mut zm = z.clone();
            zm.data_mut()[idx] -= h;
            let num = (loss(&zp, &gamma, &beta) - loss(&zm, &gamma, &beta)) / (2.0 * h);
            assert!((num - dz.data()[idx]).abs() < 1e-6, "{num} vs {}", dz.data()[idx]);
        }
        let num_g = (loss(&z, &[gamma[0] + h, gamma[1]], &beta) - loss(&z, &[gamma[0] - h, gamma[1]], &beta)) / (2.0 * h);
        assert!((num_g - dg[0]).abs() < 1e-6);
        let num_b = (loss(&z, &gamma, &[beta[0], beta[1] + h]) - loss(&z, &gamma, &[beta[0], beta[1] - h])) / (2.0 * h);
        assert!((num_b - db[1]).abs() < 1e-6);
    }

    #[test]
    fn pools() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let a = avg_pool3_forward(&x);
        // corner averages its 2x2 neighbourhood
        assert_eq!(a.data()[0], (1.0 + 2.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(a.data()[4], 5.0);
        let da = avg_pool3_backward(&Tensor::filled(&[1, 1, 3, 3], 1.0));
        let total: f64 = da.data().iter().sum();
        assert!((total - 9.0).abs() < 1e-12);

        let (m, arg) = max_pool3s2_forward(&x);
        assert_eq!(m.shape(), &[1, 1, 2, 2]);
        assert_eq!(m.data(), &[5.0, 6.0, 8.0, 9.0]);
        let dm = max_pool3s2_backward(&Tensor::filled(&[1, 1, 2, 2], 1.0), &arg, x.shape());
        assert_eq!(dm.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_split_inverse() {
        let a = random(&[2, 1, 2, 2], 1);
        let b = random(&[2, 3, 2, 2], 2);
        let cat = concat_channels(&[a.clone(), b.clone()]);
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        let parts = split_channels(&cat, &[1, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn gap_round_trip_shapes() {
        let x = random(&[2, 3, 4, 5], 3);
        let g = gap_forward(&x);
        assert_eq!(g.shape(), &[2, 3]);
        let back = gap_backward(&Tensor::<f64>::filled(&[2, 3], 20.0), 4, 5);
        assert!(back.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
