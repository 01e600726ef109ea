//! Raw slice kernels behind the graph ops. Layout is NCHW throughout.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = (g.pad.saturating_sub(kx)).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold one sample into `[ci*k*k, ho*wo]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.ci {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (o, v) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into one sample.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.ci {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s_row = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(s_row) {
                        *d = *d + *v;
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and, when `keep_cols`, the
/// unfolded input of every sample for the backward pass.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let kr = g.cols_rows();
    let p = g.out_pixels();
    let in_len = g.ci * g.h * g.w;
    let out_len = g.co * p;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut all_cols = if keep_cols {
        vec![T::zero(); g.n * kr * p]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols {
        Vec::new()
    } else {
        vec![T::zero(); kr * p]
    };
    for n in 0..g.n {
        let cols: &mut [T] = if keep_cols {
            &mut all_cols[n * kr * p..(n + 1) * kr * p]
        } else {
            &mut scratch
        };
        im2col(&x[n * in_len..(n + 1) * in_len], g, cols);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for (co, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(b[co]);
        }
        T::gemm(
            g.co,
            kr,
            p,
            T::one(),
            w,
            kr as isize,
            1,
            cols,
            p as isize,
            1,
            T::one(),
            y,
            p as isize,
            1,
        );
    }
    (out, all_cols)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    dy: &[T],
    w: &[T],
    cols: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let kr = g.cols_rows();
    let p = g.out_pixels();
    let in_len = g.ci * g.h * g.w;
    let out_len = g.co * p;
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = need.1.then(|| vec![T::zero(); g.co * kr]);
    let mut db = need.2.then(|| vec![T::zero(); g.co]);
    let mut dcols = vec![T::zero(); if need.0 { kr * p } else { 0 }];
    for n in 0..g.n {
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, row) in dyn_.chunks_exact(p).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let c = &cols[n * kr * p..(n + 1) * kr * p];
            // dw[co, r] += sum_p dy[co, p] * cols[r, p]
            T::gemm(
                g.co,
                p,
                kr,
                T::one(),
                dyn_,
                p as isize,
                1,
                c,
                1,
                p as isize,
                T::one(),
                dw,
                kr as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[r, p] = sum_co w[co, r] * dy[co, p]
            T::gemm(
                kr,
                g.co,
                p,
                T::one(),
                w,
                1,
                kr as isize,
                dyn_,
                p as isize,
                1,
                T::zero(),
                &mut dcols,
                p as isize,
                1,
            );
            col2im(&dcols, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

pub(crate) struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalisation over `[n, c, hw]` with per-channel affine. The
/// cache is only filled when `keep` is set.
pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    keep: bool,
) -> (Vec<T>, GroupNormCache<T>) {
    let cg = c / groups;
    let glen = cg * hw;
    let eps = T::from_f64(GROUP_NORM_EPS);
    let mut xhat = if keep { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut rstd = vec![T::zero(); n * groups];
    let mut y = vec![T::zero(); x.len()];
    let inv = T::from_f64(1.0 / glen as f64);
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * hw;
            let seg = &x[start..start + glen];
            let mean = seg.iter().copied().sum::<T>() * inv;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
            let r = T::one() / (var + eps).sqrt();
            rstd[ni * groups + gi] = r;
            for k in 0..cg {
                let ch = gi * cg + k;
                let off = start + k * hw;
                let (gm, bt) = (gamma[ch], beta[ch]);
                let src = &x[off..off + hw];
                for (o, &v) in y[off..off + hw].iter_mut().zip(src) {
                    *o = (v - mean) * r * gm + bt;
                }
                if keep {
                    for (o, &v) in xhat[off..off + hw].iter_mut().zip(src) {
                        *o = (v - mean) * r;
                    }
                }
            }
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

pub(crate) fn group_norm_backward<T: Real>(
    dy: &[T],
    gamma: &[T],
    cache: &GroupNormCache<T>,
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let glen = cg * hw;
    let inv = T::from_f64(1.0 / glen as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * hw;
            let r = cache.rstd[ni * groups + gi];
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..glen {
                let ch = gi * cg + j / hw;
                let g = dy[start + j];
                let xh = cache.xhat[start + j];
                dgamma[ch] = dgamma[ch] + g * xh;
                dbeta[ch] = dbeta[ch] + g;
                let dxh = g * gamma[ch];
                sum_dxh = sum_dxh + dxh;
                sum_dxh_xh = sum_dxh_xh + dxh * xh;
            }
            let m1 = sum_dxh * inv;
            let m2 = sum_dxh_xh * inv;
            for j in 0..glen {
                let ch = gi * cg + j / hw;
                let xh = cache.xhat[start + j];
                let dxh = dy[start + j] * gamma[ch];
                dx[start + j] = r * (dxh - m1 - xh * m2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize, ci: usize, h: usize, w: usize, co: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
        ConvGeom {
            n,
            ci,
            h,
            w,
            co,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// Direct nested-loop convolution, independent of im2col/gemm.
    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.co * g.ho * g.wo];
        for n in 0..g.n {
            for co in 0..g.co {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = b[co];
                        for ci in 0..g.ci {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.ci + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.ci + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        out[((n * g.co + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let g = geom(2, 3, 7, 6, 4, k, stride, pad);
            let x: Vec<f64> = (0..g.n * g.ci * g.h * g.w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let w: Vec<f64> = (0..g.co * g.ci * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let b: Vec<f64> = (0..g.co).map(|i| i as f64 * 0.1).collect();
            let (y, _) = conv2d_forward(&x, &w, &b, &g, false);
            let expected = naive_conv(&x, &w, &b, &g);
            for (a, e) in y.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = geom(1, 2, 5, 5, 1, 3, 2, 1);
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..g.cols_rows() * g.out_pixels()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn group_norm_output_is_standardised() {
        let x: Vec<f64> = (0..2 * 4 * 9).map(|i| (i as f64 * 1.3).sin() * 3.0 + 1.0).collect();
        let (y, _) = group_norm_forward(&x, &[1.0; 4], &[0.0; 4], 2, 4, 9, 2, true);
        for seg in y.chunks(18) {
            let m: f64 = seg.iter().sum::<f64>() / 18.0;
            let v: f64 = seg.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
