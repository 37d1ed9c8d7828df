//! Stride-1 convolution kernels that read a zero-padded input directly
//! instead of materializing an im2col matrix.
//!
//! Output channels are processed in blocks of [`CB`] and output columns in
//! tiles of [`XT`], so each accumulator tile stays in registers.

use super::tape::ConvGeom;
use super::tensor::Scalar;

/// Output columns per register tile.
pub(crate) const XT: usize = 8;
/// Output channels per register tile.
pub(crate) const CB: usize = 8;

/// Row length of a padded buffer from which a tile of `XT` columns can be
/// read `k - 1` columns past any tile start in `0..width`.
pub(crate) fn padded_width(width: usize, k: usize) -> usize {
    width.div_ceil(XT) * XT + k - 1
}

/// Copies `x[c][h][w]` into a zeroed `[c][hp][wp]` buffer at offset
/// `(top, left)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pad_into<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (top, left): (usize, usize),
    (hp, wp): (usize, usize),
    out: &mut Vec<T>,
) {
    assert!(top + h <= hp && left + w <= wp && x.len() == c * h * w);
    out.clear();
    out.resize(c * hp * wp, T::zero());
    for ch in 0..c {
        for y in 0..h {
            let dst = (ch * hp + top + y) * wp + left;
            out[dst..dst + w].copy_from_slice(&x[(ch * h + y) * w..][..w]);
        }
    }
}

/// Geometry of a correlation with row stride `sh` and column stride 1 over
/// a padded `[cin][hp][wp]` input producing `[cout][oh][ow]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Corr {
    pub sh: usize,
    pub cin: usize,
    pub hp: usize,
    pub wp: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Corr {
    fn taps(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn check_input(&self, xp: &[impl Sized]) {
        assert!(self.cout % CB == 0, "output channels must be a multiple of {CB}");
        assert!(self.sh >= 1 && self.hp >= (self.oh - 1) * self.sh + self.kh);
        assert!(self.wp >= padded_width(self.ow, self.kw));
        assert!(xp.len() >= self.cin * self.hp * self.wp);
    }
}

/// A "same" convolution of any stride expressed as a [`Corr`] over an input
/// whose columns are split into `sw` phases: tap `j = q * sw + r` of input
/// channel `ci` becomes tap `q` of channel `ci * sw + r`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Phased {
    pub corr: Corr,
    geom: ConvGeom,
    kq: usize,
}

impl Phased {
    /// `None` when the output channel count does not fill whole blocks.
    pub fn new(g: &ConvGeom) -> Option<Self> {
        if g.cout % CB != 0 {
            return None;
        }
        let kq = g.kw.div_ceil(g.sw);
        Some(Self {
            corr: Corr {
                sh: g.sh,
                cin: g.cin * g.sw,
                hp: (g.oh - 1) * g.sh + g.kh,
                wp: padded_width(g.ow, kq),
                cout: g.cout,
                kh: g.kh,
                kw: kq,
                oh: g.oh,
                ow: g.ow,
            },
            geom: *g,
            kq,
        })
    }

    /// Zero-padded, phase-split copy of one sample `[cin][h][w]`. Input rows
    /// below the last one any output reads are dropped.
    pub fn split_input<T: Scalar>(&self, x: &[T], out: &mut Vec<T>) {
        let (g, c) = (&self.geom, &self.corr);
        assert_eq!(x.len(), g.cin * g.h * g.w);
        out.clear();
        out.resize(c.cin * c.hp * c.wp, T::zero());
        let rows = g.h.min(c.hp.saturating_sub(g.pad_t));
        for ci in 0..g.cin {
            for r in 0..g.sw {
                for y in 0..rows {
                    let src = &x[(ci * g.h + y) * g.w..][..g.w];
                    let dst = &mut out[((ci * g.sw + r) * c.hp + y + g.pad_t) * c.wp..][..c.wp];
                    if g.sw == 1 {
                        dst[g.pad_l..g.pad_l + g.w].copy_from_slice(src);
                        continue;
                    }
                    // padded column m * sw + r holds input column m * sw + r - pad_l
                    for (m, d) in dst.iter_mut().enumerate() {
                        let u = m * g.sw + r;
                        if u >= g.pad_l && u - g.pad_l < g.w {
                            *d = src[u - g.pad_l];
                        }
                    }
                }
            }
        }
    }

    fn split_tap(&self, tap: usize) -> usize {
        let g = &self.geom;
        let (ci, i, j) = (tap / (g.kh * g.kw), tap / g.kw % g.kh, tap % g.kw);
        ((ci * g.sw + j % g.sw) * g.kh + i) * self.kq + j / g.sw
    }

    /// `w[cout][cin][kh][kw]` as `[split tap][cout]`, zero for taps past `kw`.
    pub fn split_weights<T: Scalar>(&self, w: &[T]) -> Vec<T> {
        let g = &self.geom;
        let taps = g.cin * g.kh * g.kw;
        let mut out = vec![T::zero(); self.corr.cin * g.kh * self.kq * g.cout];
        for co in 0..g.cout {
            for t in 0..taps {
                let s = self.split_tap(t);
                out[s * g.cout + co] = w[co * taps + t];
            }
        }
        out
    }

    /// Weight gradient in the original `[cout][cin][kh][kw]` layout.
    pub fn weight_grad<T: Scalar>(&self, xs: &[T], gp: &[T], owp: usize, dw: &mut [T]) {
        let g = &self.geom;
        let taps = g.cin * g.kh * g.kw;
        let split_taps = self.corr.cin * g.kh * self.kq;
        if g.sw == 1 {
            return weight_grad(&self.corr, xs, gp, owp, dw);
        }
        let mut split = vec![T::zero(); g.cout * split_taps];
        weight_grad(&self.corr, xs, gp, owp, &mut split);
        for co in 0..g.cout {
            for t in 0..taps {
                let s = self.split_tap(t);
                dw[co * taps + t] = split[co * split_taps + s];
            }
        }
    }
}

#[inline(always)]
fn madd<T: Scalar, const FMA: bool>(a: T, b: T, c: T) -> T {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// `out[co][y][x] = sum wt[(ci, i, j)][co] * xp[ci][y + i][x + j]`.
#[inline(always)]
fn correlate_impl<T: Scalar, const FMA: bool>(g: &Corr, xp: &[T], wt: &[T], out: &mut [T]) {
    g.check_input(xp);
    assert_eq!(wt.len(), g.taps() * g.cout);
    assert_eq!(out.len(), g.cout * g.oh * g.ow);
    let tiles = g.ow.div_ceil(XT);
    for cb in (0..g.cout).step_by(CB) {
        for y in 0..g.oh {
            for t in 0..tiles {
                let x0 = t * XT;
                let mut acc = [[T::zero(); XT]; CB];
                for ci in 0..g.cin {
                    for i in 0..g.kh {
                        let row = (ci * g.hp + y * g.sh + i) * g.wp + x0;
                        for j in 0..g.kw {
                            // SAFETY: row + j + XT <= (ci*hp + y + i + 1) * wp by the
                            // padded-width check; tap index < taps.
                            let xv: [T; XT] = std::array::from_fn(|l| unsafe { *xp.get_unchecked(row + j + l) });
                            let wrow = ((ci * g.kh + i) * g.kw + j) * g.cout + cb;
                            for (c, a) in acc.iter_mut().enumerate() {
                                let w = unsafe { *wt.get_unchecked(wrow + c) };
                                for l in 0..XT {
                                    a[l] = madd::<T, FMA>(w, xv[l], a[l]);
                                }
                            }
                        }
                    }
                }
                let n = XT.min(g.ow - x0);
                for (c, a) in acc.iter().enumerate() {
                    let at = ((cb + c) * g.oh + y) * g.ow + x0;
                    out[at..at + n].copy_from_slice(&a[..n]);
                }
            }
        }
    }
}

/// `dw[co][(ci, i, j)] = sum_{y, x} gp[co][y][x] * xp[ci][y + i][x + j]`,
/// where `gp` rows are `owp` long (a multiple of `XT`, zero past `ow`).
#[inline(always)]
fn weight_grad_impl<T: Scalar, const FMA: bool>(g: &Corr, xp: &[T], gp: &[T], owp: usize, dw: &mut [T]) {
    g.check_input(xp);
    assert!(owp % XT == 0 && owp >= g.ow && owp + g.kw - 1 <= g.wp);
    assert_eq!(gp.len(), g.cout * g.oh * owp);
    let taps = g.taps();
    assert_eq!(dw.len(), g.cout * taps);
    for cb in (0..g.cout).step_by(CB) {
        for ci in 0..g.cin {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let mut acc = [[T::zero(); XT]; CB];
                    for y in 0..g.oh {
                        let xrow = (ci * g.hp + y * g.sh + i) * g.wp + j;
                        for x0 in (0..owp).step_by(XT) {
                            // SAFETY: xrow + x0 + XT <= row end since owp + kw - 1 <= wp;
                            // gp indices are within the asserted length.
                            let xv: [T; XT] = std::array::from_fn(|l| unsafe { *xp.get_unchecked(xrow + x0 + l) });
                            for (c, a) in acc.iter_mut().enumerate() {
                                let grow = ((cb + c) * g.oh + y) * owp + x0;
                                for l in 0..XT {
                                    a[l] = madd::<T, FMA>(unsafe { *gp.get_unchecked(grow + l) }, xv[l], a[l]);
                                }
                            }
                        }
                    }
                    let tap = (ci * g.kh + i) * g.kw + j;
                    for (c, a) in acc.iter().enumerate() {
                        dw[(cb + c) * taps + tap] = a.iter().copied().sum();
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::*;

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn correlate<T: Scalar>(g: &Corr, xp: &[T], wt: &[T], out: &mut [T]) {
        correlate_impl::<T, true>(g, xp, wt, out)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn weight_grad<T: Scalar>(g: &Corr, xp: &[T], gp: &[T], owp: usize, dw: &mut [T]) {
        weight_grad_impl::<T, true>(g, xp, gp, owp, dw)
    }
}

fn has_avx2_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

pub(crate) fn correlate<T: Scalar>(g: &Corr, xp: &[T], wt: &[T], out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { avx2::correlate(g, xp, wt, out) };
    }
    correlate_impl::<T, false>(g, xp, wt, out)
}

pub(crate) fn weight_grad<T: Scalar>(g: &Corr, xp: &[T], gp: &[T], owp: usize, dw: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { avx2::weight_grad(g, xp, gp, owp, dw) };
    }
    weight_grad_impl::<T, false>(g, xp, gp, owp, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], (cin, h, w): (usize, usize, usize), wts: &[f64], cout: usize, (kh, kw): (usize, usize)) -> Vec<f64> {
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (iy, ix) = (y as isize + i as isize - pt as isize, xx as isize + j as isize - pl as isize);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wts[((co * cin + ci) * kh + i) * kw + j] * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn correlate_matches_naive_same_convolution() {
        for (cin, h, w, cout, kh, kw) in [(1, 5, 9, 8, 3, 3), (3, 4, 17, 16, 4, 4), (2, 6, 8, 8, 1, 1), (2, 3, 5, 8, 8, 4)] {
            let x: Vec<f64> = (0..cin * h * w).map(|v| ((v * 37) % 11) as f64 - 5.0).collect();
            let wts: Vec<f64> = (0..cout * cin * kh * kw).map(|v| ((v * 13) % 7) as f64 * 0.25 - 0.75).collect();
            let taps = cin * kh * kw;
            let mut wt = vec![0.0; taps * cout];
            for co in 0..cout {
                for t in 0..taps {
                    wt[t * cout + co] = wts[co * taps + t];
                }
            }
            let (hp, wp) = (h + kh - 1, padded_width(w, kw));
            let mut xp = Vec::new();
            pad_into(&x, (cin, h, w), ((kh - 1) / 2, (kw - 1) / 2), (hp, wp), &mut xp);
            let g = Corr { sh: 1, cin, hp, wp, cout, kh, kw, oh: h, ow: w };
            let mut out = vec![f64::NAN; cout * h * w];
            correlate(&g, &xp, &wt, &mut out);
            let mut plain = vec![f64::NAN; cout * h * w];
            correlate_impl::<f64, false>(&g, &xp, &wt, &mut plain);
            let expected = naive(&x, (cin, h, w), &wts, cout, (kh, kw));
            for ((a, b), e) in out.iter().zip(&plain).zip(&expected) {
                assert!((a - e).abs() < 1e-9 && (b - e).abs() < 1e-9);
            }

            // weight gradient against the same naive sums with a one-hot output gradient
            let owp = w.div_ceil(XT) * XT;
            let mut gp = vec![0.0; cout * h * owp];
            gp[(cout - 1) * h * owp + owp + 1.min(w - 1)] = 1.0;
            let mut dw = vec![0.0; cout * taps];
            weight_grad(&g, &xp, &gp, owp, &mut dw);
            for t in 0..taps {
                let mut probe = vec![0.0; cout * taps];
                probe[(cout - 1) * taps + t] = 1.0;
                let resp = naive(&x, (cin, h, w), &probe, cout, (kh, kw));
                let want = if h > 1 { resp[((cout - 1) * h + 1) * w + 1.min(w - 1)] } else { 0.0 };
                assert!((dw[(cout - 1) * taps + t] - want).abs() < 1e-9);
            }
        }
    }

    fn naive_strided(x: &[f64], g: &ConvGeom, wts: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.cout * g.oh * g.ow];
        for co in 0..g.cout {
            for y in 0..g.oh {
                for xx in 0..g.ow {
                    let mut s = 0.0;
                    for ci in 0..g.cin {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let iy = (y * g.sh + i) as isize - g.pad_t as isize;
                                let ix = (xx * g.sw + j) as isize - g.pad_l as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += wts[((co * g.cin + ci) * g.kh + i) * g.kw + j]
                                        * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * g.oh + y) * g.ow + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn phased_matches_naive_strided_convolution() {
        let cases = [
            ([1, 2, 7, 11], [8, 2, 3, 3], (2, 2)),
            ([1, 3, 6, 26], [16, 3, 4, 4], (2, 2)),
            ([1, 2, 9, 10], [8, 2, 1, 1], (2, 2)),
            ([1, 1, 8, 13], [8, 1, 5, 4], (1, 3)),
            ([1, 2, 9, 6], [8, 2, 3, 2], (3, 1)),
        ];
        for (xs, ws, stride) in cases {
            let g = ConvGeom::new(&xs, &ws, stride).unwrap();
            let ph = Phased::new(&g).unwrap();
            let x: Vec<f64> = (0..g.cin * g.h * g.w).map(|v| ((v * 37) % 11) as f64 - 5.0).collect();
            let taps = g.cin * g.kh * g.kw;
            let wts: Vec<f64> = (0..g.cout * taps).map(|v| ((v * 13) % 7) as f64 * 0.25 - 0.75).collect();
            let mut split = Vec::new();
            ph.split_input(&x, &mut split);
            let mut out = vec![f64::NAN; g.cout * g.oh * g.ow];
            correlate(&ph.corr, &split, &ph.split_weights(&wts), &mut out);
            let expected = naive_strided(&x, &g, &wts);
            for (a, e) in out.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-9, "{xs:?} {ws:?} {stride:?}");
            }

            // dW[co][t] = sum over outputs of g_out * d out / d w, checked by probing
            let owp = g.ow.div_ceil(XT) * XT;
            let gout: Vec<f64> = (0..g.cout * g.oh * g.ow).map(|v| ((v * 5) % 9) as f64 - 4.0).collect();
            let mut gp = Vec::new();
            pad_into(&gout, (g.cout, g.oh, g.ow), (0, 0), (g.oh, owp), &mut gp);
            let mut dw = vec![0.0; g.cout * taps];
            ph.weight_grad(&split, &gp, owp, &mut dw);
            for k in (0..g.cout * taps).step_by(7) {
                let mut probe = vec![0.0; g.cout * taps];
                probe[k] = 1.0;
                let want: f64 = naive_strided(&x, &g, &probe).iter().zip(&gout).map(|(r, go)| r * go).sum();
                assert!((dw[k] - want).abs() < 1e-9, "{xs:?} {ws:?} {stride:?} tap {k}");
            }
        }
    }
}
