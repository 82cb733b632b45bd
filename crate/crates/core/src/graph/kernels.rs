//! Raw numeric kernels behind the tape ops. Everything is row-major NCHW.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn ho(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.stride + 1
    }

    pub fn wo(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + j - pw` is in bounds.
fn valid_cols(geo: &ConvGeom, j: usize, wo: usize) -> (usize, usize) {
    let s = geo.stride;
    let lo = if geo.pw > j { (geo.pw - j).div_ceil(s) } else { 0 };
    let hi = if geo.w + geo.pw > j { ((geo.w + geo.pw - j - 1) / s + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<S: Real>(x: &[S], geo: &ConvGeom, cols: &mut [S]) {
    let (ho, wo) = (geo.ho(), geo.wo());
    let plane = ho * wo;
    let s = geo.stride;
    for c in 0..geo.cin_g() {
        let xc = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (c * geo.kh + i) * geo.kw + j;
                let out = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(geo, j, wo);
                for oy in 0..ho {
                    let y = (oy * s + i) as isize - geo.ph as isize;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if y < 0 || y as usize >= geo.h || lo == hi {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &xc[y as usize * geo.w..(y as usize + 1) * geo.w];
                    dst[..lo].fill(S::zero());
                    dst[hi..].fill(S::zero());
                    let x0 = lo * s + j - geo.pw;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[x0 + k * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Real>(cols: &[S], geo: &ConvGeom, x: &mut [S]) {
    let (ho, wo) = (geo.ho(), geo.wo());
    let plane = ho * wo;
    let s = geo.stride;
    for c in 0..geo.cin_g() {
        let xc = &mut x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (c * geo.kh + i) * geo.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(geo, j, wo);
                if lo == hi {
                    continue;
                }
                let x0 = lo * s + j - geo.pw;
                for oy in 0..ho {
                    let y = (oy * s + i) as isize - geo.ph as isize;
                    if y < 0 || y as usize >= geo.h {
                        continue;
                    }
                    let dst = &mut xc[y as usize * geo.w..(y as usize + 1) * geo.w];
                    for (k, &v) in src[oy * wo + lo..oy * wo + hi].iter().enumerate() {
                        let d = &mut dst[x0 + k * s];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Narrow groups make the im2col GEMM memory-bound; convolve directly there.
fn use_direct(geo: &ConvGeom) -> bool {
    !geo.is_pointwise() && geo.cout_g() <= 4
}

/// Calls `f(x_start, y_start, w_index, len)` for every contiguous run of one
/// kernel tap over one output row: output `y_start .. y_start + len` pairs with
/// input `x_start, x_start + stride, ...`.
fn direct_runs(geo: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (ho, wo) = (geo.ho(), geo.wo());
    let (cg, og) = (geo.cin_g(), geo.cout_g());
    let taps = geo.kh * geo.kw;
    for n in 0..geo.n {
        for g in 0..geo.groups {
            for o in 0..og {
                let oc = g * og + o;
                for c in 0..cg {
                    let xbase = (n * geo.cin + g * cg + c) * geo.h * geo.w;
                    let ybase = (n * geo.cout + oc) * ho * wo;
                    for i in 0..geo.kh {
                        for j in 0..geo.kw {
                            let widx = (oc * cg + c) * taps + i * geo.kw + j;
                            let (lo, hi) = valid_cols(geo, j, wo);
                            if lo == hi {
                                continue;
                            }
                            let x0 = lo * geo.stride + j - geo.pw;
                            for oy in 0..ho {
                                let y = (oy * geo.stride + i) as isize - geo.ph as isize;
                                if y < 0 || y as usize >= geo.h {
                                    continue;
                                }
                                f(xbase + y as usize * geo.w + x0, ybase + oy * wo + lo, widx, hi - lo);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_direct<S: Real>(x: &[S], w: &[S], geo: &ConvGeom, out: &mut [S]) {
    let s = geo.stride;
    direct_runs(geo, |xs, ys, wi, len| {
        let wv = w[wi];
        let dst = &mut out[ys..ys + len];
        if s == 1 {
            for (d, &v) in dst.iter_mut().zip(&x[xs..xs + len]) {
                *d = *d + wv * v;
            }
        } else {
            for (k, d) in dst.iter_mut().enumerate() {
                *d = *d + wv * x[xs + k * s];
            }
        }
    });
}

fn conv2d_direct_backward<S: Real>(x: &[S], w: &[S], gy: &[S], geo: &ConvGeom, mut gx: Option<&mut [S]>, mut gw: Option<&mut [S]>) {
    let s = geo.stride;
    direct_runs(geo, |xs, ys, wi, len| {
        let g = &gy[ys..ys + len];
        if let Some(gw) = gw.as_deref_mut() {
            let mut acc = S::zero();
            for (k, &v) in g.iter().enumerate() {
                acc = acc + v * x[xs + k * s];
            }
            gw[wi] = gw[wi] + acc;
        }
        if let Some(gx) = gx.as_deref_mut() {
            let wv = w[wi];
            for (k, &v) in g.iter().enumerate() {
                let d = &mut gx[xs + k * s];
                *d = *d + wv * v;
            }
        }
    });
}

pub fn conv2d<S: Real>(x: &[S], w: &[S], geo: &ConvGeom) -> Vec<S> {
    let (ho, wo) = (geo.ho(), geo.wo());
    let plane = ho * wo;
    let (cg, og, k) = (geo.cin_g(), geo.cout_g(), geo.patch());
    let mut out = vec![S::zero(); geo.n * geo.cout * plane];
    if use_direct(geo) {
        conv2d_direct(x, w, geo, &mut out);
        return out;
    }
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![S::zero(); k * plane] };
    for n in 0..geo.n {
        for g in 0..geo.groups {
            let xs = &x[(n * geo.cin + g * cg) * geo.h * geo.w..(n * geo.cin + (g + 1) * cg) * geo.h * geo.w];
            let src: &[S] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, geo, &mut cols);
                &cols
            };
            let ws = &w[g * og * k..(g + 1) * og * k];
            let os = &mut out[(n * geo.cout + g * og) * plane..(n * geo.cout + (g + 1) * og) * plane];
            S::gemm(og, k, plane, S::one(), ws, k as isize, 1, src, plane as isize, 1, S::zero(), os, plane as isize, 1);
        }
    }
    out
}

/// Accumulates input and weight gradients of `conv2d` given the output gradient.
pub fn conv2d_backward<S: Real>(
    x: &[S],
    w: &[S],
    gy: &[S],
    geo: &ConvGeom,
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
) {
    if use_direct(geo) {
        conv2d_direct_backward(x, w, gy, geo, gx, gw);
        return;
    }
    let plane = geo.ho() * geo.wo();
    let (cg, og, k) = (geo.cin_g(), geo.cout_g(), geo.patch());
    let mut cols = vec![S::zero(); k * plane];
    let mut gcols = vec![S::zero(); k * plane];
    for n in 0..geo.n {
        for g in 0..geo.groups {
            let xoff = (n * geo.cin + g * cg) * geo.h * geo.w;
            let xlen = cg * geo.h * geo.w;
            let gys = &gy[(n * geo.cout + g * og) * plane..(n * geo.cout + (g + 1) * og) * plane];
            if let Some(gw) = gw.as_deref_mut() {
                let src: &[S] = if geo.is_pointwise() {
                    &x[xoff..xoff + xlen]
                } else {
                    im2col(&x[xoff..xoff + xlen], geo, &mut cols);
                    &cols
                };
                let gws = &mut gw[g * og * k..(g + 1) * og * k];
                // gw[og, k] += gy[og, plane] * cols^T[plane, k]
                S::gemm(og, plane, k, S::one(), gys, plane as isize, 1, src, 1, plane as isize, S::one(), gws, k as isize, 1);
            }
            if let Some(gx) = gx.as_deref_mut() {
                let ws = &w[g * og * k..(g + 1) * og * k];
                let gxs = &mut gx[xoff..xoff + xlen];
                if geo.is_pointwise() {
                    S::gemm(k, og, plane, S::one(), ws, 1, k as isize, gys, plane as isize, 1, S::one(), gxs, plane as isize, 1);
                } else {
                    S::gemm(k, og, plane, S::one(), ws, 1, k as isize, gys, plane as isize, 1, S::zero(), &mut gcols, plane as isize, 1);
                    col2im_add(&gcols, geo, gxs);
                }
            }
        }
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (non-overlapping).
/// `x: [n, cin, h, w]`, `w: [cin, cout, 2, 2]` -> `[n, cout, 2h, 2w]`.
pub fn conv_t2<S: Real>(x: &[S], w: &[S], n: usize, cin: usize, cout: usize, h: usize, wd: usize) -> Vec<S> {
    let hw = h * wd;
    let q = cout * 4;
    let mut out = vec![S::zero(); n * cout * 4 * hw];
    let mut tmp = vec![S::zero(); q * hw];
    for b in 0..n {
        let xs = &x[b * cin * hw..(b + 1) * cin * hw];
        S::gemm(q, cin, hw, S::one(), w, 1, q as isize, xs, hw as isize, 1, S::zero(), &mut tmp, hw as isize, 1);
        let ys = &mut out[b * cout * 4 * hw..(b + 1) * cout * 4 * hw];
        for o in 0..cout {
            for a in 0..2 {
                for c in 0..2 {
                    let src = &tmp[(o * 4 + a * 2 + c) * hw..(o * 4 + a * 2 + c + 1) * hw];
                    for i in 0..h {
                        for j in 0..wd {
                            ys[(o * 2 * h + 2 * i + a) * 2 * wd + 2 * j + c] = src[i * wd + j];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t2_backward<S: Real>(
    x: &[S],
    w: &[S],
    gy: &[S],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
) {
    let hw = h * wd;
    let q = cout * 4;
    let mut gathered = vec![S::zero(); q * hw];
    for b in 0..n {
        let gys = &gy[b * cout * 4 * hw..(b + 1) * cout * 4 * hw];
        for o in 0..cout {
            for a in 0..2 {
                for c in 0..2 {
                    let dst = &mut gathered[(o * 4 + a * 2 + c) * hw..(o * 4 + a * 2 + c + 1) * hw];
                    for i in 0..h {
                        for j in 0..wd {
                            dst[i * wd + j] = gys[(o * 2 * h + 2 * i + a) * 2 * wd + 2 * j + c];
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxs = &mut gx[b * cin * hw..(b + 1) * cin * hw];
            S::gemm(cin, q, hw, S::one(), w, q as isize, 1, &gathered, hw as isize, 1, S::one(), gxs, hw as isize, 1);
        }
        if let Some(gw) = gw.as_deref_mut() {
            let xs = &x[b * cin * hw..(b + 1) * cin * hw];
            S::gemm(cin, hw, q, S::one(), xs, hw as isize, 1, &gathered, 1, hw as isize, S::one(), gw, q as isize, 1);
        }
    }
}

/// Batched `op(a) * op(b)` where `op` optionally transposes the last two axes.
/// `a` is `[batch, m, k]` (or `[batch, k, m]` when `ta`), `b` is `[batch, k, n]`
/// (or `[batch, n, k]` when `tb`). Accumulates into `out` with factor `beta`.
#[allow(clippy::too_many_arguments)]
pub fn bmm<S: Real>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    beta: S,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for i in 0..batch {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            &a[i * m * k..(i + 1) * m * k],
            rsa,
            csa,
            &b[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            beta,
            &mut out[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
}

/// Direct (loop) convolution used as an independent reference in tests.
#[cfg(test)]
pub fn conv2d_naive<S: Real>(x: &[S], w: &[S], geo: &ConvGeom) -> Vec<S> {
    let (ho, wo) = (geo.ho(), geo.wo());
    let (cg, og) = (geo.cin_g(), geo.cout_g());
    let mut out = vec![S::zero(); geo.n * geo.cout * ho * wo];
    for n in 0..geo.n {
        for o in 0..geo.cout {
            let g = o / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for c in 0..cg {
                        for i in 0..geo.kh {
                            for j in 0..geo.kw {
                                let y = (oy * geo.stride + i) as isize - geo.ph as isize;
                                let xx = (ox * geo.stride + j) as isize - geo.pw as isize;
                                if y < 0 || xx < 0 || y as usize >= geo.h || xx as usize >= geo.w {
                                    continue;
                                }
                                let xv = x[((n * geo.cin + g * cg + c) * geo.h + y as usize) * geo.w + xx as usize];
                                let wv = w[((o * cg + c) * geo.kh + i) * geo.kw + j];
                                acc += xv.f64() * wv.f64();
                            }
                        }
                    }
                    out[((n * geo.cout + o) * ho + oy) * wo + ox] = S::of(acc);
                }
            }
        }
    }
    out
}
