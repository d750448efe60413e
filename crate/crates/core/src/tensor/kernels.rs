//! Plain-slice compute kernels shared by the graph ops and the brute-force
//! reference paths in tests. No allocation decisions live here beyond the
//! output buffers.

use super::Element;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_bt_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_at_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Valid output x-range `[lo, hi)` for kernel column `kx`.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        // ix = ox*stride + kx - pad must lie in [0, w)
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx + self.stride - 1) / self.stride };
        let hi_num = self.w + self.pad;
        let hi = if hi_num > kx { ((hi_num - kx - 1) / self.stride + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], wt: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.cout * g.oh * g.ow];
    for n in 0..g.n {
        for co in 0..g.cout {
            let obase = (n * g.cout + co) * g.oh * g.ow;
            for ci in 0..g.cin {
                let xbase = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.ox_range(kx);
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * g.w;
                            let orow = obase + oy * g.ow;
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.pad;
                                out[orow + ox] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel)` given the upstream gradient.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Vec<T>, Vec<T>) {
    let mut dx = if want_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = if want_dw { vec![T::zero(); wt.len()] } else { Vec::new() };
    for n in 0..g.n {
        for co in 0..g.cout {
            let obase = (n * g.cout + co) * g.oh * g.ow;
            for ci in 0..g.cin {
                let xbase = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx];
                        let (lo, hi) = g.ox_range(kx);
                        let mut acc = T::zero();
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * g.w;
                            let orow = obase + oy * g.ow;
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.pad;
                                let d = dout[orow + ox];
                                if want_dw {
                                    acc += d * x[xrow + ix];
                                }
                                if want_dx {
                                    dx[xrow + ix] += wv * d;
                                }
                            }
                        }
                        if want_dw {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// One deformable tap: integer base shift plus bilinear fractions, shared by
/// every output pixel because tap offsets are global per tap.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    pub y0: isize,
    pub x0: isize,
    pub fy: T,
    pub fx: T,
    /// Whether the clamp to the receptive radius was active on each axis.
    pub clamped_y: bool,
    pub clamped_x: bool,
}

pub(crate) fn make_taps<T: Element>(kh: usize, kw: usize, offsets: &[T]) -> Vec<Tap<T>> {
    let ry = (kh / 2) as isize;
    let rx = (kw / 2) as isize;
    let (limy, limx) = (T::lit(kh as f64), T::lit(kw as f64));
    let mut taps = Vec::with_capacity(kh * kw);
    for ky in 0..kh {
        for kx in 0..kw {
            let t = ky * kw + kx;
            let (dy, dx) = (offsets[2 * t], offsets[2 * t + 1]);
            let cy = dy.max(-limy).min(limy);
            let cx = dx.max(-limx).min(limx);
            let fy0 = cy.floor();
            let fx0 = cx.floor();
            taps.push(Tap {
                y0: ky as isize - ry + fy0.as_f64() as isize,
                x0: kx as isize - rx + fx0.as_f64() as isize,
                fy: cy - fy0,
                fx: cx - fx0,
                clamped_y: dy.abs() > limy,
                clamped_x: dx.abs() > limx,
            });
        }
    }
    taps
}

#[inline]
fn px<T: Element>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear sample of a whole plane displaced by one tap.
pub(crate) fn sample_plane<T: Element>(plane: &[T], h: usize, w: usize, tap: &Tap<T>, out: &mut [T]) {
    let one = T::one();
    let (w00, w01, w10, w11) = (
        (one - tap.fy) * (one - tap.fx),
        (one - tap.fy) * tap.fx,
        tap.fy * (one - tap.fx),
        tap.fy * tap.fx,
    );
    for y in 0..h {
        let sy = y as isize + tap.y0;
        for x in 0..w {
            let sx = x as isize + tap.x0;
            out[y * w + x] = w00 * px(plane, h, w, sy, sx)
                + w01 * px(plane, h, w, sy, sx + 1)
                + w10 * px(plane, h, w, sy + 1, sx)
                + w11 * px(plane, h, w, sy + 1, sx + 1);
        }
    }
}

/// Adjoint of [`sample_plane`] with respect to the plane, plus the partial
/// derivatives of `<dsample, sample>` with respect to the two fractions.
pub(crate) fn sample_plane_backward<T: Element>(
    plane: &[T],
    h: usize,
    w: usize,
    tap: &Tap<T>,
    dsample: &[T],
    dplane: Option<&mut [T]>,
) -> (T, T) {
    let one = T::one();
    let (w00, w01, w10, w11) = (
        (one - tap.fy) * (one - tap.fx),
        (one - tap.fy) * tap.fx,
        tap.fy * (one - tap.fx),
        tap.fy * tap.fx,
    );
    let mut dfy = T::zero();
    let mut dfx = T::zero();
    let mut dplane = dplane;
    for y in 0..h {
        let sy = y as isize + tap.y0;
        for x in 0..w {
            let sx = x as isize + tap.x0;
            let d = dsample[y * w + x];
            if d == T::zero() {
                continue;
            }
            let v00 = px(plane, h, w, sy, sx);
            let v01 = px(plane, h, w, sy, sx + 1);
            let v10 = px(plane, h, w, sy + 1, sx);
            let v11 = px(plane, h, w, sy + 1, sx + 1);
            dfy += d * ((one - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
            dfx += d * ((one - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
            if let Some(dp) = dplane.as_deref_mut() {
                let mut put = |yy: isize, xx: isize, wt: T| {
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        dp[yy as usize * w + xx as usize] += wt * d;
                    }
                };
                put(sy, sx, w00);
                put(sy, sx + 1, w01);
                put(sy + 1, sx, w10);
                put(sy + 1, sx + 1, w11);
            }
        }
    }
    (dfy, dfx)
}

/// Effective SymNorm pieces: the symmetrized matrix `s` and the per-row
/// scale `r_i = max(d_i, eps)^{-1/2}`, plus the clamped degrees themselves.
pub(crate) fn sym_norm_parts<T: Element>(
    a: &[T],
    t: usize,
    average: bool,
    row_sum: bool,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<bool>) {
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let mut s = vec![T::zero(); t * t];
    for i in 0..t {
        for j in 0..t {
            s[i * t + j] = if average {
                (a[i * t + j] + a[j * t + i]) * half
            } else {
                (two * a[i * t + j] + a[j * t + i]) / two
            };
        }
    }
    let mut r = vec![T::zero(); t];
    let mut deg = vec![T::zero(); t];
    let mut active = vec![false; t];
    for i in 0..t {
        let d = if row_sum { s[i * t..(i + 1) * t].iter().copied().sum() } else { s[i * t + i] };
        active[i] = d > eps;
        deg[i] = d.max(eps);
        r[i] = T::one() / deg[i].sqrt();
    }
    (s, r, deg, active)
}
