//! Slice-level forward/backward kernels used by the graph ops.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        (h, w, cin): (usize, usize, usize),
        (kh, kw, cout): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self { h, w, cin, kh, kw, cout, stride, pad, ho, wo })
    }

    #[inline]
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Rows are output pixels, columns `(ky, kx, ci)`; out-of-bounds taps are 0.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.patch();
    let mut cols = vec![T::zero(); g.ho * g.wo * k];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * k..(oy * g.wo + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.patch();
    let mut dx = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * k..(oy * g.wo + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let p = g.ho * g.wo;
    let mut out = vec![T::zero(); p * g.cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.cout) {
            row.copy_from_slice(b);
        }
        T::gemm(p, g.patch(), g.cout, &cols, false, weight, false, T::one(), &mut out);
    } else {
        T::gemm(p, g.patch(), g.cout, &cols, false, weight, false, T::zero(), &mut out);
    }
    (out, cols)
}

/// Returns `(dx, dweight, dbias)`; `dx` only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    gout: &[T],
    cols: &[T],
    weight: &[T],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = g.ho * g.wo;
    let k = g.patch();
    let mut dw = vec![T::zero(); k * g.cout];
    T::gemm(k, p, g.cout, cols, true, gout, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); g.cout];
    for row in gout.chunks_exact(g.cout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let dx = if want_dx {
        let mut dcols = vec![T::zero(); p * k];
        T::gemm(p, g.cout, k, gout, false, weight, true, T::zero(), &mut dcols);
        Some(col2im(&dcols, g))
    } else {
        None
    };
    (dx, dw, db)
}

/// 3x3 depthwise convolution, stride 1, zero padding 1. Weight is `[3, 3, C]`.
pub(crate) fn depthwise_forward<T: Real>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * c..(y * w + xx + 1) * c];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &x[(iy as usize * w + ix as usize) * c..][..c];
                    let wk = &weight[(ky * 3 + kx) * c..][..c];
                    for ch in 0..c {
                        o[ch] += src[ch] * wk[ch];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Real>(
    gout: &[T],
    x: &[T],
    (h, w, c): (usize, usize, usize),
    weight: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); h * w * c];
    let mut dw = vec![T::zero(); 9 * c];
    let mut db = vec![T::zero(); c];
    for y in 0..h {
        for xx in 0..w {
            let go = &gout[(y * w + xx) * c..][..c];
            for ch in 0..c {
                db[ch] += go[ch];
            }
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * c;
                    let kb = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        dx[base + ch] += go[ch] * weight[kb + ch];
                        dw[kb + ch] += go[ch] * x[base + ch];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// `out(y*r+dy, x*r+dx, c) = in(y, x, c*r*r + dy*r + dx)`.
#[inline]
pub(crate) fn shuffle_index(
    (h, w, c_out): (usize, usize, usize),
    r: usize,
    oy: usize,
    ox: usize,
    c: usize,
) -> usize {
    let (y, dy) = (oy / r, oy % r);
    let (x, dx) = (ox / r, ox % r);
    let _ = h;
    (y * w + x) * (c_out * r * r) + c * r * r + dy * r + dx
}

/// Geometry of one windowed cross-attention head group.
///
/// Tokens are laid out row-major on a `grid_h x grid_w` grid. Heads
/// `head_start..head_start + heads` each read `head_dim` channels of the
/// query/key/value rows. With `shift > 0` both grids are cyclically shifted
/// by `-shift` before partitioning and pairs originating from different
/// regions are masked out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub window: usize,
    pub shift: usize,
    pub head_dim: usize,
    pub head_start: usize,
    pub heads: usize,
}

impl WindowSpec {
    pub fn windows(&self) -> usize {
        (self.grid_h / self.window) * (self.grid_w / self.window)
    }

    pub fn window_tokens(&self) -> usize {
        self.window * self.window
    }

    fn region(&self, s: usize, len: usize) -> usize {
        if self.shift == 0 || s < len - self.window {
            0
        } else if s < len - self.shift {
            1
        } else {
            2
        }
    }

    /// Token index (original grid) and mask region of every token in window `win`.
    pub fn window_tokens_of(&self, win: usize, tok: &mut [usize], region: &mut [usize]) {
        let nx = self.grid_w / self.window;
        let (wy, wx) = (win / nx, win % nx);
        let w = self.window;
        for i in 0..w * w {
            let sy = wy * w + i / w;
            let sx = wx * w + i % w;
            let oy = (sy + self.shift) % self.grid_h;
            let ox = (sx + self.shift) % self.grid_w;
            tok[i] = oy * self.grid_w + ox;
            region[i] = self.region(sy, self.grid_h) * 3 + self.region(sx, self.grid_w);
        }
    }
}

/// Returns `(out [T, heads*head_dim], probs [windows, heads, n, n])`.
pub(crate) fn window_attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dim: usize,
    s: &WindowSpec,
) -> (Vec<T>, Vec<T>) {
    let n = s.window_tokens();
    let hd = s.head_dim;
    let od = s.heads * hd;
    let tokens = s.grid_h * s.grid_w;
    let scale = T::one() / T::from_usize(hd).sqrt();
    let mut out = vec![T::zero(); tokens * od];
    let mut probs = vec![T::zero(); s.windows() * s.heads * n * n];
    let mut tok = vec![0usize; n];
    let mut region = vec![0usize; n];
    for win in 0..s.windows() {
        s.window_tokens_of(win, &mut tok, &mut region);
        for h in 0..s.heads {
            let col = (s.head_start + h) * hd;
            for i in 0..n {
                let p = &mut probs[((win * s.heads + h) * n + i) * n..][..n];
                let qi = &q[tok[i] * dim + col..][..hd];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if region[j] != region[i] {
                        continue;
                    }
                    let kj = &k[tok[j] * dim + col..][..hd];
                    let mut d = T::zero();
                    for c in 0..hd {
                        d += qi[c] * kj[c];
                    }
                    p[j] = d * scale;
                    if p[j] > max {
                        max = p[j];
                    }
                }
                let mut sum = T::zero();
                for j in 0..n {
                    if region[j] != region[i] {
                        p[j] = T::zero();
                    } else {
                        p[j] = (p[j] - max).exp();
                        sum += p[j];
                    }
                }
                let inv = T::one() / sum;
                let o = &mut out[tok[i] * od + h * hd..][..hd];
                for j in 0..n {
                    if p[j] == T::zero() {
                        continue;
                    }
                    p[j] *= inv;
                    let vj = &v[tok[j] * dim + col..][..hd];
                    for c in 0..hd {
                        o[c] += p[j] * vj[c];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`, each `[T, dim]` and zero outside the head group.
pub(crate) fn window_attention_backward<T: Real>(
    gout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dim: usize,
    s: &WindowSpec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = s.window_tokens();
    let hd = s.head_dim;
    let od = s.heads * hd;
    let tokens = s.grid_h * s.grid_w;
    let scale = T::one() / T::from_usize(hd).sqrt();
    let mut dq = vec![T::zero(); tokens * dim];
    let mut dk = vec![T::zero(); tokens * dim];
    let mut dv = vec![T::zero(); tokens * dim];
    let mut tok = vec![0usize; n];
    let mut region = vec![0usize; n];
    let mut dl = vec![T::zero(); n];
    for win in 0..s.windows() {
        s.window_tokens_of(win, &mut tok, &mut region);
        for h in 0..s.heads {
            let col = (s.head_start + h) * hd;
            for i in 0..n {
                let p = &probs[((win * s.heads + h) * n + i) * n..][..n];
                let go = &gout[tok[i] * od + h * hd..][..hd];
                let mut dot_sum = T::zero();
                for j in 0..n {
                    if p[j] == T::zero() {
                        dl[j] = T::zero();
                        continue;
                    }
                    let vb = tok[j] * dim + col;
                    let mut dp = T::zero();
                    for c in 0..hd {
                        dp += go[c] * v[vb + c];
                        dv[vb + c] += p[j] * go[c];
                    }
                    dl[j] = dp;
                    dot_sum += p[j] * dp;
                }
                let qb = tok[i] * dim + col;
                for j in 0..n {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let g = p[j] * (dl[j] - dot_sum) * scale;
                    let kb = tok[j] * dim + col;
                    for c in 0..hd {
                        dq[qb + c] += g * k[kb + c];
                        dk[kb + c] += g * q[qb + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
