//! Slice-level numeric kernels shared by the forward and adjoint passes.

use crate::real::{gemm, Real};

#[derive(Clone, Copy, Debug)]
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
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent of a sliding window; `None` if the window does not fit.
pub(crate) fn window_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.l();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    let seg = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in seg.iter_mut().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.l();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * l..(row + 1) * l];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, l) = (g.k(), g.l());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * l;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
    for b in 0..g.n {
        let xi = &x[b * in_len..(b + 1) * in_len];
        let oi = &mut out[b * out_len..(b + 1) * out_len];
        if g.pointwise() {
            gemm(g.cout, k, l, w, false, xi, false, oi, false);
        } else {
            im2col(xi, g, &mut cols);
            gemm(g.cout, k, l, w, false, &cols, false, oi, false);
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                oi[co * l..(co + 1) * l].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, l) = (g.k(), g.l());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * l;
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = need.1.then(|| vec![T::zero(); g.cout * k]);
    let mut db = need.2.then(|| vec![T::zero(); g.cout]);
    let mut cols = if g.pointwise() || !need.1 { Vec::new() } else { vec![T::zero(); k * l] };
    let mut dcols = if g.pointwise() || !need.0 { Vec::new() } else { vec![T::zero(); k * l] };
    for b in 0..g.n {
        let gi = &gout[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += gi[co * l..(co + 1) * l].iter().copied().sum::<T>();
            }
        }
        let xi = &x[b * in_len..(b + 1) * in_len];
        if let Some(dw) = dw.as_mut() {
            if g.pointwise() {
                gemm(g.cout, l, k, gi, false, xi, true, dw, true);
            } else {
                im2col(xi, g, &mut cols);
                gemm(g.cout, l, k, gi, false, &cols, true, dw, true);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[b * in_len..(b + 1) * in_len];
            if g.pointwise() {
                gemm(k, g.cout, l, w, true, gi, false, dxi, false);
            } else {
                gemm(k, g.cout, l, w, true, gi, false, &mut dcols, false);
                col2im(&dcols, g, dxi);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Max pooling with `-inf` padding. Returns values and, per output, the
/// flat input index of the first maximum in row-major window order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oh in 0..ho {
            let h0 = (oh * stride) as isize - pad as isize;
            for ow in 0..wo {
                let w0 = (ow * stride) as isize - pad as isize;
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for i in 0..k as isize {
                    let ih = h0 + i;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for j in 0..k as isize {
                        let iw = w0 + j;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `-(t ln σ(x) + (1-t) ln(1-σ(x)))`.
pub(crate) fn bce_with_logits<T: Real>(x: T, t: T) -> T {
    x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p()
}
