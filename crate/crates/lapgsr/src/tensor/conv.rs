//! conv2d kernels: im2col + single-precision GEMM, plus the two transposed
//! products for the backward pass. Padding is zero-fill and may be asymmetric
//! (the discriminator's stride-1 4x4 head needs (1,2) to preserve extents).

use super::Shape;

/// Zero padding per edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub fn same(p: usize) -> Self {
        Pad {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: Pad,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// None when the kernel does not fit even once.
    pub fn new(x: Shape, out_c: usize, k: usize, stride: usize, pad: Pad) -> Option<Self> {
        if stride == 0 || k == 0 {
            return None;
        }
        let span_h = x.h + pad.top + pad.bottom;
        let span_w = x.w + pad.left + pad.right;
        if span_h < k || span_w < k {
            return None;
        }
        Some(ConvGeom {
            in_c: x.c,
            in_h: x.h,
            in_w: x.w,
            out_c,
            k,
            stride,
            pad,
            out_h: (span_h - k) / stride + 1,
            out_w: (span_w - k) / stride + 1,
        })
    }

    pub fn cols_len(&self) -> usize {
        self.in_c * self.k * self.k * self.out_h * self.out_w
    }
}

/// Unfold one batch item `x[c, h, w]` into `cols[c*k*k, out_h*out_w]`.
/// Out-of-image taps are zero.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let n = g.out_h * g.out_w;
    debug_assert_eq!(cols.len(), g.cols_len());
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &mut cols[r * n..(r + 1) * n];
                for oy in 0..g.out_h {
                    let seg = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    fill_row(seg, src, g, kx);
                }
            }
        }
    }
}

/// One output row of the unfold: seg[ox] = src[ox*stride + kx - pad.left],
/// zero outside the image.
fn fill_row(seg: &mut [f32], src: &[f32], g: &ConvGeom, kx: usize) {
    let len = seg.len();
    let off = kx as isize - g.pad.left as isize;
    let (lo, hi) = valid_range(len, off, g.stride, g.in_w);
    seg[..lo].fill(0.0);
    if g.stride == 1 {
        let start = (lo as isize + off) as usize;
        seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
    } else {
        for (ox, s) in seg[lo..hi].iter_mut().enumerate() {
            *s = src[(((lo + ox) * g.stride) as isize + off) as usize];
        }
    }
    seg[hi..].fill(0.0);
}

/// Transpose of `im2col`: scatter-add `cols` back onto the input plane grid.
/// The in-bounds output range is computed per row so the hot stride-1 path is
/// a branch-free slice add.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let n = g.out_h * g.out_w;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &cols[r * n..(r + 1) * n];
                let off = kx as isize - g.pad.left as isize;
                let (lo, hi) = valid_range(g.out_w, off, g.stride, g.in_w);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let seg = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in seg[lo..hi].iter().enumerate() {
                            dst[(((lo + ox) * g.stride) as isize + off) as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output-column range [lo, hi) whose input column ox*stride + off falls
/// inside [0, in_w).
fn valid_range(out_w: usize, off: isize, stride: usize, in_w: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    }
    .min(out_w);
    let hi = if in_w as isize <= off {
        0
    } else {
        ((((in_w as isize - off - 1) / stride as isize) + 1) as usize).min(out_w)
    }
    .max(lo);
    (lo, hi)
}

/// c = alpha*a*b + beta*c with explicit row/column strides (so transposed
/// operands need no copies).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(span(m, k, rsa, csa) <= a.len());
    debug_assert!(span(k, n, rsb, csb) <= b.len());
    debug_assert!(m * n <= c.len());
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs + 1) as usize
}

/// Forward convolution over a batch: weights `[out_c, in_c*k*k]` row-major,
/// bias per output channel.
pub(crate) fn forward(x: &[f32], xs: Shape, w: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_h * g.out_w;
    let ckk = g.in_c * g.k * g.k;
    let in_plane = g.in_c * g.in_h * g.in_w;
    let out_plane = g.out_c * n;
    let mut cols = vec![0.0f32; g.cols_len()];
    let mut y = vec![0.0f32; xs.b * out_plane];
    for b in 0..xs.b {
        im2col(&x[b * in_plane..(b + 1) * in_plane], g, &mut cols);
        let yb = &mut y[b * out_plane..(b + 1) * out_plane];
        sgemm(g.out_c, ckk, n, w, ckk as isize, 1, &cols, n as isize, 1, 0.0, yb);
        for oc in 0..g.out_c {
            let bv = bias[oc];
            for v in &mut yb[oc * n..(oc + 1) * n] {
                *v += bv;
            }
        }
    }
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

/// Backward convolution. `want` selects which gradients to materialize
/// (input, weight, bias); unfolding is skipped when the weight gradient is
/// not needed.
pub(crate) fn backward(
    x: &[f32],
    xs: Shape,
    w: &[f32],
    gy: &[f32],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (want_dx, want_dw, want_db) = want;
    let n = g.out_h * g.out_w;
    let ckk = g.in_c * g.k * g.k;
    let in_plane = g.in_c * g.in_h * g.in_w;
    let out_plane = g.out_c * n;

    let mut dx = want_dx.then(|| vec![0.0f32; xs.b * in_plane]);
    let mut dw = want_dw.then(|| vec![0.0f32; g.out_c * ckk]);
    let mut db = want_db.then(|| vec![0.0f32; g.out_c]);
    let mut cols = want_dw.then(|| vec![0.0f32; g.cols_len()]);
    let mut dcols = want_dx.then(|| vec![0.0f32; g.cols_len()]);

    for b in 0..xs.b {
        let gyb = &gy[b * out_plane..(b + 1) * out_plane];
        if let (Some(dw), Some(cols)) = (dw.as_deref_mut(), cols.as_deref_mut()) {
            im2col(&x[b * in_plane..(b + 1) * in_plane], g, cols);
            // dW += gy_b [out_c x n] * cols^T [n x ckk]
            sgemm(g.out_c, n, ckk, gyb, n as isize, 1, cols, 1, n as isize, 1.0, dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for oc in 0..g.out_c {
                db[oc] += gyb[oc * n..(oc + 1) * n].iter().sum::<f32>();
            }
        }
        if let (Some(dx), Some(dcols)) = (dx.as_deref_mut(), dcols.as_deref_mut()) {
            // dcols = W^T [ckk x out_c] * gy_b [out_c x n]
            sgemm(ckk, g.out_c, n, w, 1, ckk as isize, gyb, n as isize, 1, 0.0, dcols);
            col2im_add(dcols, g, &mut dx[b * in_plane..(b + 1) * in_plane]);
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct-summation reference for one output location.
    fn conv_at(
        x: &[f32],
        g: &ConvGeom,
        w: &[f32],
        bias: &[f32],
        oc: usize,
        oy: usize,
        ox: usize,
    ) -> f32 {
        let mut acc = bias[oc];
        for c in 0..g.in_c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad.left as isize;
                    if (0..g.in_h as isize).contains(&iy) && (0..g.in_w as isize).contains(&ix) {
                        let xv = x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                        acc += xv * w[((oc * g.in_c + c) * g.k + ky) * g.k + kx];
                    }
                }
            }
        }
        acc
    }

    #[test]
    fn gemm_path_matches_direct_summation() {
        let cases = [
            (Shape::new(1, 3, 7, 6), 4, 3, 1, Pad::same(1)),
            (Shape::new(2, 2, 9, 8), 3, 4, 2, Pad::same(1)),
            (
                Shape::new(1, 2, 5, 5),
                2,
                4,
                1,
                Pad {
                    top: 1,
                    bottom: 2,
                    left: 1,
                    right: 2,
                },
            ),
        ];
        for (xs, out_c, k, stride, pad) in cases {
            let g = ConvGeom::new(xs, out_c, k, stride, pad).unwrap();
            let x: Vec<f32> = (0..xs.numel()).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.13).collect();
            let w: Vec<f32> = (0..out_c * xs.c * k * k)
                .map(|i| ((i * 23 % 17) as f32 - 8.0) * 0.07)
                .collect();
            let bias: Vec<f32> = (0..out_c).map(|i| i as f32 * 0.1).collect();
            let y = forward(&x, xs, &w, &bias, &g);
            let n = g.out_h * g.out_w;
            for b in 0..xs.b {
                let xb = &x[b * xs.c * xs.h * xs.w..];
                for oc in 0..out_c {
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            let got = y[(b * out_c + oc) * n + oy * g.out_w + ox];
                            let want = conv_at(xb, &g, &w, &bias, oc, oy, ox);
                            assert!(
                                (got - want).abs() < 1e-4,
                                "case {xs} oc{oc} ({oy},{ox}): {got} vs {want}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn asymmetric_pad_preserves_extent_for_even_kernel() {
        // k=4, stride 1, pad (1,2): out extent equals in extent.
        let xs = Shape::new(1, 1, 10, 13);
        let g = ConvGeom::new(
            xs,
            1,
            4,
            1,
            Pad {
                top: 1,
                bottom: 2,
                left: 1,
                right: 2,
            },
        )
        .unwrap();
        assert_eq!((g.out_h, g.out_w), (10, 13));
    }

    #[test]
    fn col2im_is_im2col_transpose() {
        // <im2col(x), u> == <x, col2im(u)> for random u: the defining property
        // of the adjoint, checked by direct inner products.
        let xs = Shape::new(1, 2, 6, 5);
        let g = ConvGeom::new(xs, 3, 3, 2, Pad::same(1)).unwrap();
        let x: Vec<f32> = (0..xs.numel()).map(|i| (i as f32 * 0.31).sin()).collect();
        let u: Vec<f32> = (0..g.cols_len()).map(|i| (i as f32 * 0.17).cos()).collect();
        let mut cols = vec![0.0; g.cols_len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&u).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        let mut back = vec![0.0; xs.numel()];
        col2im_add(&u, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
