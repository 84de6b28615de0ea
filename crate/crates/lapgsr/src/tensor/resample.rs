//! Bicubic resampling at fixed factors 2x and 0.5x: Keys kernel (a = -0.5),
//! half-pixel phase alignment, replicate edges. The same resampler serves the
//! pyramid, the network's upsample steps, and the bicubic comparison
//! baseline, so decompose/collapse round-trips cancel exactly.

use super::{Shape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Scale {
    Up2,
    Down2,
}

impl Scale {
    pub fn factor(self) -> f64 {
        match self {
            Scale::Up2 => 2.0,
            Scale::Down2 => 0.5,
        }
    }

    pub fn out_len(self, n: usize) -> usize {
        match self {
            Scale::Up2 => n * 2,
            Scale::Down2 => n / 2,
        }
    }
}

/// Keys cubic, a = -0.5. Weights are derived in f64 and rounded once.
fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Per-output-index source taps for one axis; indices already clamped to the
/// image (replicate boundary).
pub(crate) struct AxisTaps {
    pub idx: Vec<[u32; 4]>,
    pub w: Vec<[f32; 4]>,
}

pub(crate) fn axis_taps(len_in: usize, scale: Scale) -> AxisTaps {
    let len_out = scale.out_len(len_in);
    let inv = 1.0 / scale.factor();
    let mut idx = Vec::with_capacity(len_out);
    let mut w = Vec::with_capacity(len_out);
    for o in 0..len_out {
        // Half-pixel mapping: centers of output texels pulled back to input.
        let x = (o as f64 + 0.5) * inv - 0.5;
        let base = x.floor();
        let f = x - base;
        let mut ii = [0u32; 4];
        let mut ww = [0f32; 4];
        for d in 0..4 {
            let src = base as i64 - 1 + d as i64;
            ii[d] = src.clamp(0, len_in as i64 - 1) as u32;
            ww[d] = keys(f + 1.0 - d as f64) as f32;
        }
        idx.push(ii);
        w.push(ww);
    }
    AxisTaps { idx, w }
}

fn check(t: Shape, scale: Scale) -> Result<()> {
    let ok = match scale {
        Scale::Up2 => t.h >= 2 && t.w >= 2,
        Scale::Down2 => t.h >= 2 && t.w >= 2 && t.h % 2 == 0 && t.w % 2 == 0,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::BadShape {
            op: "resize",
            shape: t,
            why: match scale {
                Scale::Up2 => "extents must be at least 2".into(),
                Scale::Down2 => "extents must be even and at least 2".into(),
            },
        })
    }
}

/// Separable resample of every (b, c) plane. Horizontal pass first, then
/// vertical; the adjoint applies the transposes in reverse.
pub(crate) fn resize_data(x: &[f32], s: Shape, scale: Scale) -> (Shape, Vec<f32>) {
    let (oh, ow) = (scale.out_len(s.h), scale.out_len(s.w));
    let tx = axis_taps(s.w, scale);
    let ty = axis_taps(s.h, scale);
    let mut tmp = vec![0.0f32; s.h * ow];
    let mut out = vec![0.0f32; s.b * s.c * oh * ow];
    for p in 0..s.b * s.c {
        let src = &x[p * s.h * s.w..(p + 1) * s.h * s.w];
        for y in 0..s.h {
            let row = &src[y * s.w..(y + 1) * s.w];
            let dst = &mut tmp[y * ow..(y + 1) * ow];
            for ox in 0..ow {
                let (ii, ww) = (&tx.idx[ox], &tx.w[ox]);
                dst[ox] = row[ii[0] as usize] * ww[0]
                    + row[ii[1] as usize] * ww[1]
                    + row[ii[2] as usize] * ww[2]
                    + row[ii[3] as usize] * ww[3];
            }
        }
        let dst_plane = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (ii, ww) = (&ty.idx[oy], &ty.w[oy]);
            let r0 = &tmp[ii[0] as usize * ow..ii[0] as usize * ow + ow];
            let r1 = &tmp[ii[1] as usize * ow..ii[1] as usize * ow + ow];
            let r2 = &tmp[ii[2] as usize * ow..ii[2] as usize * ow + ow];
            let r3 = &tmp[ii[3] as usize * ow..ii[3] as usize * ow + ow];
            let dst = &mut dst_plane[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                dst[ox] = r0[ox] * ww[0] + r1[ox] * ww[1] + r2[ox] * ww[2] + r3[ox] * ww[3];
            }
        }
    }
    (Shape::new(s.b, s.c, oh, ow), out)
}

/// Exact adjoint of [`resize_data`] as a linear map: scatters the output
/// gradient back through both passes.
pub(crate) fn resize_adjoint(gy: &[f32], in_shape: Shape, scale: Scale) -> Vec<f32> {
    let s = in_shape;
    let (oh, ow) = (scale.out_len(s.h), scale.out_len(s.w));
    let tx = axis_taps(s.w, scale);
    let ty = axis_taps(s.h, scale);
    let mut tmp = vec![0.0f32; s.h * ow];
    let mut gx = vec![0.0f32; s.numel()];
    for p in 0..s.b * s.c {
        let gplane = &gy[p * oh * ow..(p + 1) * oh * ow];
        tmp.fill(0.0);
        // Transpose of the vertical pass.
        for oy in 0..oh {
            let (ii, ww) = (&ty.idx[oy], &ty.w[oy]);
            let grow = &gplane[oy * ow..(oy + 1) * ow];
            for d in 0..4 {
                let dst = &mut tmp[ii[d] as usize * ow..ii[d] as usize * ow + ow];
                let wd = ww[d];
                for ox in 0..ow {
                    dst[ox] += wd * grow[ox];
                }
            }
        }
        // Transpose of the horizontal pass.
        let dst_plane = &mut gx[p * s.h * s.w..(p + 1) * s.h * s.w];
        for y in 0..s.h {
            let trow = &tmp[y * ow..(y + 1) * ow];
            let drow = &mut dst_plane[y * s.w..(y + 1) * s.w];
            for ox in 0..ow {
                let (ii, ww) = (&tx.idx[ox], &tx.w[ox]);
                let g = trow[ox];
                drow[ii[0] as usize] += ww[0] * g;
                drow[ii[1] as usize] += ww[1] * g;
                drow[ii[2] as usize] += ww[2] * g;
                drow[ii[3] as usize] += ww[3] * g;
            }
        }
    }
    gx
}

/// Resample a tensor by 2x or 0.5x per axis.
pub fn resize(t: &Tensor, scale: Scale) -> Result<Tensor> {
    check(t.shape, scale)?;
    let (shape, data) = resize_data(&t.data, t.shape, scale);
    Tensor::new(shape, data)
}
