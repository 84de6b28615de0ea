//! Laplacian pyramid decomposition and its guided-fusion variant.
//!
//! `decompose` produces the classic three-level pyramid of an image:
//! band-pass residuals at full and half resolution plus a quarter-resolution
//! base. The modified form used by the fusion network swaps the base for the
//! low-resolution thermal frame, so the network predicts per-band corrections
//! and `collapse` reassembles the result. Collapse inverts decompose exactly
//! (up to float rounding): each residual is defined as the difference against
//! the upsampled coarser level, so adding it back cancels term by term.

use crate::tensor::{resize, Scale, Shape, Tensor};
use crate::{Error, Result};

/// ITU-R BT.601 luma weights.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Collapse a 3-channel image to luminance. Single-channel input passes
/// through untouched.
pub fn grayscale(x: &Tensor) -> Result<Tensor> {
    match x.shape.c {
        1 => Ok(x.clone()),
        3 => {
            let s = x.shape;
            let plane = s.plane();
            let mut data = vec![0.0f32; s.b * plane];
            for b in 0..s.b {
                for (ch, &w) in LUMA.iter().enumerate() {
                    let src = &x.data[(b * 3 + ch) * plane..(b * 3 + ch + 1) * plane];
                    for (d, &v) in data[b * plane..(b + 1) * plane].iter_mut().zip(src) {
                        *d += w * v;
                    }
                }
            }
            Tensor::new(Shape::new(s.b, 1, s.h, s.w), data)
        }
        _ => Err(Error::BadShape {
            op: "grayscale",
            shape: x.shape,
            why: "expected 1 or 3 channels".into(),
        }),
    }
}

/// Three-level pyramid of one image: `high` and `mid` are band-pass
/// residuals at full and half resolution, `low` is the quarter-resolution
/// base.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub high: Tensor,
    pub mid: Tensor,
    pub low: Tensor,
}

fn check_divisible(s: Shape) -> Result<()> {
    if s.h % 4 != 0 || s.w % 4 != 0 || s.h < 8 || s.w < 8 {
        return Err(Error::BadShape {
            op: "pyramid",
            shape: s,
            why: "extents must be multiples of 4 and at least 8".into(),
        });
    }
    Ok(())
}

/// Decompose an image into band-pass residuals plus a quarter-resolution
/// base. Extents must be divisible by 4 (two halvings) and at least 8.
pub fn decompose(x: &Tensor) -> Result<Pyramid> {
    check_divisible(x.shape)?;
    let g1 = resize(x, Scale::Down2)?;
    let g2 = resize(&g1, Scale::Down2)?;
    let high = x.sub(&resize(&g1, Scale::Up2)?)?;
    let mid = g1.sub(&resize(&g2, Scale::Up2)?)?;
    Ok(Pyramid {
        high,
        mid,
        low: g2,
    })
}

/// Pyramid variant consumed by the fusion network: band-pass structure from
/// the guide image, base level replaced by the low-resolution thermal frame.
/// The guide must be exactly 4x the thermal in both extents.
pub fn build_modified(guide: &Tensor, thermal_lr: &Tensor) -> Result<Pyramid> {
    let (gs, ts) = (guide.shape, thermal_lr.shape);
    if gs.b != ts.b || gs.h != ts.h * 4 || gs.w != ts.w * 4 {
        return Err(Error::ShapeMismatch {
            op: "build_modified",
            a: gs,
            b: ts,
        });
    }
    let p = decompose(guide)?;
    Ok(Pyramid {
        high: p.high,
        mid: p.mid,
        low: thermal_lr.clone(),
    })
}

/// Reassemble an image from pyramid levels: low is upsampled and added to
/// mid, the sum is upsampled and added to high. No clamping is applied.
pub fn collapse(p: &Pyramid) -> Result<Tensor> {
    let mid_sum = p.mid.add(&resize(&p.low, Scale::Up2)?)?;
    p.high.add(&resize(&mid_sum, Scale::Up2)?)
}

/// Convenience 4x upsample (two doublings).
pub fn upsample4(x: &Tensor) -> Result<Tensor> {
    resize(&resize(x, Scale::Up2)?, Scale::Up2)
}
