//! PSNR/SSIM and dataset-level evaluation reports.
//!
//! PSNR uses peak 1.0 (images are normalized) and returns +inf for identical
//! inputs; infinite rows are excluded from the mean with the excluded count
//! recorded. SSIM uses the reference 11x11 Gaussian window (sigma 1.5,
//! K1 = 0.01, K2 = 0.03, dynamic range 1.0), valid-mode windows only, and
//! averages per-channel scores for multi-channel images.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::SamplePair;
use crate::pyramid;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// 10*log10(peak^2 / mse), +inf when the images are identical.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            a: a.shape,
            b: b.shape,
        });
    }
    if peak <= 0.0 {
        return Err(Error::Invalid {
            op: "psnr",
            why: format!("peak must be positive, got {peak}"),
        });
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        / a.shape.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of normalized images.
const SSIM_L: f64 = 1.0;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM over all valid 11x11 windows; channels (and batch entries) are
/// averaged. Extents must be at least the window size.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            a: a.shape,
            b: b.shape,
        });
    }
    let s = a.shape;
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::BadShape {
            op: "ssim",
            shape: s,
            why: format!("extents must be at least {SSIM_WINDOW}"),
        });
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let plane = s.plane();
    let mut plane_scores = 0.0f64;
    for p in 0..s.b * s.c {
        let xa = &a.data[p * plane..(p + 1) * plane];
        let xb = &b.data[p * plane..(p + 1) * plane];
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for y0 in 0..=s.h - SSIM_WINDOW {
            for x0 in 0..=s.w - SSIM_WINDOW {
                let mut mx = 0.0f64;
                let mut my = 0.0f64;
                let mut mxx = 0.0f64;
                let mut myy = 0.0f64;
                let mut mxy = 0.0f64;
                for wy in 0..SSIM_WINDOW {
                    let row = (y0 + wy) * s.w + x0;
                    for wx in 0..SSIM_WINDOW {
                        let w = win[wy * SSIM_WINDOW + wx];
                        let va = f64::from(xa[row + wx]);
                        let vb = f64::from(xb[row + wx]);
                        mx += w * va;
                        my += w * vb;
                        mxx += w * va * va;
                        myy += w * vb * vb;
                        mxy += w * va * vb;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cxy = mxy - mx * my;
                let score = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += score;
                count += 1;
            }
        }
        plane_scores += acc / count as f64;
    }
    Ok(plane_scores / (s.b * s.c) as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-sample metrics plus dataset means. `mean_psnr` averages only finite
/// rows (identical-image samples produce the +inf sentinel); `finite_psnr`
/// counts the rows included.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: Option<f64>,
    pub finite_psnr: usize,
    pub mean_ssim: f64,
}

impl EvalReport {
    /// Per-sample CSV: `id,psnr,ssim`, one row per sample, infinities as
    /// "inf".
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,psnr,ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.id, r.psnr, r.ssim));
        }
        fs::write(path, out).map_err(Error::io(path))
    }

    /// Summary JSON: fingerprint, counts, means.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            fingerprint: &'a str,
            samples: usize,
            finite_psnr: usize,
            mean_psnr: Option<f64>,
            mean_ssim: f64,
        }
        let s = Summary {
            fingerprint: &self.fingerprint,
            samples: self.rows.len(),
            finite_psnr: self.finite_psnr,
            mean_psnr: self.mean_psnr,
            mean_ssim: self.mean_ssim,
        };
        let json = serde_json::to_string_pretty(&s).expect("summary serializes");
        fs::write(path, json + "\n").map_err(Error::io(path))
    }
}

/// Full-image evaluation of a predictor over a split. The predictor maps a
/// sample to its super-resolved thermal image; rows keep the split's order.
pub fn evaluate<F>(samples: &[SamplePair], mut predict: F, fingerprint: &str) -> Result<EvalReport>
where
    F: FnMut(&SamplePair) -> Result<Tensor>,
{
    if samples.is_empty() {
        return Err(Error::Dataset {
            why: "cannot evaluate an empty split".into(),
        });
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict(s)?;
        rows.push(EvalRow {
            id: s.id.clone(),
            psnr: psnr(&pred, &s.thermal_hr, 1.0)?,
            ssim: ssim(&pred, &s.thermal_hr)?,
        });
    }
    let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|v| v.is_finite()).collect();
    let mean_psnr = if finite.is_empty() {
        None
    } else {
        Some(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        fingerprint: fingerprint.into(),
        rows,
        mean_psnr,
        finite_psnr: finite.len(),
        mean_ssim,
    })
}

/// The comparison floor: plain bicubic 4x upsampling of the low-resolution
/// thermal frame, clamped to [0,1].
pub fn bicubic_baseline(sample: &SamplePair) -> Result<Tensor> {
    Ok(pyramid::upsample4(&sample.thermal_lr)?.clamped01())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Shape};

    fn noisy(base: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
        let data = base
            .data
            .iter()
            .map(|&v| (f64::from(v) + sigma * rng.normal()).clamp(0.0, 1.0) as f32)
            .collect();
        Tensor::new(base.shape, data).unwrap()
    }

    #[test]
    fn psnr_formula_cases() {
        // mse 0.01 -> 20 dB: b differs from a by 0.1 everywhere.
        let a = Tensor::filled(Shape::new(1, 1, 8, 8), 0.3);
        let b = Tensor::filled(Shape::new(1, 1, 8, 8), 0.4);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-3);
        // uniform 0 vs uniform 0.5 -> 10*log10(1/0.25).
        let z = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let h = Tensor::filled(Shape::new(1, 1, 4, 4), 0.5);
        assert!((psnr(&z, &h, 1.0).unwrap() - 6.0206).abs() < 1e-3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let rng = Rng::new(17);
        let base = Tensor::new(
            Shape::new(1, 1, 32, 32),
            (0..1024).map(|i| 0.2 + 0.6 * ((i % 53) as f32 / 52.0)).collect(),
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for sigma in [0.01f64, 0.02, 0.05] {
            let mut r = rng.fork(sigma.to_bits());
            let v = psnr(&base, &noisy(&base, sigma, &mut r), 1.0).unwrap();
            assert!(v < last, "psnr not decreasing at sigma {sigma}: {v} vs {last}");
            last = v;
        }
    }

    #[test]
    fn ssim_self_and_symmetry() {
        let mut rng = Rng::new(23);
        let a = noisy(&Tensor::filled(Shape::new(1, 1, 24, 24), 0.5), 0.2, &mut rng);
        let b = noisy(&Tensor::filled(Shape::new(1, 1, 24, 24), 0.5), 0.2, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-7);
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn ssim_zero_variance_closed_form() {
        // Constant images: variances and covariance vanish, the structure
        // term is c2/c2 = 1, leaving the luminance ratio.
        let m1 = 0.4f64;
        let m2 = 0.5f64;
        let a = Tensor::filled(Shape::new(1, 1, 16, 16), m1 as f32);
        let b = Tensor::filled(Shape::new(1, 1, 16, 16), m2 as f32);
        let c1 = 1e-4;
        let want = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn ssim_window_too_small_rejected() {
        let a = Tensor::zeros(Shape::new(1, 1, 10, 32));
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn evaluate_oracle_and_means() {
        let samples: Vec<SamplePair> = (0..3)
            .map(|i| {
                let mut rng = Rng::new(i as u64);
                let hr = noisy(&Tensor::filled(Shape::new(1, 1, 16, 16), 0.5), 0.15, &mut rng);
                SamplePair {
                    id: format!("s{i}"),
                    guide: hr.clone(),
                    thermal_lr: Tensor::filled(Shape::new(1, 1, 4, 4), 0.5),
                    thermal_hr: hr,
                }
            })
            .collect();
        // Oracle predictor: returns the ground truth.
        let rep = evaluate(&samples, |s| Ok(s.thermal_hr.clone()), "oracle").unwrap();
        assert_eq!(rep.finite_psnr, 0);
        assert!(rep.mean_psnr.is_none());
        assert!((rep.mean_ssim - 1.0).abs() < 1e-6);
        assert!(rep.rows.iter().all(|r| r.psnr.is_infinite()));
        // Means recomputed from rows match.
        let rep2 = evaluate(&samples, bicubic_baseline, "baseline").unwrap();
        let m = rep2.rows.iter().map(|r| r.psnr).sum::<f64>() / 3.0;
        assert!((rep2.mean_psnr.unwrap() - m).abs() < 1e-9);
        assert!(evaluate(&[], |s| Ok(s.thermal_hr.clone()), "x").is_err());
    }
}
