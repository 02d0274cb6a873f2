//! Fusion quality measures: PSNR, SAM, ERGAS, RMSE and MRAE.
//!
//! Conventions:
//! - PSNR peak is the per-band maximum of the reference; exact bands are
//!   capped at [`PSNR_CAP`] dB.
//! - `ERGAS = 100 / ratio * sqrt(mean_b (RMSE_b / mean(ref_b))^2)`.
//! - MRAE divides by `max(ref, 1e-3)`.
//! - SAM skips pixels whose reference spectrum has zero norm.

use serde::Serialize;

use crate::cube::ImageCube;
use crate::error::{FuseError, Result};

pub const PSNR_CAP: f64 = 100.0;
pub const EPS_MRAE: f64 = 1e-3;

fn check_same(a: &ImageCube, b: &ImageCube) -> Result<()> {
    if (a.rows(), a.cols(), a.bands()) != (b.rows(), b.cols(), b.bands()) {
        return Err(FuseError::Shape(format!(
            "reference {}x{}x{} vs estimate {}x{}x{}",
            a.rows(),
            a.cols(),
            a.bands(),
            b.rows(),
            b.cols(),
            b.bands()
        )));
    }
    Ok(())
}

fn band_mse(r: &[f64], e: &[f64]) -> f64 {
    r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.len() as f64
}

/// PSNR of every band in dB.
pub fn psnr_per_band(reference: &ImageCube, estimate: &ImageCube) -> Result<Vec<f64>> {
    check_same(reference, estimate)?;
    Ok((0..reference.bands())
        .map(|b| {
            let r = reference.band(b);
            let mse = band_mse(r, estimate.band(b));
            if mse == 0.0 {
                return PSNR_CAP;
            }
            let peak = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // all-zero reference band: fall back to unit peak
            let peak = if peak > 0.0 { peak } else { 1.0 };
            (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
        })
        .collect())
}

pub fn mpsnr(reference: &ImageCube, estimate: &ImageCube) -> Result<f64> {
    let v = psnr_per_band(reference, estimate)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Spectral angle in degrees; `None` when the reference has zero norm.
/// Uses `2 atan2(|u - v|, |u + v|)` on the unit vectors, which is exact for
/// identical directions.
pub fn sam_pixel(reference: &[f64], estimate: &[f64]) -> Option<f64> {
    let nr = reference.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ne = estimate.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nr == 0.0 {
        return None;
    }
    if ne == 0.0 {
        return Some(90.0);
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in reference.iter().zip(estimate) {
        let (u, v) = (a / nr, b / ne);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Some((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees())
}

/// Per-pixel SAM map (0 for skipped pixels) and the number skipped.
pub fn sam_map(reference: &ImageCube, estimate: &ImageCube) -> Result<(Vec<f64>, usize)> {
    check_same(reference, estimate)?;
    let n = reference.pixels();
    let l = reference.bands();
    let mut map = vec![0.0; n];
    let mut skipped = 0;
    let mut r = vec![0.0; l];
    let mut e = vec![0.0; l];
    for (k, m) in map.iter_mut().enumerate() {
        for b in 0..l {
            r[b] = reference.band(b)[k];
            e[b] = estimate.band(b)[k];
        }
        match sam_pixel(&r, &e) {
            Some(a) => *m = a,
            None => skipped += 1,
        }
    }
    Ok((map, skipped))
}

/// Mean SAM over pixels with a non-zero reference spectrum.
pub fn msam(reference: &ImageCube, estimate: &ImageCube) -> Result<f64> {
    let (map, skipped) = sam_map(reference, estimate)?;
    let counted = map.len() - skipped;
    if counted == 0 {
        return Ok(0.0);
    }
    Ok(map.iter().sum::<f64>() / counted as f64)
}

pub fn ergas(reference: &ImageCube, estimate: &ImageCube, ratio: f64) -> Result<f64> {
    check_same(reference, estimate)?;
    if !(ratio > 0.0) {
        return Err(FuseError::Config(format!("ERGAS ratio must be positive, got {ratio}")));
    }
    let l = reference.bands();
    let mut acc = 0.0;
    for b in 0..l {
        let r = reference.band(b);
        let rmse = band_mse(r, estimate.band(b)).sqrt();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        if rmse > 0.0 {
            acc += (rmse / mean) * (rmse / mean);
        }
    }
    Ok(100.0 / ratio * (acc / l as f64).sqrt())
}

pub fn rmse(reference: &ImageCube, estimate: &ImageCube) -> Result<f64> {
    check_same(reference, estimate)?;
    Ok(band_mse(reference.data(), estimate.data()).sqrt())
}

/// Per-pixel RMSE over bands.
pub fn rmse_map(reference: &ImageCube, estimate: &ImageCube) -> Result<Vec<f64>> {
    check_same(reference, estimate)?;
    let n = reference.pixels();
    let mut acc = vec![0.0; n];
    for b in 0..reference.bands() {
        for ((a, r), e) in acc.iter_mut().zip(reference.band(b)).zip(estimate.band(b)) {
            *a += (r - e) * (r - e);
        }
    }
    let l = reference.bands() as f64;
    Ok(acc.into_iter().map(|s| (s / l).sqrt()).collect())
}

fn rel_abs(r: f64, e: f64) -> f64 {
    (r - e).abs() / r.max(EPS_MRAE)
}

pub fn mrae(reference: &ImageCube, estimate: &ImageCube) -> Result<f64> {
    check_same(reference, estimate)?;
    let s: f64 = reference.data().iter().zip(estimate.data()).map(|(&r, &e)| rel_abs(r, e)).sum();
    Ok(s / reference.data().len() as f64)
}

/// Per-pixel MRAE over bands.
pub fn mrae_map(reference: &ImageCube, estimate: &ImageCube) -> Result<Vec<f64>> {
    check_same(reference, estimate)?;
    let n = reference.pixels();
    let mut acc = vec![0.0; n];
    for b in 0..reference.bands() {
        for ((a, &r), &e) in acc.iter_mut().zip(reference.band(b)).zip(estimate.band(b)) {
            *a += rel_abs(r, e);
        }
    }
    let l = reference.bands() as f64;
    Ok(acc.into_iter().map(|s| s / l).collect())
}

/// RMSE between two kernels after normalizing each to sum 1.
pub fn psf_kernel_error(learned: &[f64], truth: &[f64]) -> Result<f64> {
    if learned.len() != truth.len() || learned.is_empty() {
        return Err(FuseError::Shape(format!(
            "kernel sizes differ: {} vs {}",
            learned.len(),
            truth.len()
        )));
    }
    let sl: f64 = learned.iter().sum();
    let st: f64 = truth.iter().sum();
    if sl <= 0.0 || st <= 0.0 {
        return Err(FuseError::InvalidValue("kernel sums must be positive".into()));
    }
    let mse = learned
        .iter()
        .zip(truth)
        .map(|(a, b)| (a / sl - b / st).powi(2))
        .sum::<f64>()
        / learned.len() as f64;
    Ok(mse.sqrt())
}

/// Scalars plus per-band PSNR and per-pixel maps (row-major, `rows x cols`).
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub mpsnr: f64,
    pub msam: f64,
    pub ergas: f64,
    pub rmse: f64,
    pub mrae: f64,
    pub psnr_per_band: Vec<f64>,
    pub sam_skipped_pixels: usize,
    #[serde(skip)]
    pub rmse_map: Vec<f64>,
    #[serde(skip)]
    pub mrae_map: Vec<f64>,
    #[serde(skip)]
    pub sam_map: Vec<f64>,
}

pub fn evaluate(reference: &ImageCube, estimate: &ImageCube, ratio: f64) -> Result<MetricsReport> {
    let psnr = psnr_per_band(reference, estimate)?;
    let (sam_map, skipped) = sam_map(reference, estimate)?;
    let counted = sam_map.len() - skipped;
    Ok(MetricsReport {
        mpsnr: psnr.iter().sum::<f64>() / psnr.len() as f64,
        msam: if counted == 0 {
            0.0
        } else {
            sam_map.iter().sum::<f64>() / counted as f64
        },
        ergas: ergas(reference, estimate, ratio)?,
        rmse: rmse(reference, estimate)?,
        mrae: mrae(reference, estimate)?,
        psnr_per_band: psnr,
        sam_skipped_pixels: skipped,
        rmse_map: rmse_map(reference, estimate)?,
        mrae_map: mrae_map(reference, estimate)?,
        sam_map,
    })
}
