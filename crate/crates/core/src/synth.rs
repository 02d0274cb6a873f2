//! Synthetic scenes with planted endmembers, abundances, PSF and SRF.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cube::{build_coverage, fold, linear_wavelengths, unfold, ImageCube, Mat, SpectralCoverage};
use crate::degrade::{gaussian_kernel, simulate_triplet, GaussianPsf, SrfWeights, Triplet};
use crate::error::{FuseError, Result};

/// Minimum pairwise spectral angle between planted endmembers, in degrees.
pub const MIN_ENDMEMBER_ANGLE: f64 = 10.0;
const MAX_REJECTIONS: usize = 10_000;
/// Contrast applied to the smooth fields before the per-pixel softmax.
const ABUNDANCE_SHARPNESS: f64 = 8.0;
const ABUNDANCE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub p_true: usize,
    pub ratio: usize,
    pub sigma: f64,
    pub msi_bands: usize,
    pub first_nm: f64,
    pub last_nm: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rows: 48,
            cols: 48,
            bands: 31,
            p_true: 4,
            ratio: 4,
            sigma: 0.5,
            msi_bands: 3,
            first_nm: 400.0,
            last_nm: 1000.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub hrhsi: ImageCube,
    /// `p_true x L`, one spectrum per row.
    pub endmembers: Mat,
    /// `rows x cols x p_true`.
    pub abundances: ImageCube,
    pub psf: GaussianPsf,
    pub coverage: SpectralCoverage,
    pub srf_weights: SrfWeights,
    pub seed: u64,
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn bump_spectrum(l: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bumps = rng.gen_range(2..=4);
    let span = l.max(2) as f64 - 1.0;
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.gen_range(0.0..=span),
                rng.gen_range(0.08..0.35) * span.max(1.0),
                rng.gen_range(0.2..1.0),
            )
        })
        .collect();
    let s: Vec<f64> = (0..l)
        .map(|j| {
            params
                .iter()
                .map(|&(c, w, a)| a * (-(j as f64 - c).powi(2) / (2.0 * w * w)).exp())
                .sum()
        })
        .collect();
    let max = s.iter().copied().fold(0.0, f64::max);
    s.iter().map(|v| 0.05 + 0.9 * v / max).collect()
}

/// Smooth spectra in `[0.05, 0.95]` built from 2 to 4 Gaussian bumps, with
/// pairwise angles of at least [`MIN_ENDMEMBER_ANGLE`].
pub fn gen_endmembers(p_true: usize, bands: usize, seed: u64) -> Result<Mat> {
    if p_true < 2 {
        return Err(FuseError::Config(format!("p_true must be at least 2, got {p_true}")));
    }
    if bands == 0 {
        return Err(FuseError::Config("band count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(p_true);
    let mut attempts = 0;
    while rows.len() < p_true {
        attempts += 1;
        if attempts > MAX_REJECTIONS {
            return Err(FuseError::Config(format!(
                "could not draw {p_true} endmembers {MIN_ENDMEMBER_ANGLE} degrees apart over {bands} bands"
            )));
        }
        let s = bump_spectrum(bands, &mut rng);
        if rows.iter().all(|r| angle_deg(r, &s) >= MIN_ENDMEMBER_ANGLE) {
            rows.push(s);
        }
    }
    Mat::from_vec(p_true, bands, rows.concat())
}

/// Per-pixel simplex weights from smooth low-frequency cosine fields passed
/// through a sharpened softmax, so most pixels are dominated by one or two
/// endmembers.
pub fn gen_abundance_field(rows: usize, cols: usize, p_true: usize, seed: u64) -> Result<ImageCube> {
    if rows < 8 || cols < 8 {
        return Err(FuseError::Config(format!(
            "abundance field must be at least 8x8, got {rows}x{cols}"
        )));
    }
    if p_true == 0 {
        return Err(FuseError::Config("p_true must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows * cols;
    let mut fields = vec![0.0; n * p_true];
    for k in 0..p_true {
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(-2.5..2.5),
                    rng.gen_range(-2.5..2.5),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.3..1.0),
                )
            })
            .collect();
        let f = &mut fields[k * n..(k + 1) * n];
        for r in 0..rows {
            for c in 0..cols {
                let (u, v) = (r as f64 / rows as f64, c as f64 / cols as f64);
                f[r * cols + c] = waves
                    .iter()
                    .map(|&(fu, fv, ph, a)| a * (2.0 * PI * (fu * u + fv * v) + ph).cos())
                    .sum();
            }
        }
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        f.iter_mut().for_each(|v| *v *= ABUNDANCE_SHARPNESS / peak);
    }
    let mut data = vec![0.0; n * p_true];
    for px in 0..n {
        let max = (0..p_true).map(|k| fields[k * n + px]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..p_true).map(|k| (fields[k * n + px] - max).exp()).collect();
        let total: f64 = e.iter().sum();
        for k in 0..p_true {
            data[k * n + px] = e[k] / total;
        }
    }
    ImageCube::new(rows, cols, p_true, data, None)
}

/// Three (or `msi_bands`) equal-width contiguous intervals spanning the
/// wavelength range, with triangular weights `1 - 0.9 |l - mid| / half`.
pub fn synthetic_srf(wavelengths: &[f64], msi_bands: usize) -> Result<(SpectralCoverage, SrfWeights)> {
    if msi_bands == 0 || wavelengths.is_empty() {
        return Err(FuseError::Config("synthetic SRF needs at least one band on each side".into()));
    }
    let lo = wavelengths.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = wavelengths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / msi_bands as f64;
    let intervals: Vec<(f64, f64)> = (0..msi_bands)
        .map(|i| (lo + i as f64 * width, lo + (i + 1) as f64 * width))
        .collect();
    let cov = build_coverage(wavelengths, &intervals)?;
    let weights = cov
        .index_sets()
        .iter()
        .zip(&intervals)
        .map(|(set, &(a, b))| {
            let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
            set.iter()
                .map(|&j| {
                    let t = if half > 0.0 { (wavelengths[j] - mid).abs() / half } else { 0.0 };
                    1.0 - 0.9 * t.min(1.0)
                })
                .collect()
        })
        .collect();
    Ok((cov, weights))
}

/// Planted scene and its simulated LrHSI / HrMSI / LrMSI triplet.
pub fn gen_scene(cfg: &SceneConfig) -> Result<(SyntheticScene, Triplet)> {
    if cfg.ratio == 0 || cfg.rows % cfg.ratio != 0 || cfg.cols % cfg.ratio != 0 {
        return Err(FuseError::Config(format!(
            "scene {}x{} is not divisible by ratio {}",
            cfg.rows, cfg.cols, cfg.ratio
        )));
    }
    let endmembers = gen_endmembers(cfg.p_true, cfg.bands, cfg.seed)?;
    let abundances = gen_abundance_field(cfg.rows, cfg.cols, cfg.p_true, cfg.seed ^ ABUNDANCE_SEED_SALT)?;
    let a = unfold(&abundances);
    let (n, p, l) = (a.rows, cfg.p_true, cfg.bands);
    let mut x = Mat::zeros(n, l);
    for i in 0..n {
        let out = &mut x.data[i * l..(i + 1) * l];
        for k in 0..p {
            let w = a.data[i * p + k];
            for (o, &e) in out.iter_mut().zip(endmembers.row(k)) {
                *o += w * e;
            }
        }
    }
    x.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let wavelengths = linear_wavelengths(cfg.first_nm, cfg.last_nm, cfg.bands);
    let hrhsi = fold(&x, cfg.rows, cfg.cols)?.with_wavelengths(wavelengths.clone())?;
    let psf = gaussian_kernel(cfg.ratio, cfg.sigma)?;
    let (coverage, srf_weights) = synthetic_srf(&wavelengths, cfg.msi_bands)?;
    let triplet = simulate_triplet(&hrhsi, &psf, &coverage, &srf_weights)?;
    Ok((
        SyntheticScene {
            hrhsi,
            endmembers,
            abundances,
            psf,
            coverage,
            srf_weights,
            seed: cfg.seed,
        },
        triplet,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{apply_psf, apply_srf};

    #[test]
    fn endmembers_deterministic_and_bounded() {
        let a = gen_endmembers(2, 4, 11).unwrap();
        let b = gen_endmembers(2, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (2, 4));
        assert!(a.data.iter().all(|&v| (0.05..=0.95 + 1e-15).contains(&v)));
        assert!(gen_endmembers(1, 4, 0).is_err());
    }

    #[test]
    fn endmember_angles_over_seeds() {
        for seed in 0..100 {
            let e = gen_endmembers(4, 31, seed).unwrap();
            assert!(e.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for i in 0..4 {
                for j in 0..i {
                    assert!(angle_deg(e.row(i), e.row(j)) >= MIN_ENDMEMBER_ANGLE);
                }
            }
        }
    }

    #[test]
    fn abundances_on_simplex() {
        let a = gen_abundance_field(16, 12, 5, 3).unwrap();
        for px in 0..a.pixels() {
            let s: f64 = (0..5).map(|k| a.band(k)[px]).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(a.data().iter().all(|&v| v >= 0.0));
        let one = gen_abundance_field(8, 8, 1, 0).unwrap();
        assert!(one.data().iter().all(|&v| v == 1.0));
        assert!(gen_abundance_field(4, 8, 2, 0).is_err());
    }

    #[test]
    fn abundances_are_sparse() {
        for seed in 0..50 {
            let a = gen_abundance_field(48, 48, 4, seed).unwrap();
            let small = a.data().iter().filter(|&&v| v < 0.1).count();
            let frac = small as f64 / a.data().len() as f64;
            assert!(frac >= 0.5, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn default_scene_shapes() {
        let (scene, t) = gen_scene(&SceneConfig::default()).unwrap();
        assert_eq!((scene.hrhsi.rows(), scene.hrhsi.cols(), scene.hrhsi.bands()), (48, 48, 31));
        assert_eq!((t.lrhsi.rows(), t.lrhsi.cols(), t.lrhsi.bands()), (12, 12, 31));
        assert_eq!((t.hrmsi.rows(), t.hrmsi.cols(), t.hrmsi.bands()), (48, 48, 3));
        assert_eq!((t.lrmsi.rows(), t.lrmsi.cols(), t.lrmsi.bands()), (12, 12, 3));
        assert!(scene.hrhsi.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(gen_scene(&SceneConfig {
            rows: 50,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig {
            rows: 16,
            cols: 16,
            seed: 5,
            ..Default::default()
        };
        let (a, ta) = gen_scene(&cfg).unwrap();
        let (b, tb) = gen_scene(&cfg).unwrap();
        assert_eq!(a.hrhsi, b.hrhsi);
        assert_eq!(ta.lrhsi, tb.lrhsi);
        assert_eq!(ta.hrmsi, tb.hrmsi);
    }

    #[test]
    fn planted_scene_commutes() {
        let cfg = SceneConfig {
            rows: 24,
            cols: 24,
            seed: 2,
            ..Default::default()
        };
        let (scene, t) = gen_scene(&cfg).unwrap();
        // Z = PSF(A) E
        let ah = unfold(&apply_psf(&scene.abundances, &scene.psf).unwrap());
        let z = unfold(&t.lrhsi);
        let e = &scene.endmembers;
        for i in 0..z.rows {
            for j in 0..z.cols {
                let v: f64 = (0..e.rows).map(|k| ah.get(i, k) * e.get(k, j)).sum();
                assert!((v - z.get(i, j)).abs() <= 1e-10);
            }
        }
        // Y = A (SRF(E))
        let e_cube = fold(e, 1, e.rows).unwrap();
        let e_msi = unfold(&apply_srf(&e_cube, &scene.coverage, &scene.srf_weights).unwrap());
        let a = unfold(&scene.abundances);
        let y = unfold(&t.hrmsi);
        for i in 0..y.rows {
            for j in 0..y.cols {
                let v: f64 = (0..e.rows).map(|k| a.get(i, k) * e_msi.get(k, j)).sum();
                assert!((v - y.get(i, j)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn triangular_srf() {
        let wl = linear_wavelengths(400.0, 1000.0, 31);
        let (cov, w) = synthetic_srf(&wl, 3).unwrap();
        assert_eq!(cov.num_msi_bands(), 3);
        for (set, ws) in cov.index_sets().iter().zip(&w) {
            assert!(!set.is_empty());
            assert!(ws.iter().all(|&v| (0.1 - 1e-12..=1.0).contains(&v)));
        }
        // covers every HSI band
        let mut hit = vec![false; 31];
        cov.index_sets().iter().flatten().for_each(|&j| hit[j] = true);
        assert!(hit.iter().all(|&h| h));
    }
}
