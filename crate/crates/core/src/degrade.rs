//! Ground-truth degradation operators used to simulate observation triplets.
//!
//! These work directly on band-sequential cubes and are kept separate from
//! the learnable layers in [`crate::net`], which serve as the reference they
//! are checked against.

use rayon::prelude::*;

use crate::cube::{ImageCube, SpectralCoverage};
use crate::error::{FuseError, Result};

/// Square, normalized Gaussian point spread function.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPsf {
    pub size: usize,
    pub sigma: f64,
    /// Row-major `size x size`.
    pub kernel: Vec<f64>,
}

/// Samples an isotropic Gaussian on a `size x size` grid with offsets
/// `index - (size - 1) / 2` and normalizes it to sum 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<GaussianPsf> {
    if size == 0 {
        return Err(FuseError::Config("PSF size must be at least 1".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FuseError::Config(format!(
            "PSF sigma must be positive, got {sigma}"
        )));
    }
    let center = (size as f64 - 1.0) / 2.0;
    let mut kernel = Vec::with_capacity(size * size);
    for u in 0..size {
        for v in 0..size {
            let x = u as f64 - center;
            let y = v as f64 - center;
            kernel.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);
    Ok(GaussianPsf {
        size,
        sigma,
        kernel,
    })
}

/// Strided, non-overlapping block convolution: each output pixel is the
/// kernel-weighted sum of one `k x k` input block, independently per band.
pub fn apply_psf(cube: &ImageCube, psf: &GaussianPsf) -> Result<ImageCube> {
    block_filter(cube, &psf.kernel, psf.size)
}

pub(crate) fn block_filter(cube: &ImageCube, kernel: &[f64], k: usize) -> Result<ImageCube> {
    check_divisible(cube.rows(), cube.cols(), k)?;
    assert_eq!(kernel.len(), k * k);
    let (rows, cols) = (cube.rows(), cube.cols());
    let (out_rows, out_cols) = (rows / k, cols / k);
    let mut data = vec![0.0; out_rows * out_cols * cube.bands()];
    data.par_chunks_mut(out_rows * out_cols)
        .enumerate()
        .for_each(|(b, out)| {
            let band = cube.band(b);
            for i in 0..out_rows {
                for j in 0..out_cols {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            acc += kernel[u * k + v] * band[(i * k + u) * cols + j * k + v];
                        }
                    }
                    out[i * out_cols + j] = acc;
                }
            }
        });
    ImageCube::new_unchecked_range(out_rows, out_cols, cube.bands(), data, None)
}

pub(crate) fn check_divisible(rows: usize, cols: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(FuseError::Shape("PSF size must be at least 1".into()));
    }
    if rows % k != 0 {
        return Err(FuseError::Shape(format!(
            "rows ({rows}) not divisible by PSF size {k}"
        )));
    }
    if cols % k != 0 {
        return Err(FuseError::Shape(format!(
            "cols ({cols}) not divisible by PSF size {k}"
        )));
    }
    Ok(())
}

/// Per-MSI-band weights, aligned with the coverage index sets.
pub type SrfWeights = Vec<Vec<f64>>;

/// Normalized spectral integration: band `i` of the output is
/// `sum_j w_ij x_j / sum_j w_ij` over the HSI bands covered by MSI band `i`.
pub fn apply_srf(
    cube: &ImageCube,
    cov: &SpectralCoverage,
    weights: &[Vec<f64>],
) -> Result<ImageCube> {
    check_srf_weights(cov, weights)?;
    if cube.bands() != cov.num_hsi_bands() {
        return Err(FuseError::Shape(format!(
            "cube has {} bands, coverage expects {}",
            cube.bands(),
            cov.num_hsi_bands()
        )));
    }
    let n = cube.pixels();
    let mut data = vec![0.0; n * cov.num_msi_bands()];
    for (i, (set, w)) in cov.index_sets().iter().zip(weights).enumerate() {
        let total: f64 = w.iter().sum();
        let out = &mut data[i * n..(i + 1) * n];
        for (&j, &wj) in set.iter().zip(w) {
            for (o, &x) in out.iter_mut().zip(cube.band(j)) {
                *o += wj * x;
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
    }
    ImageCube::new_unchecked_range(cube.rows(), cube.cols(), cov.num_msi_bands(), data, None)
}

pub fn check_srf_weights(cov: &SpectralCoverage, weights: &[Vec<f64>]) -> Result<()> {
    if weights.len() != cov.num_msi_bands() {
        return Err(FuseError::Shape(format!(
            "{} SRF weight vectors for {} MSI bands",
            weights.len(),
            cov.num_msi_bands()
        )));
    }
    for (i, (set, w)) in cov.index_sets().iter().zip(weights).enumerate() {
        if set.len() != w.len() {
            return Err(FuseError::Shape(format!(
                "MSI band {i}: {} weights for {} covered bands",
                w.len(),
                set.len()
            )));
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(FuseError::InvalidValue(format!(
                "MSI band {i}: SRF weights must be finite and non-negative"
            )));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(FuseError::DegenerateSrf(i));
        }
    }
    Ok(())
}

/// Low-resolution HSI, high-resolution MSI and the doubly degraded LrMSI.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub lrhsi: ImageCube,
    pub hrmsi: ImageCube,
    pub lrmsi: ImageCube,
}

/// Degrades a reference HrHSI spatially (PSF) and spectrally (SRF).
pub fn simulate_triplet(
    hrhsi: &ImageCube,
    psf: &GaussianPsf,
    cov: &SpectralCoverage,
    weights: &[Vec<f64>],
) -> Result<Triplet> {
    let mut lrhsi = apply_psf(hrhsi, psf)?;
    if let Some(w) = hrhsi.wavelengths() {
        lrhsi = lrhsi.with_wavelengths(w.to_vec())?;
    }
    let hrmsi = apply_srf(hrhsi, cov, weights)?;
    let lrmsi = apply_srf(&lrhsi, cov, weights)?;
    Ok(Triplet {
        lrhsi,
        hrmsi,
        lrmsi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::{build_coverage, linear_wavelengths};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(rows: usize, cols: usize, bands: usize, seed: u64) -> ImageCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols * bands).map(|_| rng.gen::<f64>()).collect();
        ImageCube::new(rows, cols, bands, data, None).unwrap()
    }

    #[test]
    fn kernel_size_one() {
        assert_eq!(gaussian_kernel(1, 0.3).unwrap().kernel, vec![1.0]);
        assert_eq!(gaussian_kernel(1, 7.0).unwrap().kernel, vec![1.0]);
    }

    #[test]
    fn kernel_rejects_bad_args() {
        assert!(gaussian_kernel(0, 1.0).is_err());
        assert!(gaussian_kernel(4, 0.0).is_err());
        assert!(gaussian_kernel(4, -1.0).is_err());
    }

    #[test]
    fn kernel_size4_sigma_half_matches_formula() {
        // offsets -1.5, -0.5, 0.5, 1.5; 1-D weights exp(-x^2/0.5)
        let g1: Vec<f64> = [-1.5f64, -0.5, 0.5, 1.5]
            .iter()
            .map(|x| (-x * x / 0.5).exp())
            .collect();
        let s1: f64 = g1.iter().sum();
        let psf = gaussian_kernel(4, 0.5).unwrap();
        for u in 0..4 {
            for v in 0..4 {
                let expect = g1[u] * g1[v] / (s1 * s1);
                assert!((psf.kernel[u * 4 + v] - expect).abs() < 1e-15);
            }
        }
        // center block ~0.24109 each, corners ~8.1e-5
        assert!((psf.kernel[5] - 0.241_088).abs() < 1e-5);
        assert!(psf.kernel[0] < 1e-4);
        assert!((psf.kernel.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_rotation_symmetric() {
        for &(k, s) in &[(4usize, 0.5), (8, 2.0), (3, 1.0)] {
            let psf = gaussian_kernel(k, s).unwrap();
            for u in 0..k {
                for v in 0..k {
                    let rot = psf.kernel[v * k + (k - 1 - u)];
                    assert!((psf.kernel[u * k + v] - rot).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn corner_weight_monotone_in_sigma() {
        let mut prev = 0.0;
        for s in [0.3, 0.5, 1.0, 2.0, 4.0, 10.0] {
            let c = gaussian_kernel(4, s).unwrap().kernel[0];
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn psf_delta_selects_top_left() {
        let cube = random_cube(4, 4, 2, 1);
        let mut kernel = vec![0.0; 4];
        kernel[0] = 1.0;
        let psf = GaussianPsf {
            size: 2,
            sigma: 1.0,
            kernel,
        };
        let out = apply_psf(&cube, &psf).unwrap();
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(out.get(i, j, b), cube.get(2 * i, 2 * j, b));
                }
            }
        }
    }

    #[test]
    fn psf_uniform_is_block_mean() {
        let cube = random_cube(6, 9, 1, 2);
        let psf = GaussianPsf {
            size: 3,
            sigma: 1.0,
            kernel: vec![1.0 / 9.0; 9],
        };
        let out = apply_psf(&cube, &psf).unwrap();
        let mut mean = 0.0;
        for u in 0..3 {
            for v in 0..3 {
                mean += cube.get(3 + u, 6 + v, 0);
            }
        }
        assert!((out.get(1, 2, 0) - mean / 9.0).abs() < 1e-15);
    }

    #[test]
    fn psf_gaussian_block_against_double_loop() {
        let cube = random_cube(4, 4, 1, 9);
        let psf = gaussian_kernel(4, 0.5).unwrap();
        let out = apply_psf(&cube, &psf).unwrap();
        let mut expect = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                expect += psf.kernel[r * 4 + c] * cube.get(r, c, 0);
            }
        }
        assert_eq!(out.rows(), 1);
        assert!((out.get(0, 0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn psf_divisibility_names_axis() {
        let cube = random_cube(6, 8, 1, 0);
        let psf = gaussian_kernel(4, 0.5).unwrap();
        let err = apply_psf(&cube, &psf).unwrap_err().to_string();
        assert!(err.contains("rows"), "{err}");
        let cube = random_cube(8, 6, 1, 0);
        let err = apply_psf(&cube, &psf).unwrap_err().to_string();
        assert!(err.contains("cols"), "{err}");
    }

    #[test]
    fn psf_size_one_identity() {
        let cube = random_cube(3, 5, 4, 4);
        let psf = gaussian_kernel(1, 0.5).unwrap();
        assert_eq!(apply_psf(&cube, &psf).unwrap().data(), cube.data());
    }

    #[test]
    fn psf_preserves_band_mean() {
        let cube = random_cube(16, 16, 3, 5);
        let psf = gaussian_kernel(4, 1.0).unwrap();
        let out = apply_psf(&cube, &psf).unwrap();
        for b in 0..3 {
            let m_in: f64 = cube.band(b).iter().sum::<f64>() / 256.0;
            // With a sum-1 kernel the global mean matches only on average
            // over block positions, so compare per-position means.
            let mut per_pos = [0.0; 16];
            for r in 0..16 {
                for c in 0..16 {
                    per_pos[(r % 4) * 4 + c % 4] += cube.get(r, c, b) / 16.0;
                }
            }
            let weighted: f64 = per_pos.iter().zip(&psf.kernel).map(|(a, w)| a * w).sum();
            let m_out: f64 = out.band(b).iter().sum::<f64>() / 16.0;
            assert!((m_out - weighted).abs() <= 1e-9 * weighted.abs());
            assert!(m_in > 0.0);
        }
        // A constant band keeps its value exactly.
        let flat = ImageCube::new(8, 8, 1, vec![0.37; 64], None).unwrap();
        let out = apply_psf(&flat, &psf).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() <= 1e-9 * 0.37);
        }
    }

    #[test]
    fn srf_uniform_single_band_is_spectral_mean() {
        let cube = random_cube(2, 3, 4, 6);
        let cov = build_coverage(&[1.0, 2.0, 3.0, 4.0], &[(0.0, 5.0)]).unwrap();
        let out = apply_srf(&cube, &cov, &[vec![1.0; 4]]).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let mean = (0..4).map(|b| cube.get(r, c, b)).sum::<f64>() / 4.0;
                assert!((out.get(r, c, 0) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn srf_weighted_example() {
        let cube = ImageCube::new(1, 1, 3, vec![0.2, 0.4, 0.6], None).unwrap();
        let cov = build_coverage(&[1.0, 2.0, 3.0], &[(1.0, 3.0)]).unwrap();
        let out = apply_srf(&cube, &cov, &[vec![1.0, 2.0, 1.0]]).unwrap();
        assert!((out.data()[0] - (0.2 + 0.8 + 0.6) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn srf_identity_case() {
        let cube = random_cube(3, 3, 3, 8);
        let cov = build_coverage(&[1.0, 2.0, 3.0], &[(1.5, 2.5)]).unwrap();
        for w in [0.1, 1.0, 7.5] {
            let out = apply_srf(&cube, &cov, &[vec![w]]).unwrap();
            for (a, b) in out.data().iter().zip(cube.band(1)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn srf_zero_weights_degenerate() {
        let cube = random_cube(1, 1, 2, 0);
        let cov = build_coverage(&[1.0, 2.0], &[(0.0, 3.0)]).unwrap();
        assert!(matches!(
            apply_srf(&cube, &cov, &[vec![0.0, 0.0]]),
            Err(FuseError::DegenerateSrf(0))
        ));
    }

    #[test]
    fn srf_output_is_convex_combination() {
        let cube = random_cube(5, 5, 8, 12);
        let w = linear_wavelengths(400.0, 800.0, 8);
        let cov = build_coverage(&w, &[(400.0, 600.0), (550.0, 800.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weights: SrfWeights = cov
            .index_sets()
            .iter()
            .map(|s| s.iter().map(|_| rng.gen::<f64>() + 0.01).collect())
            .collect();
        let out = apply_srf(&cube, &cov, &weights).unwrap();
        for (i, set) in cov.index_sets().iter().enumerate() {
            for r in 0..5 {
                for c in 0..5 {
                    let vals: Vec<f64> = set.iter().map(|&j| cube.get(r, c, j)).collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let v = out.get(r, c, i);
                    assert!(lo - 1e-15 <= v && v <= hi + 1e-15);
                }
            }
        }
    }

    #[test]
    fn triplet_operators_commute() {
        let w = linear_wavelengths(400.0, 1000.0, 8);
        let cube = random_cube(16, 16, 8, 77).with_wavelengths(w.clone()).unwrap();
        let cov =
            build_coverage(&w, &[(400.0, 600.0), (600.0, 800.0), (800.0, 1000.0)]).unwrap();
        let weights: SrfWeights = cov
            .index_sets()
            .iter()
            .map(|s| (0..s.len()).map(|i| 1.0 + i as f64).collect())
            .collect();
        let psf = gaussian_kernel(4, 0.5).unwrap();
        let t = simulate_triplet(&cube, &psf, &cov, &weights).unwrap();
        let other = apply_psf(&t.hrmsi, &psf).unwrap();
        let resid = t
            .lrmsi
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(resid <= 1e-10, "{resid}");
        assert_eq!((t.lrhsi.rows(), t.lrhsi.bands()), (4, 8));
        assert_eq!(t.lrhsi.wavelengths(), Some(&w[..]));
    }

    #[test]
    fn triplet_table_shapes() {
        // Houston-like: 320x320x46, ratio 8, three MSI bands
        let w = linear_wavelengths(403.0, 1047.0, 46);
        let cube = ImageCube::new(320, 320, 46, vec![0.5; 320 * 320 * 46], Some(w.clone())).unwrap();
        let cov = build_coverage(&w, &[(450.0, 515.0), (525.0, 600.0), (630.0, 680.0)]).unwrap();
        let weights: SrfWeights = cov.index_sets().iter().map(|s| vec![1.0; s.len()]).collect();
        let t = simulate_triplet(&cube, &gaussian_kernel(8, 0.5).unwrap(), &cov, &weights).unwrap();
        assert_eq!((t.hrmsi.rows(), t.hrmsi.cols(), t.hrmsi.bands()), (320, 320, 3));
        assert_eq!((t.lrhsi.rows(), t.lrhsi.cols()), (40, 40));
    }

    #[test]
    fn pavia_lrhsi_shape() {
        let cube = ImageCube::zeros(336, 336, 103);
        let out = apply_psf(&cube, &gaussian_kernel(4, 0.5).unwrap()).unwrap();
        assert_eq!((out.rows(), out.cols(), out.bands()), (84, 84, 103));
    }
}
