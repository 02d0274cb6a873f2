//! Dense image cubes, pixel matrices and spectral coverage tables.
//!
//! Cubes are stored band-sequential (BSQ): `data[b * rows * cols + r * cols + c]`.
//! The network works on the unfolded form, a pixel-major matrix with one
//! spectrum per row, so every 1x1 convolution becomes a plain matrix product.

use crate::error::{FuseError, Result};

/// Values within this distance outside `[0, 1]` still pass validation.
pub const RANGE_TOLERANCE: f64 = 1e-9;

/// Row-major dense matrix. For unfolded cubes, rows are pixels and columns
/// are bands (or abundance channels).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FuseError::Shape(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// A `rows x cols x bands` reflectance cube.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCube {
    rows: usize,
    cols: usize,
    bands: usize,
    data: Vec<f64>,
    wavelengths: Option<Vec<f64>>,
}

impl ImageCube {
    /// Builds a cube from BSQ data, enforcing every cube invariant.
    pub fn new(
        rows: usize,
        cols: usize,
        bands: usize,
        data: Vec<f64>,
        wavelengths: Option<Vec<f64>>,
    ) -> Result<Self> {
        let cube = Self::new_unchecked_range(rows, cols, bands, data, wavelengths)?;
        cube.check_range()?;
        Ok(cube)
    }

    /// Like [`ImageCube::new`] but only checks shape, finiteness and the
    /// wavelength grid. Used by loaders that normalize afterwards.
    pub fn new_unchecked_range(
        rows: usize,
        cols: usize,
        bands: usize,
        data: Vec<f64>,
        wavelengths: Option<Vec<f64>>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(FuseError::Shape(format!(
                "cube dimensions must be positive, got {rows}x{cols}x{bands}"
            )));
        }
        if data.len() != rows * cols * bands {
            return Err(FuseError::Shape(format!(
                "cube {rows}x{cols}x{bands} needs {} values, got {}",
                rows * cols * bands,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FuseError::InvalidValue(format!(
                "non-finite value {} at index {i}",
                data[i]
            )));
        }
        if let Some(w) = &wavelengths {
            check_wavelengths(w, bands)?;
        }
        Ok(ImageCube {
            rows,
            cols,
            bands,
            data,
            wavelengths,
        })
    }

    pub fn zeros(rows: usize, cols: usize, bands: usize) -> Self {
        ImageCube {
            rows,
            cols,
            bands,
            data: vec![0.0; rows * cols * bands],
            wavelengths: None,
        }
    }

    fn check_range(&self) -> Result<()> {
        if let Some(i) = self
            .data
            .iter()
            .position(|&v| v < -RANGE_TOLERANCE || v > 1.0 + RANGE_TOLERANCE)
        {
            return Err(FuseError::InvalidValue(format!(
                "value {} at index {i} outside [0, 1]",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    pub fn with_wavelengths(mut self, wavelengths: Vec<f64>) -> Result<Self> {
        check_wavelengths(&wavelengths, self.bands)?;
        self.wavelengths = Some(wavelengths);
        Ok(self)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, b: usize) -> f64 {
        self.data[(b * self.rows + r) * self.cols + c]
    }

    /// Contiguous slice of one band.
    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[b * n..(b + 1) * n]
    }

    /// Rescales all values linearly so the cube spans exactly `[0, 1]`.
    /// A constant cube maps to all zeros.
    pub fn min_max_normalized(&self) -> ImageCube {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = self
            .data
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        ImageCube {
            data,
            ..self.clone()
        }
    }

    pub fn validate_range(&self) -> Result<()> {
        self.check_range()
    }
}

fn check_wavelengths(w: &[f64], bands: usize) -> Result<()> {
    if w.len() != bands {
        return Err(FuseError::Shape(format!(
            "{} wavelengths for {bands} bands",
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) || w.windows(2).any(|p| p[1] <= p[0]) {
        return Err(FuseError::InvalidValue(
            "wavelengths must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Unfolds a cube into a `pixels x bands` matrix; row `k` is the spectrum of
/// pixel `k` in row-major pixel order.
pub fn unfold(cube: &ImageCube) -> Mat {
    let n = cube.pixels();
    let l = cube.bands;
    let mut data = vec![0.0; n * l];
    for b in 0..l {
        for (k, &v) in cube.band(b).iter().enumerate() {
            data[k * l + b] = v;
        }
    }
    Mat {
        rows: n,
        cols: l,
        data,
    }
}

/// Inverse of [`unfold`]. Does not range-check: network outputs (for example
/// unclamped PSF responses) are folded too.
pub fn fold(mat: &Mat, rows: usize, cols: usize) -> Result<ImageCube> {
    if rows == 0 || cols == 0 || mat.rows != rows * cols {
        return Err(FuseError::Shape(format!(
            "cannot fold {} pixel rows into {rows}x{cols}",
            mat.rows
        )));
    }
    let n = mat.rows;
    let l = mat.cols;
    let mut data = vec![0.0; n * l];
    for k in 0..n {
        for b in 0..l {
            data[b * n + k] = mat.data[k * l + b];
        }
    }
    ImageCube::new_unchecked_range(rows, cols, l, data, None)
}

/// Elementwise `min(max(x, 0), 1)`.
///
/// Its derivative is taken as 1 on the open interval `(0, 1)` and 0
/// elsewhere; the gradient tape uses the same convention.
pub fn clamp01(x: &[f64]) -> Result<Vec<f64>> {
    x.iter()
        .map(|&v| {
            if v.is_nan() {
                Err(FuseError::InvalidValue("NaN passed to clamp01".into()))
            } else {
                Ok(v.clamp(0.0, 1.0))
            }
        })
        .collect()
}

/// Which HSI bands feed each MSI band.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoverage {
    msi_bands: Vec<(f64, f64)>,
    index_sets: Vec<Vec<usize>>,
    hsi_bands: usize,
}

impl SpectralCoverage {
    pub fn msi_bands(&self) -> &[(f64, f64)] {
        &self.msi_bands
    }

    pub fn index_sets(&self) -> &[Vec<usize>] {
        &self.index_sets
    }

    pub fn num_msi_bands(&self) -> usize {
        self.msi_bands.len()
    }

    pub fn num_hsi_bands(&self) -> usize {
        self.hsi_bands
    }

    /// Total number of (MSI band, HSI band) pairs, i.e. the SRF weight count.
    pub fn num_weights(&self) -> usize {
        self.index_sets.iter().map(Vec::len).sum()
    }

    /// Offsets of each MSI band's weights inside a flat weight vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.index_sets.len() + 1);
        let mut acc = 0;
        out.push(0);
        for set in &self.index_sets {
            acc += set.len();
            out.push(acc);
        }
        out
    }

    /// Rebuilds a coverage from explicit index sets (checkpoint loading).
    pub fn from_index_sets(
        msi_bands: Vec<(f64, f64)>,
        index_sets: Vec<Vec<usize>>,
        hsi_bands: usize,
    ) -> Result<Self> {
        if msi_bands.len() != index_sets.len() {
            return Err(FuseError::Shape(
                "coverage intervals and index sets differ in length".into(),
            ));
        }
        for (i, set) in index_sets.iter().enumerate() {
            if set.is_empty() {
                let (low, high) = msi_bands[i];
                return Err(FuseError::EmptyCoverage { band: i, low, high });
            }
            if set.iter().any(|&j| j >= hsi_bands) || set.windows(2).any(|w| w[1] <= w[0]) {
                return Err(FuseError::Config(format!(
                    "coverage index set {i} is not a sorted subset of 0..{hsi_bands}"
                )));
            }
        }
        Ok(SpectralCoverage {
            msi_bands,
            index_sets,
            hsi_bands,
        })
    }
}

/// Assigns every HSI band whose center lies in `[low, high]` (inclusive) to
/// that MSI band. Intervals may overlap.
pub fn build_coverage(
    hsi_wavelengths: &[f64],
    msi_intervals: &[(f64, f64)],
) -> Result<SpectralCoverage> {
    check_wavelengths(hsi_wavelengths, hsi_wavelengths.len())?;
    if msi_intervals.is_empty() {
        return Err(FuseError::Config("no MSI bands given".into()));
    }
    let mut index_sets = Vec::with_capacity(msi_intervals.len());
    for (band, &(low, high)) in msi_intervals.iter().enumerate() {
        if !(low.is_finite() && high.is_finite()) || low >= high {
            return Err(FuseError::Config(format!(
                "MSI band {band}: degenerate interval ({low}, {high})"
            )));
        }
        let set: Vec<usize> = hsi_wavelengths
            .iter()
            .enumerate()
            .filter(|(_, &w)| low <= w && w <= high)
            .map(|(j, _)| j)
            .collect();
        if set.is_empty() {
            return Err(FuseError::EmptyCoverage { band, low, high });
        }
        index_sets.push(set);
    }
    Ok(SpectralCoverage {
        msi_bands: msi_intervals.to_vec(),
        index_sets,
        hsi_bands: hsi_wavelengths.len(),
    })
}

/// Evenly spaced band centers, inclusive of both ends.
pub fn linear_wavelengths(first_nm: f64, last_nm: f64, bands: usize) -> Vec<f64> {
    if bands == 1 {
        return vec![first_nm];
    }
    let step = (last_nm - first_nm) / (bands - 1) as f64;
    (0..bands).map(|i| first_nm + step * i as f64).collect()
}
