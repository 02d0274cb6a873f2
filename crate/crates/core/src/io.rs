//! File formats: raw cubes with JSON sidecars, coverage tables, CSV dumps
//! and 8-bit PGM heatmaps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cube::{build_coverage, ImageCube, Mat, SpectralCoverage};
use crate::error::{FuseError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub dtype: String,
    pub interleave: String,
    #[serde(default)]
    pub wavelengths_nm: Vec<f64>,
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| FuseError::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| FuseError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| FuseError::format(path, e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| FuseError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FuseError::format(path, e.to_string()))
}

/// Writes little-endian f32 band-sequential data plus the sidecar.
pub fn write_cube(path: &Path, cube: &ImageCube) -> Result<()> {
    let mut bytes = Vec::with_capacity(cube.data().len() * 4);
    for &v in cube.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)?;
    let header = CubeHeader {
        rows: cube.rows(),
        cols: cube.cols(),
        bands: cube.bands(),
        dtype: "f32le".into(),
        interleave: "bsq".into(),
        wavelengths_nm: cube.wavelengths().map(<[f64]>::to_vec).unwrap_or_default(),
    };
    write_json(&sidecar_path(path), &header)
}

pub fn read_cube(path: &Path) -> Result<ImageCube> {
    let side = sidecar_path(path);
    let header: CubeHeader = read_json(&side)?;
    if header.dtype != "f32le" || header.interleave != "bsq" {
        return Err(FuseError::format(
            &side,
            format!(
                "unsupported dtype/interleave {}/{} (expected f32le/bsq)",
                header.dtype, header.interleave
            ),
        ));
    }
    let bytes = fs::read(path).map_err(|e| FuseError::io(path, e))?;
    let expect = header.rows * header.cols * header.bands * 4;
    if bytes.len() != expect {
        return Err(FuseError::format(
            path,
            format!("expected {expect} bytes for {}x{}x{}, found {}", header.rows, header.cols, header.bands, bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let wl = (!header.wavelengths_nm.is_empty()).then_some(header.wavelengths_nm);
    ImageCube::new(header.rows, header.cols, header.bands, data, wl).map_err(|e| FuseError::format(path, e.to_string()))
}

#[derive(Debug, Deserialize)]
struct CoverageRow {
    msi_band: usize,
    lambda_low_nm: f64,
    lambda_high_nm: f64,
}

/// Reads `msi_band, lambda_low_nm, lambda_high_nm` rows (with header) and
/// maps them onto the given HSI band centers.
pub fn read_coverage(path: &Path, hsi_wavelengths: &[f64]) -> Result<SpectralCoverage> {
    let file = fs::File::open(path).map_err(|e| FuseError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut rows: Vec<CoverageRow> = Vec::new();
    for rec in reader.deserialize() {
        rows.push(rec.map_err(|e| FuseError::format(path, e.to_string()))?);
    }
    if rows.is_empty() {
        return Err(FuseError::format(path, "coverage table has no rows"));
    }
    rows.sort_by_key(|r| r.msi_band);
    if rows.iter().enumerate().any(|(i, r)| r.msi_band != i) {
        return Err(FuseError::format(path, "msi_band must number the rows 0..n without gaps"));
    }
    let intervals: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda_low_nm, r.lambda_high_nm)).collect();
    build_coverage(hsi_wavelengths, &intervals)
}

pub fn write_coverage(path: &Path, cov: &SpectralCoverage) -> Result<()> {
    let mut s = String::from("msi_band,lambda_low_nm,lambda_high_nm\n");
    for (i, (lo, hi)) in cov.msi_bands().iter().enumerate() {
        s.push_str(&format!("{i},{lo},{hi}\n"));
    }
    write_text(path, &s)
}

/// Matrix as CSV, one row per line, no header.
pub fn write_matrix_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut s = String::new();
    for r in 0..m.rows {
        let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}

/// SRF weights as `msi_band,hsi_band,wavelength_nm,weight`.
pub fn write_srf_csv(path: &Path, cov: &SpectralCoverage, weights: &[Vec<f64>], wavelengths: Option<&[f64]>) -> Result<()> {
    let mut s = String::from("msi_band,hsi_band,wavelength_nm,weight\n");
    for (i, (set, w)) in cov.index_sets().iter().zip(weights).enumerate() {
        for (&j, &v) in set.iter().zip(w) {
            let wl = wavelengths.map(|l| l[j].to_string()).unwrap_or_default();
            s.push_str(&format!("{i},{j},{wl},{v}\n"));
        }
    }
    write_text(path, &s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapScale {
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub max: f64,
}

/// Writes `<stem>.pgm` (8-bit, min-max scaled), `<stem>.f32` (raw LE) and
/// `<stem>.scale.json`.
pub fn write_heatmap(stem: &Path, map: &[f64], rows: usize, cols: usize) -> Result<HeatmapScale> {
    if map.len() != rows * cols {
        return Err(FuseError::Shape(format!("heatmap has {} values for {rows}x{cols}", map.len())));
    }
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    pgm.extend(map.iter().map(|&v| {
        if span > 0.0 {
            ((v - min) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    let with_ext = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    write_bytes(&with_ext(".pgm"), &pgm)?;
    let mut raw = Vec::with_capacity(map.len() * 4);
    for &v in map {
        raw.write_all(&(v as f32).to_le_bytes()).expect("write to Vec");
    }
    write_bytes(&with_ext(".f32"), &raw)?;
    let scale = HeatmapScale { rows, cols, min, max };
    write_json(&with_ext(".scale.json"), &scale)?;
    Ok(scale)
}
