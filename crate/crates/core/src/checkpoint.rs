//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `HYCONET1`, a `u32` array count, then per array
//! a `u32` name length, the UTF-8 name, `u64` rows, `u64` cols and
//! `rows * cols` little-endian f64 values. Besides the trainable arrays the
//! file stores `meta.*` arrays describing the architecture and coverage.

use std::collections::BTreeMap;
use std::path::Path;

use crate::cube::{Mat, SpectralCoverage};
use crate::error::{FuseError, Result};
use crate::io::write_bytes;
use crate::net::{ConstraintFn, Conv1x1Stack, EndmemberLayer, ModelParams, PsfLayer, SrfLayer};

pub const MAGIC: &[u8; 8] = b"HYCONET1";

fn push_array(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn as_f64(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let cov = &params.srf.coverage;
    let mut arrays: Vec<(String, usize, usize, Vec<f64>)> = vec![
        ("meta.enc_lr.widths".into(), 1, params.enc_lr.widths.len(), as_f64(&params.enc_lr.widths)),
        ("meta.enc_hr.widths".into(), 1, params.enc_hr.widths.len(), as_f64(&params.enc_hr.widths)),
        (
            "meta.scalars".into(),
            1,
            4,
            vec![
                params.enc_lr.leaky_slope,
                params.enc_hr.leaky_slope,
                params.srf.eps_norm,
                match params.constraint {
                    ConstraintFn::Clamp => 0.0,
                    ConstraintFn::Softmax => 1.0,
                },
            ],
        ),
        (
            "meta.coverage.intervals".into(),
            cov.num_msi_bands(),
            2,
            cov.msi_bands().iter().flat_map(|&(a, b)| [a, b]).collect(),
        ),
        ("meta.coverage.hsi_bands".into(), 1, 1, vec![cov.num_hsi_bands() as f64]),
    ];
    for (i, set) in cov.index_sets().iter().enumerate() {
        arrays.push((format!("meta.coverage.set{i}"), 1, set.len(), as_f64(set)));
    }
    for v in params.views() {
        arrays.push((v.name, v.rows, v.cols, v.data.to_vec()));
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, r, c, d) in &arrays {
        push_array(&mut out, name, *r, *c, d);
    }
    out
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    write_bytes(path, &encode(params))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Parses every named array in a checkpoint.
pub fn decode_arrays(bytes: &[u8]) -> std::result::Result<BTreeMap<String, Mat>, String> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err("missing HYCONET1 magic".into());
    }
    let mut r = Reader { bytes, pos: 8 };
    let truncated = || "truncated checkpoint".to_string();
    let count = r.u32().ok_or_else(truncated)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| "array name is not UTF-8".to_string())?
            .to_string();
        let rows = r.u64().ok_or_else(truncated)? as usize;
        let cols = r.u64().ok_or_else(truncated)? as usize;
        let n = rows.checked_mul(cols).ok_or_else(truncated)?;
        let raw = r.take(n.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Mat { rows, cols, data });
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after last array".into());
    }
    Ok(out)
}

fn decode_params(arrays: &BTreeMap<String, Mat>) -> std::result::Result<ModelParams, String> {
    let get = |name: &str| arrays.get(name).ok_or_else(|| format!("missing array {name}"));
    let as_usize = |m: &Mat| m.data.iter().map(|&v| v as usize).collect::<Vec<_>>();
    let scalars = get("meta.scalars")?;
    if scalars.data.len() != 4 {
        return Err("meta.scalars must hold 4 values".into());
    }
    let stack = |prefix: &str, slope: f64| -> std::result::Result<Conv1x1Stack, String> {
        let widths = as_usize(get(&format!("meta.{prefix}.widths"))?);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..widths.len().saturating_sub(1) {
            let w = get(&format!("{prefix}.w{i}"))?.clone();
            let b = get(&format!("{prefix}.b{i}"))?;
            if w.shape() != (widths[i], widths[i + 1]) || b.data.len() != widths[i + 1] {
                return Err(format!("{prefix} layer {i} does not match its widths"));
            }
            weights.push(w);
            biases.push(b.data.clone());
        }
        Ok(Conv1x1Stack {
            widths,
            weights,
            biases,
            leaky_slope: slope,
            output_clamp: true,
        })
    };
    let enc_lr = stack("enc_lr", scalars.data[0])?;
    let enc_hr = stack("enc_hr", scalars.data[1])?;
    let intervals = get("meta.coverage.intervals")?;
    let msi_bands: Vec<(f64, f64)> = intervals.data.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    let sets = (0..msi_bands.len())
        .map(|i| get(&format!("meta.coverage.set{i}")).map(as_usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let hsi_bands = get("meta.coverage.hsi_bands")?.data.first().copied().unwrap_or(0.0) as usize;
    let coverage = SpectralCoverage::from_index_sets(msi_bands, sets, hsi_bands).map_err(|e| e.to_string())?;
    let srf = get(crate::net::SRF)?;
    if srf.data.len() != coverage.num_weights() {
        return Err("SRF weight count does not match coverage".into());
    }
    Ok(ModelParams {
        enc_lr,
        enc_hr,
        endmembers: EndmemberLayer {
            e: get(crate::net::ENDMEMBERS)?.clone(),
        },
        psf: PsfLayer {
            kernel: get(crate::net::PSF)?.clone(),
        },
        srf: SrfLayer {
            coverage,
            weights: srf.data.clone(),
            eps_norm: scalars.data[2],
        },
        constraint: if scalars.data[3] == 1.0 {
            ConstraintFn::Softmax
        } else {
            ConstraintFn::Clamp
        },
    })
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| FuseError::io(path, e))?;
    decode_arrays(&bytes)
        .and_then(|a| decode_params(&a))
        .map_err(|m| FuseError::format(path, m))
}
