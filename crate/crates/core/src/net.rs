//! The coupled autoencoders: parameter containers, initialization and the
//! forward pass.
//!
//! Data flow (all images unfolded to pixel-major matrices):
//!
//! ```text
//! Z --enc_lr--> A_h_a --E--> Z~a
//! Y --enc_hr--> A     --E--> X~ --SRF--> Y~
//!               A --PSF--> A_h_b --E--> Z~b
//! Y --PSF--> Y_lr_a        Z --SRF--> Y_lr_b
//! ```
//!
//! The endmember matrix `E` is a single tape node reused by all three
//! decoder applications.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cube::{fold, unfold, ImageCube, Mat, SpectralCoverage};
use crate::error::{FuseError, Result};
use crate::tape::{NodeId, Tape};

/// How encoder outputs are forced into valid abundances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintFn {
    #[default]
    Clamp,
    Softmax,
}

impl std::str::FromStr for ConstraintFn {
    type Err = FuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clamp" => Ok(ConstraintFn::Clamp),
            "softmax" => Ok(ConstraintFn::Softmax),
            other => Err(FuseError::Config(format!(
                "unknown constraint function {other:?} (expected clamp or softmax)"
            ))),
        }
    }
}

/// Architecture knobs that are not learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of endmembers (abundance channels).
    pub p: usize,
    /// Hidden widths between the input bands and `p`.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub eps_norm: f64,
    pub constraint: ConstraintFn,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            p: 100,
            hidden: vec![128, 64],
            leaky_slope: 0.02,
            eps_norm: 1e-8,
            constraint: ConstraintFn::Clamp,
        }
    }
}

/// Stack of 1x1 convolutions (dense layers applied per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1Stack {
    pub widths: Vec<usize>,
    /// Layer `i` maps `widths[i]` to `widths[i + 1]`.
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
    pub leaky_slope: f64,
    pub output_clamp: bool,
}

impl Conv1x1Stack {
    /// Uniform `±sqrt(1/fan_in)` weights, zero biases.
    pub fn init(widths: &[usize], leaky_slope: f64, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(FuseError::Config(format!("invalid encoder widths {widths:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let bound = (1.0 / pair[0] as f64).sqrt();
            let data = (0..pair[0] * pair[1])
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Mat::from_vec(pair[0], pair[1], data)?);
            biases.push(vec![0.0; pair[1]]);
        }
        Ok(Conv1x1Stack {
            widths: widths.to_vec(),
            weights,
            biases,
            leaky_slope,
            output_clamp: true,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Records the stack on a tape. The output activation is applied only
    /// when `output_clamp` is set.
    fn record(
        &self,
        tape: &mut Tape,
        prefix: &str,
        x: NodeId,
        constraint: ConstraintFn,
    ) -> Result<NodeId> {
        let mut h = x;
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wn = tape.param(format!("{prefix}.w{i}"), w.clone());
            let bn = tape.param(format!("{prefix}.b{i}"), Mat::from_vec(1, b.len(), b.clone())?);
            h = tape.dense(h, wn, Some(bn))?;
            if i != last {
                h = tape.leaky(h, self.leaky_slope);
            }
        }
        if self.output_clamp {
            h = match constraint {
                ConstraintFn::Clamp => tape.clamp01(h)?,
                ConstraintFn::Softmax => tape.softmax(h),
            };
        }
        Ok(h)
    }
}

/// Shared decoder weights: one endmember spectrum per row (`p x L`).
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberLayer {
    pub e: Mat,
}

/// Learnable `k x k` block filter applied with stride `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfLayer {
    pub kernel: Mat,
}

impl PsfLayer {
    pub fn size(&self) -> usize {
        self.kernel.rows
    }
}

/// Learnable spectral response restricted to the known coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct SrfLayer {
    pub coverage: SpectralCoverage,
    /// Flat weights, MSI band `i` occupies `offsets[i]..offsets[i+1]`.
    pub weights: Vec<f64>,
    pub eps_norm: f64,
}

impl SrfLayer {
    pub fn band_weights(&self) -> Vec<Vec<f64>> {
        let off = self.coverage.offsets();
        (0..self.coverage.num_msi_bands())
            .map(|i| self.weights[off[i]..off[i + 1]].to_vec())
            .collect()
    }

    fn sets(&self) -> Arc<Vec<Vec<usize>>> {
        Arc::new(self.coverage.index_sets().to_vec())
    }
}

/// Everything the trainer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub enc_lr: Conv1x1Stack,
    pub enc_hr: Conv1x1Stack,
    pub endmembers: EndmemberLayer,
    pub psf: PsfLayer,
    pub srf: SrfLayer,
    pub constraint: ConstraintFn,
}

/// Borrowed view of one trainable array.
pub struct ParamView<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
    /// Box-constrained to `[0, 1]` after every optimizer step.
    pub boxed: bool,
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub boxed: bool,
}

pub const ENDMEMBERS: &str = "endmembers";
pub const PSF: &str = "psf";
pub const SRF: &str = "srf";

impl ModelParams {
    /// Default initialization: encoders uniform in `±sqrt(1/fan_in)`, E from
    /// `p` randomly chosen LrHSI pixels, PSF uniform `1/k^2`, SRF all ones.
    pub fn init(
        lrhsi: &ImageCube,
        msi_bands: usize,
        coverage: &SpectralCoverage,
        ratio: usize,
        cfg: &NetConfig,
        seed: u64,
    ) -> Result<Self> {
        if cfg.p == 0 {
            return Err(FuseError::Config("endmember count p must be at least 1".into()));
        }
        if coverage.num_hsi_bands() != lrhsi.bands() || coverage.num_msi_bands() != msi_bands {
            return Err(FuseError::Shape(format!(
                "coverage maps {} HSI bands to {} MSI bands, inputs have {} and {}",
                coverage.num_hsi_bands(),
                coverage.num_msi_bands(),
                lrhsi.bands(),
                msi_bands
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = lrhsi.bands();
        let mut lr_widths = vec![l];
        lr_widths.extend(&cfg.hidden);
        lr_widths.push(cfg.p);
        let mut hr_widths = vec![msi_bands];
        hr_widths.extend(&cfg.hidden);
        hr_widths.push(cfg.p);
        let enc_lr = Conv1x1Stack::init(&lr_widths, cfg.leaky_slope, &mut rng)?;
        let enc_hr = Conv1x1Stack::init(&hr_widths, cfg.leaky_slope, &mut rng)?;

        let z = unfold(lrhsi);
        let picks: Vec<usize> = if cfg.p <= z.rows {
            sample(&mut rng, z.rows, cfg.p).into_vec()
        } else {
            (0..cfg.p).map(|_| rng.gen_range(0..z.rows)).collect()
        };
        let mut e = Mat::zeros(cfg.p, l);
        for (r, &px) in picks.iter().enumerate() {
            e.data[r * l..(r + 1) * l].copy_from_slice(z.row(px));
        }
        e.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

        let kernel = Mat::filled(ratio, ratio, 1.0 / (ratio * ratio) as f64);
        Ok(ModelParams {
            enc_lr,
            enc_hr,
            endmembers: EndmemberLayer { e },
            psf: PsfLayer { kernel },
            srf: SrfLayer {
                coverage: coverage.clone(),
                weights: vec![1.0; coverage.num_weights()],
                eps_norm: cfg.eps_norm,
            },
            constraint: cfg.constraint,
        })
    }

    pub fn p(&self) -> usize {
        self.endmembers.e.rows
    }

    /// All trainable arrays in a fixed order.
    pub fn views(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (prefix, stack) in [("enc_lr", &self.enc_lr), ("enc_hr", &self.enc_hr)] {
            for (i, (w, b)) in stack.weights.iter().zip(&stack.biases).enumerate() {
                out.push(ParamView {
                    name: format!("{prefix}.w{i}"),
                    rows: w.rows,
                    cols: w.cols,
                    data: &w.data,
                    boxed: false,
                });
                out.push(ParamView {
                    name: format!("{prefix}.b{i}"),
                    rows: 1,
                    cols: b.len(),
                    data: b,
                    boxed: false,
                });
            }
        }
        let e = &self.endmembers.e;
        out.push(ParamView {
            name: ENDMEMBERS.into(),
            rows: e.rows,
            cols: e.cols,
            data: &e.data,
            boxed: true,
        });
        let k = &self.psf.kernel;
        out.push(ParamView {
            name: PSF.into(),
            rows: k.rows,
            cols: k.cols,
            data: &k.data,
            boxed: true,
        });
        out.push(ParamView {
            name: SRF.into(),
            rows: 1,
            cols: self.srf.weights.len(),
            data: &self.srf.weights,
            boxed: true,
        });
        out
    }

    pub fn views_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        for (prefix, stack) in [("enc_lr", &mut self.enc_lr), ("enc_hr", &mut self.enc_hr)] {
            for (i, (w, b)) in stack.weights.iter_mut().zip(stack.biases.iter_mut()).enumerate() {
                out.push(ParamViewMut {
                    name: format!("{prefix}.w{i}"),
                    data: &mut w.data,
                    boxed: false,
                });
                out.push(ParamViewMut {
                    name: format!("{prefix}.b{i}"),
                    data: b,
                    boxed: false,
                });
            }
        }
        out.push(ParamViewMut {
            name: ENDMEMBERS.into(),
            data: &mut self.endmembers.e.data,
            boxed: true,
        });
        out.push(ParamViewMut {
            name: PSF.into(),
            data: &mut self.psf.kernel.data,
            boxed: true,
        });
        out.push(ParamViewMut {
            name: SRF.into(),
            data: &mut self.srf.weights,
            boxed: true,
        });
        out
    }

    /// True when every box-constrained weight lies in `[0, 1]`.
    pub fn boxes_satisfied(&self) -> bool {
        self.views()
            .iter()
            .filter(|v| v.boxed)
            .all(|v| v.data.iter().all(|&x| (0.0..=1.0).contains(&x)))
    }
}

/// Spatial sizes of the two input resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub lr_rows: usize,
    pub lr_cols: usize,
    pub hr_rows: usize,
    pub hr_cols: usize,
}

impl Dims {
    /// Checks that `Y` is an integer upsampling of `Z` and returns the dims
    /// plus the GSD ratio.
    pub fn from_inputs(z: &ImageCube, y: &ImageCube) -> Result<(Dims, usize)> {
        let ratio = integer_ratio(y.rows(), z.rows(), "rows")?;
        let ratio_c = integer_ratio(y.cols(), z.cols(), "cols")?;
        if ratio != ratio_c {
            return Err(FuseError::Shape(format!(
                "GSD ratio differs between rows ({ratio}) and cols ({ratio_c})"
            )));
        }
        Ok((
            Dims {
                lr_rows: z.rows(),
                lr_cols: z.cols(),
                hr_rows: y.rows(),
                hr_cols: y.cols(),
            },
            ratio,
        ))
    }
}

fn integer_ratio(hr: usize, lr: usize, axis: &str) -> Result<usize> {
    if lr == 0 || hr % lr != 0 {
        return Err(FuseError::Shape(format!(
            "HrMSI {axis} ({hr}) is not an integer multiple of LrHSI {axis} ({lr})"
        )));
    }
    Ok(hr / lr)
}

/// Node ids of every tensor in the coupled network.
#[derive(Debug, Clone, Copy)]
pub struct Graph {
    pub z: NodeId,
    pub y: NodeId,
    pub a_h_a: NodeId,
    pub a: NodeId,
    pub a_h_b: NodeId,
    pub z_tilde_a: NodeId,
    pub z_tilde_b: NodeId,
    pub x_tilde: NodeId,
    pub y_tilde: NodeId,
    pub y_lr_a: NodeId,
    pub y_lr_b: NodeId,
    pub dims: Dims,
}

/// Records the full forward pass on `tape`.
pub fn record_forward(
    tape: &mut Tape,
    z: &Mat,
    y: &Mat,
    dims: Dims,
    params: &ModelParams,
) -> Result<Graph> {
    check_inputs(z, y, dims, params)?;
    let zn = tape.input(z.clone());
    let yn = tape.input(y.clone());
    let a_h_a = params
        .enc_lr
        .record(tape, "enc_lr", zn, params.constraint)
        .map_err(|e| annotate(e, "LrHSI encoder"))?;
    let a = params
        .enc_hr
        .record(tape, "enc_hr", yn, params.constraint)
        .map_err(|e| annotate(e, "HrMSI encoder"))?;
    record_decoders(tape, zn, yn, a_h_a, a, dims, params)
}

/// Records everything downstream of the two abundance tensors, which are
/// taken as given inputs. Used to check the decoders on planted scenes.
pub fn record_from_abundances(
    tape: &mut Tape,
    z: &Mat,
    y: &Mat,
    a_h_a: &Mat,
    a: &Mat,
    dims: Dims,
    params: &ModelParams,
) -> Result<Graph> {
    check_inputs(z, y, dims, params)?;
    if a_h_a.shape() != (z.rows, params.p()) || a.shape() != (y.rows, params.p()) {
        return Err(FuseError::Shape("abundance shapes do not match inputs and p".into()));
    }
    let zn = tape.input(z.clone());
    let yn = tape.input(y.clone());
    let ahn = tape.input(a_h_a.clone());
    let an = tape.input(a.clone());
    record_decoders(tape, zn, yn, ahn, an, dims, params)
}

fn check_inputs(z: &Mat, y: &Mat, dims: Dims, params: &ModelParams) -> Result<()> {
    if z.rows != dims.lr_rows * dims.lr_cols || y.rows != dims.hr_rows * dims.hr_cols {
        return Err(FuseError::Shape("input pixel counts do not match dims".into()));
    }
    let k = params.psf.size();
    if dims.hr_rows != dims.lr_rows * k || dims.hr_cols != dims.lr_cols * k {
        return Err(FuseError::Shape(format!(
            "HrMSI {}x{} is not LrHSI {}x{} times PSF size {k}",
            dims.hr_rows, dims.hr_cols, dims.lr_rows, dims.lr_cols
        )));
    }
    if z.cols != params.enc_lr.input_width() {
        return Err(FuseError::Shape(format!(
            "LrHSI has {} bands, encoder expects {}",
            z.cols,
            params.enc_lr.input_width()
        )));
    }
    if y.cols != params.enc_hr.input_width() {
        return Err(FuseError::Shape(format!(
            "HrMSI has {} bands, encoder expects {}",
            y.cols,
            params.enc_hr.input_width()
        )));
    }
    if params.srf.coverage.num_msi_bands() != y.cols || params.endmembers.e.cols != z.cols {
        return Err(FuseError::Shape("SRF coverage or endmembers inconsistent with inputs".into()));
    }
    Ok(())
}

fn annotate(e: FuseError, path: &str) -> FuseError {
    match e {
        FuseError::Shape(m) => FuseError::Shape(format!("{path}: {m}")),
        other => other,
    }
}

fn record_decoders(
    tape: &mut Tape,
    zn: NodeId,
    yn: NodeId,
    a_h_a: NodeId,
    a: NodeId,
    dims: Dims,
    params: &ModelParams,
) -> Result<Graph> {
    let e = tape.param(ENDMEMBERS, params.endmembers.e.clone());
    let psf = tape.param(PSF, params.psf.kernel.clone());
    let srf_w = tape.param(SRF, Mat::from_vec(1, params.srf.weights.len(), params.srf.weights.clone())?);
    let sets = params.srf.sets();
    let eps = params.srf.eps_norm;

    let decode = |tape: &mut Tape, ab: NodeId, path: &str| -> Result<NodeId> {
        let lin = tape.dense(ab, e, None).map_err(|err| annotate(err, path))?;
        tape.clamp01(lin)
    };

    let z_tilde_a = decode(tape, a_h_a, "Z~a decoder")?;
    let x_tilde = decode(tape, a, "X~ decoder")?;
    let y_tilde = tape
        .srf_norm(x_tilde, srf_w, sets.clone(), eps)
        .map_err(|err| annotate(err, "Y~ SRF"))?;
    let a_h_b = tape
        .block_conv(a, psf, dims.hr_rows, dims.hr_cols)
        .map_err(|err| annotate(err, "A_h_b PSF"))?;
    let z_tilde_b = decode(tape, a_h_b, "Z~b decoder")?;
    let y_lr_a = tape
        .block_conv(yn, psf, dims.hr_rows, dims.hr_cols)
        .map_err(|err| annotate(err, "Y_lr_a PSF"))?;
    let y_lr_b = tape
        .srf_norm(zn, srf_w, sets, eps)
        .map_err(|err| annotate(err, "Y_lr_b SRF"))?;
    Ok(Graph {
        z: zn,
        y: yn,
        a_h_a,
        a,
        a_h_b,
        z_tilde_a,
        z_tilde_b,
        x_tilde,
        y_tilde,
        y_lr_a,
        y_lr_b,
        dims,
    })
}

/// All eight network outputs plus the three abundance tensors, unfolded.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBundle {
    pub a_h_a: Mat,
    pub a: Mat,
    pub a_h_b: Mat,
    pub z_tilde_a: Mat,
    pub z_tilde_b: Mat,
    pub y_tilde: Mat,
    pub x_tilde: Mat,
    pub y_lr_a: Mat,
    pub y_lr_b: Mat,
    pub dims: Dims,
}

impl ForwardBundle {
    pub fn from_graph(tape: &Tape, g: &Graph) -> Self {
        ForwardBundle {
            a_h_a: tape.value(g.a_h_a).clone(),
            a: tape.value(g.a).clone(),
            a_h_b: tape.value(g.a_h_b).clone(),
            z_tilde_a: tape.value(g.z_tilde_a).clone(),
            z_tilde_b: tape.value(g.z_tilde_b).clone(),
            y_tilde: tape.value(g.y_tilde).clone(),
            x_tilde: tape.value(g.x_tilde).clone(),
            y_lr_a: tape.value(g.y_lr_a).clone(),
            y_lr_b: tape.value(g.y_lr_b).clone(),
            dims: g.dims,
        }
    }

    /// Estimated HrHSI as a cube.
    pub fn x_tilde_cube(&self) -> Result<ImageCube> {
        fold(&self.x_tilde, self.dims.hr_rows, self.dims.hr_cols)
    }
}

/// Deterministic forward pass over all three autoencoders.
pub fn forward_all(z: &ImageCube, y: &ImageCube, params: &ModelParams) -> Result<ForwardBundle> {
    let (dims, _) = Dims::from_inputs(z, y)?;
    let mut tape = Tape::new(true);
    let g = record_forward(&mut tape, &unfold(z), &unfold(y), dims, params)?;
    Ok(ForwardBundle::from_graph(&tape, &g))
}

/// LrHSI encoder applied per pixel; output `m x n x p`.
pub fn encode_lr(z: &ImageCube, enc: &Conv1x1Stack) -> Result<ImageCube> {
    encode(z, enc, ConstraintFn::Clamp)
}

/// HrMSI encoder applied per pixel; output `M x N x p`.
pub fn encode_hr(y: &ImageCube, enc: &Conv1x1Stack) -> Result<ImageCube> {
    encode(y, enc, ConstraintFn::Clamp)
}

pub fn encode(x: &ImageCube, enc: &Conv1x1Stack, constraint: ConstraintFn) -> Result<ImageCube> {
    if x.bands() != enc.input_width() {
        return Err(FuseError::Shape(format!(
            "input has {} bands, encoder expects {}",
            x.bands(),
            enc.input_width()
        )));
    }
    let mut tape = Tape::new(true);
    let xn = tape.input(unfold(x));
    let out = enc.record(&mut tape, "enc", xn, constraint)?;
    fold(tape.value(out), x.rows(), x.cols())
}

/// Per-pixel `a^T E`, clamped to `[0, 1]`.
pub fn decode_shared(a: &ImageCube, e: &EndmemberLayer) -> Result<ImageCube> {
    if a.bands() != e.e.rows {
        return Err(FuseError::Shape(format!(
            "abundances have {} channels, E has {} endmembers",
            a.bands(),
            e.e.rows
        )));
    }
    let mut tape = Tape::new(true);
    let an = tape.input(unfold(a));
    let en = tape.input(e.e.clone());
    let lin = tape.dense(an, en, None)?;
    let out = tape.clamp01(lin)?;
    fold(tape.value(out), a.rows(), a.cols())
}

/// Learned PSF applied with stride `k` to every channel. No output clamp.
pub fn psf_forward(x: &ImageCube, psf: &PsfLayer) -> Result<ImageCube> {
    let k = psf.size();
    crate::degrade::check_divisible(x.rows(), x.cols(), k)?;
    let out = crate::tape::block_conv_forward(&unfold(x), &psf.kernel.data, x.rows(), x.cols(), k);
    fold(&out, x.rows() / k, x.cols() / k)
}

/// Learned SRF with normalization `sum w x / (sum w + eps_norm)`.
pub fn srf_forward(x: &ImageCube, srf: &SrfLayer) -> Result<ImageCube> {
    if x.bands() != srf.coverage.num_hsi_bands() {
        return Err(FuseError::Shape(format!(
            "input has {} bands, SRF coverage expects {}",
            x.bands(),
            srf.coverage.num_hsi_bands()
        )));
    }
    let weights = srf.band_weights();
    for (i, w) in weights.iter().enumerate() {
        if w.iter().all(|&v| v == 0.0) {
            log::warn!("SRF band {i} has all-zero weights; output is near zero");
        }
    }
    let out = crate::tape::srf_forward_raw(
        &unfold(x),
        &srf.weights,
        srf.coverage.index_sets(),
        &srf.coverage.offsets(),
        srf.eps_norm,
    );
    fold(&out, x.rows(), x.cols())
}
