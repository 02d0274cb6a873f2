//! Full-batch training loop: Adam with linear learning-rate decay and a box
//! projection of the constrained weights after every step.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cube::{fold, unfold, ImageCube, Mat, SpectralCoverage};
use crate::error::{FuseError, Result};
use crate::losses::{record_loss, Ablation, LossBreakdown, LossWeights};
use crate::metrics;
use crate::net::{record_forward, ConstraintFn, Dims, ForwardBundle, ModelParams, NetConfig};
use crate::tape::{softmax_rows, Gradients, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr0: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub p: usize,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub eps_norm: f64,
    pub constraint_fn: ConstraintFn,
    pub ablation: Ablation,
    pub seed: u64,
    pub reproducible: bool,
    /// Ground-truth metrics cadence in iterations.
    pub metrics_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        TrainConfig {
            iterations: 10000,
            lr0: 5e-3,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            p: net.p,
            hidden: net.hidden,
            leaky_slope: net.leaky_slope,
            eps_norm: net.eps_norm,
            constraint_fn: net.constraint,
            ablation: Ablation::default(),
            seed: 0,
            reproducible: true,
            metrics_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(FuseError::Config("iterations must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(FuseError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.p == 0 {
            return Err(FuseError::Config("p must be at least 1".into()));
        }
        if self.metrics_every == 0 {
            return Err(FuseError::Config("metrics_every must be at least 1".into()));
        }
        self.weights.validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            p: self.p,
            hidden: self.hidden.clone(),
            leaky_slope: self.leaky_slope,
            eps_norm: self.eps_norm,
            constraint: self.constraint_fn,
        }
    }
}

/// `lr0 * (1 - iter / iterations)`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * (1.0 - iter as f64 / cfg.iterations as f64)
}

/// First and second moments per parameter array, in [`ModelParams::views`]
/// order, with one shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.views().iter().map(|v| v.data.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update followed by [`project_boxes`]. Parameters
/// without a gradient entry are treated as having a zero gradient.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    adam: &AdamConfig,
) -> Result<()> {
    for view in params.views() {
        if let Some(g) = grads.get(&view.name) {
            if g.len() != view.data.len() {
                return Err(FuseError::Shape(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    view.name,
                    g.len(),
                    view.data.len()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(FuseError::InvalidValue(format!(
                    "non-finite gradient in parameter {} at index {i}",
                    view.name
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (k, view) in params.views_mut().into_iter().enumerate() {
        let Some(g) = grads.get(&view.name) else {
            continue;
        };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..g.len() {
            m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
            v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            view.data[i] -= lr * mh / (vh.sqrt() + adam.eps);
        }
    }
    project_boxes(params);
    Ok(())
}

/// Clamps endmembers, PSF kernel and SRF weights into `[0, 1]`.
pub fn project_boxes(params: &mut ModelParams) {
    for view in params.views_mut() {
        if view.boxed {
            for x in view.data.iter_mut() {
                *x = x.clamp(0.0, 1.0);
            }
        }
    }
}

/// Channelwise softmax of per-pixel logits.
pub fn softmax_abundance_variant(logits: &Mat) -> Mat {
    softmax_rows(logits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub mpsnr: Option<f64>,
    pub msam: Option<f64>,
    /// Constrained weights inside their box after this step.
    pub constraints_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub with_metrics: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,L_total,L_Za,L_Zb,L_Y,L_Ylr,L_sum2one,L_sparse");
        if self.with_metrics {
            s.push_str(",mPSNR,mSAM");
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let l = &r.loss;
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.iter, r.lr, l.total, l.za, l.zb, l.y, l.ylr, l.sum2one, l.sparse
            );
            if self.with_metrics {
                let _ = write!(s, ",{},{}", opt(r.mpsnr), opt(r.msam));
            }
            s.push('\n');
        }
        s
    }

    pub fn last_metrics(&self) -> Option<(f64, f64)> {
        self.rows.iter().rev().find_map(|r| Some((r.mpsnr?, r.msam?)))
    }

    pub fn constraints_held(&self) -> bool {
        self.rows.iter().all(|r| r.constraints_ok)
    }
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub x_tilde: ImageCube,
    /// Final forward pass with the trained parameters.
    pub bundle: ForwardBundle,
    pub log: TrainLog,
}

/// Initializes parameters from `cfg.seed` and trains.
pub fn train(
    z: &ImageCube,
    y: &ImageCube,
    coverage: &SpectralCoverage,
    cfg: &TrainConfig,
    truth: Option<&ImageCube>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let (_, ratio) = Dims::from_inputs(z, y)?;
    let params = ModelParams::init(z, y.bands(), coverage, ratio, &cfg.net_config(), cfg.seed)?;
    train_from(z, y, params, cfg, truth)
}

/// Trains starting from the given parameters.
pub fn train_from(
    z: &ImageCube,
    y: &ImageCube,
    mut params: ModelParams,
    cfg: &TrainConfig,
    truth: Option<&ImageCube>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let (dims, _) = Dims::from_inputs(z, y)?;
    if let Some(t) = truth {
        if (t.rows(), t.cols(), t.bands()) != (y.rows(), y.cols(), z.bands()) {
            return Err(FuseError::Shape(format!(
                "ground truth is {}x{}x{}, expected {}x{}x{}",
                t.rows(),
                t.cols(),
                t.bands(),
                y.rows(),
                y.cols(),
                z.bands()
            )));
        }
    }
    let zm = unfold(z);
    let ym = unfold(y);
    let mut state = AdamState::new(&params);
    let mut log = TrainLog {
        rows: Vec::with_capacity(cfg.iterations),
        with_metrics: truth.is_some(),
    };

    for iter in 0..cfg.iterations {
        let lr = lr_at(iter, cfg);
        let mut tape = Tape::new(cfg.reproducible);
        let graph = record_forward(&mut tape, &zm, &ym, dims, &params)?;
        let nodes = record_loss(&mut tape, &graph, &cfg.weights, &cfg.ablation)?;
        let loss = nodes.breakdown(&tape);
        if !loss.total.is_finite() {
            return Err(FuseError::Divergence(format!(
                "joint loss is {} at iteration {iter}",
                loss.total
            )));
        }
        let (mut mpsnr, mut msam) = (None, None);
        if let Some(t) = truth {
            if iter % cfg.metrics_every == 0 || iter + 1 == cfg.iterations {
                let x = fold(tape.value(graph.x_tilde), dims.hr_rows, dims.hr_cols)?;
                mpsnr = Some(metrics::mpsnr(t, &x)?);
                msam = Some(metrics::msam(t, &x)?);
            }
        }
        let grads = tape.backward(nodes.total)?;
        drop(tape);
        adam_step(&mut params, &grads, &mut state, lr, &cfg.adam).map_err(|e| match e {
            FuseError::InvalidValue(m) => FuseError::Divergence(format!("{m} at iteration {iter}")),
            other => other,
        })?;
        let constraints_ok = params.boxes_satisfied();
        debug_assert!(constraints_ok);
        if iter % 500 == 0 {
            log::info!("iter {iter}: loss {:.6}", loss.total);
        }
        log.rows.push(LogRow {
            iter,
            lr,
            loss,
            mpsnr,
            msam,
            constraints_ok,
        });
    }

    let mut tape = Tape::new(cfg.reproducible);
    let graph = record_forward(&mut tape, &zm, &ym, dims, &params)?;
    let bundle = ForwardBundle::from_graph(&tape, &graph);
    let mut x_tilde = bundle.x_tilde_cube()?;
    if let Some(w) = z.wavelengths() {
        x_tilde = x_tilde.with_wavelengths(w.to_vec())?;
    }
    Ok(TrainOutput {
        params,
        x_tilde,
        bundle,
        log,
    })
}
