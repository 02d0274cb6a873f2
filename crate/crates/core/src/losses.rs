//! Reconstruction, sum-to-one and sparsity losses and their weighted sum.
//!
//! The functions here evaluate losses directly on a [`ForwardBundle`]; the
//! trainer records the same terms on a gradient tape via [`record_loss`].

use serde::{Deserialize, Serialize};

use crate::cube::Mat;
use crate::error::{FuseError, Result};
use crate::net::{ForwardBundle, Graph};
use crate::tape::{kl_bernoulli, NodeId, Reduction, Tape};

/// Abundances are squashed into `[EPS_KL, 1 - EPS_KL]` before the KL term.
pub const EPS_KL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// LrHSI reconstruction through the PSF bridge (`Z~b`).
    pub alpha: f64,
    /// HrMSI reconstruction.
    pub beta: f64,
    /// LrMSI consistency.
    pub gamma: f64,
    /// Sum-to-one penalty.
    pub mu: f64,
    /// Sparsity penalty.
    pub nu: f64,
    /// Sparsity target, strictly inside (0, 1).
    pub a_sparse: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 10.0,
            beta: 10.0,
            gamma: 100.0,
            mu: 0.001,
            nu: 0.001,
            a_sparse: 0.0001,
            reduction: Reduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu", self.mu),
            ("nu", self.nu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FuseError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.a_sparse > 0.0 && self.a_sparse < 1.0) {
            return Err(FuseError::Config(format!(
                "sparsity target must lie in (0, 1), got {}",
                self.a_sparse
            )));
        }
        Ok(())
    }
}

/// Loss terms removed for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    /// Drops the `Z~b` term and the sum-to-one term on `A_h_b`, so nothing
    /// flows back through the PSF bridge.
    pub drop_zb: bool,
    pub drop_za: bool,
    pub drop_y: bool,
    pub drop_ylr: bool,
}

impl Ablation {
    pub fn parse(names: &[String]) -> Result<Self> {
        let mut out = Ablation::default();
        for n in names {
            match n.as_str() {
                "drop_Zb" | "drop_zb" => out.drop_zb = true,
                "drop_Za" | "drop_za" => out.drop_za = true,
                "drop_Y" | "drop_y" => out.drop_y = true,
                "drop_Ylr" | "drop_ylr" => out.drop_ylr = true,
                other => {
                    return Err(FuseError::Config(format!(
                        "unknown ablation {other:?} (expected drop_Zb, drop_Za, drop_Y or drop_Ylr)"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.drop_zb {
            v.push("drop_Zb");
        }
        if self.drop_za {
            v.push("drop_Za");
        }
        if self.drop_y {
            v.push("drop_Y");
        }
        if self.drop_ylr {
            v.push("drop_Ylr");
        }
        v
    }
}

/// Unweighted value of every term, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub za: f64,
    pub zb: f64,
    pub y: f64,
    pub ylr: f64,
    pub sum2one: f64,
    pub sparse: f64,
}

/// Effective coefficients after ablation.
#[derive(Debug, Clone, Copy)]
struct Coefficients {
    za: f64,
    zb: f64,
    y: f64,
    ylr: f64,
    s_a: f64,
    s_aha: f64,
    s_ahb: f64,
    sparse: f64,
}

fn coefficients(w: &LossWeights, ab: &Ablation) -> Coefficients {
    let on = |drop: bool, v: f64| if drop { 0.0 } else { v };
    Coefficients {
        za: on(ab.drop_za, 1.0),
        zb: on(ab.drop_zb, w.alpha),
        y: on(ab.drop_y, w.beta),
        ylr: on(ab.drop_ylr, w.gamma),
        s_a: w.mu,
        s_aha: w.mu,
        s_ahb: on(ab.drop_zb, w.mu),
        sparse: w.nu,
    }
}

fn reduce(total: f64, count: usize, r: Reduction) -> f64 {
    match r {
        Reduction::Mean => total / count.max(1) as f64,
        Reduction::Sum => total,
    }
}

fn l1(a: &Mat, b: &Mat, r: Reduction) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(FuseError::Shape(format!(
            "residual between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(reduce(s, a.data.len(), r))
}

/// Weighted sum of the four reconstruction residuals.
pub fn l_base(bundle: &ForwardBundle, z: &Mat, y: &Mat, w: &LossWeights) -> Result<f64> {
    let r = w.reduction;
    Ok(l1(z, &bundle.z_tilde_a, r)?
        + w.alpha * l1(z, &bundle.z_tilde_b, r)?
        + w.beta * l1(y, &bundle.y_tilde, r)?
        + w.gamma * l1(&bundle.y_lr_a, &bundle.y_lr_b, r)?)
}

/// `|1 - sum_c a_c|` reduced over the pixels of one abundance matrix.
pub fn sum2one_single(a: &Mat, r: Reduction) -> f64 {
    let s: f64 = (0..a.rows).map(|i| (1.0 - a.row(i).iter().sum::<f64>()).abs()).sum();
    reduce(s, a.rows, r)
}

pub fn l_sum2one(a: &Mat, a_h_a: &Mat, a_h_b: &Mat, r: Reduction) -> f64 {
    sum2one_single(a, r) + sum2one_single(a_h_a, r) + sum2one_single(a_h_b, r)
}

/// KL sparsity over one abundance matrix; under mean reduction the sum is
/// divided by `pixels * p`.
pub fn sparse_single(a: &Mat, target: f64, r: Reduction) -> f64 {
    let s: f64 = a
        .data
        .iter()
        .map(|&q| kl_bernoulli(target, q.clamp(EPS_KL, 1.0 - EPS_KL)))
        .sum();
    reduce(s, a.data.len(), r)
}

pub fn l_sparse(a: &Mat, a_h_a: &Mat, target: f64, r: Reduction) -> f64 {
    sparse_single(a, target, r) + sparse_single(a_h_a, target, r)
}

/// Full objective with per-term breakdown.
pub fn l_joint(
    bundle: &ForwardBundle,
    z: &Mat,
    y: &Mat,
    w: &LossWeights,
    ablation: &Ablation,
) -> Result<LossBreakdown> {
    let r = w.reduction;
    let c = coefficients(w, ablation);
    let za = l1(z, &bundle.z_tilde_a, r)?;
    let zb = l1(z, &bundle.z_tilde_b, r)?;
    let yv = l1(y, &bundle.y_tilde, r)?;
    let ylr = l1(&bundle.y_lr_a, &bundle.y_lr_b, r)?;
    let s = [
        sum2one_single(&bundle.a, r),
        sum2one_single(&bundle.a_h_a, r),
        sum2one_single(&bundle.a_h_b, r),
    ];
    let k = [
        sparse_single(&bundle.a, w.a_sparse, r),
        sparse_single(&bundle.a_h_a, w.a_sparse, r),
    ];
    let terms = [
        (za, c.za),
        (zb, c.zb),
        (yv, c.y),
        (ylr, c.ylr),
        (s[0], c.s_a),
        (s[1], c.s_aha),
        (s[2], c.s_ahb),
        (k[0], c.sparse),
        (k[1], c.sparse),
    ];
    let total = terms
        .iter()
        .filter(|(_, cw)| *cw != 0.0)
        .map(|(v, cw)| cw * v)
        .sum();
    Ok(LossBreakdown {
        total,
        za,
        zb,
        y: yv,
        ylr,
        sum2one: s.iter().sum(),
        sparse: k.iter().sum(),
    })
}

/// Tape nodes of every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub za: NodeId,
    pub zb: NodeId,
    pub y: NodeId,
    pub ylr: NodeId,
    pub sum2one: [NodeId; 3],
    pub sparse: [NodeId; 2],
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total),
            za: tape.scalar(self.za),
            zb: tape.scalar(self.zb),
            y: tape.scalar(self.y),
            ylr: tape.scalar(self.ylr),
            sum2one: self.sum2one.iter().map(|&n| tape.scalar(n)).sum(),
            sparse: self.sparse.iter().map(|&n| tape.scalar(n)).sum(),
        }
    }
}

/// Records the joint objective on top of a recorded forward graph.
pub fn record_loss(tape: &mut Tape, g: &Graph, w: &LossWeights, ablation: &Ablation) -> Result<LossNodes> {
    let r = w.reduction;
    let c = coefficients(w, ablation);
    let za = tape.abs_diff(g.z, g.z_tilde_a, r)?;
    let zb = tape.abs_diff(g.z, g.z_tilde_b, r)?;
    let y = tape.abs_diff(g.y, g.y_tilde, r)?;
    let ylr = tape.abs_diff(g.y_lr_a, g.y_lr_b, r)?;
    let s_a = tape.sum2one(g.a, r);
    let s_aha = tape.sum2one(g.a_h_a, r);
    let s_ahb = tape.sum2one(g.a_h_b, r);
    let k_a = tape.kl_sparse(g.a, w.a_sparse, EPS_KL, r);
    let k_aha = tape.kl_sparse(g.a_h_a, w.a_sparse, EPS_KL, r);
    let total = tape.weighted(&[
        (za, c.za),
        (zb, c.zb),
        (y, c.y),
        (ylr, c.ylr),
        (s_a, c.s_a),
        (s_aha, c.s_aha),
        (s_ahb, c.s_ahb),
        (k_a, c.sparse),
        (k_aha, c.sparse),
    ]);
    Ok(LossNodes {
        total,
        za,
        zb,
        y,
        ylr,
        sum2one: [s_a, s_aha, s_ahb],
        sparse: [k_a, k_aha],
    })
}
