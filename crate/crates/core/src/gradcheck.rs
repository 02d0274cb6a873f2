//! Central finite-difference check of tape gradients.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cube::Mat;
use crate::error::Result;
use crate::losses::{l_joint, record_loss, Ablation, LossWeights};
use crate::net::{record_forward, Dims, ForwardBundle, ModelParams};
use crate::tape::{Gradients, Tape};

/// Anything with named, flat parameter groups.
pub trait Parameterized: Clone {
    fn groups(&self) -> Vec<(String, usize)>;
    fn coord_mut(&mut self, group: &str, idx: usize) -> &mut f64;
}

impl Parameterized for ModelParams {
    fn groups(&self) -> Vec<(String, usize)> {
        self.views().into_iter().map(|v| (v.name, v.data.len())).collect()
    }

    fn coord_mut(&mut self, group: &str, idx: usize) -> &mut f64 {
        let view = self
            .views_mut()
            .into_iter()
            .find(|v| v.name == group)
            .unwrap_or_else(|| panic!("unknown parameter group {group}"));
        &mut view.data[idx]
    }
}

impl Parameterized for BTreeMap<String, Vec<f64>> {
    fn groups(&self) -> Vec<(String, usize)> {
        self.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    fn coord_mut(&mut self, group: &str, idx: usize) -> &mut f64 {
        &mut self.get_mut(group).expect("unknown parameter group")[idx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates sampled per group (all of them when the group is smaller).
    pub coords_per_group: usize,
    /// Denominator floor of the relative error. Central differences of an
    /// O(10) loss at `h = 1e-5` carry ~1e-10 of rounding noise, so gradients
    /// below this floor are judged on absolute error `tolerance * abs_floor`.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            h: 1e-5,
            tolerance: 1e-4,
            coords_per_group: 64,
            abs_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub sampled: usize,
    pub checked: usize,
    pub kink_skipped: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub groups: Vec<GroupReport>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.pass).map(|g| g.group.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,sampled,checked,kink_skipped,max_rel_err,pass\n");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{},{},{},{},{:e},{}",
                g.group, g.sampled, g.checked, g.kink_skipped, g.max_rel_err, g.pass
            );
        }
        s
    }
}

/// Compares `analytic` against `(f(θ+h) - f(θ-h)) / 2h` on sampled
/// coordinates. `eval` returns the loss and a branch signature; a coordinate
/// whose perturbation changes the signature straddles a kink and is skipped.
pub fn fd_check<P, F>(params: &P, analytic: &Gradients, eval: F, opts: &FdOptions) -> Result<FdReport>
where
    P: Parameterized,
    F: Fn(&P) -> Result<(f64, Vec<u8>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (_, base_sig) = eval(params)?;
    let mut reports = Vec::new();
    for (group, len) in params.groups() {
        let grad = analytic.get_or_zeros(&group, len);
        let coords: Vec<usize> = if len <= opts.coords_per_group {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, opts.coords_per_group).into_vec();
            v.sort_unstable();
            v
        };
        let mut work = params.clone();
        let mut checked = 0;
        let mut skipped = 0;
        let mut max_rel: f64 = 0.0;
        for &i in &coords {
            let orig = *work.coord_mut(&group, i);
            *work.coord_mut(&group, i) = orig + opts.h;
            let (fp, sp) = eval(&work)?;
            *work.coord_mut(&group, i) = orig - opts.h;
            let (fm, sm) = eval(&work)?;
            *work.coord_mut(&group, i) = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * opts.h);
            let a = grad[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.abs_floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        reports.push(GroupReport {
            pass: max_rel <= opts.tolerance && checked > 0,
            group,
            sampled: coords.len(),
            checked,
            kink_skipped: skipped,
            max_rel_err: max_rel,
        });
    }
    Ok(FdReport { groups: reports })
}

/// Analytic gradient of the joint objective via the tape.
pub fn joint_gradients(
    z: &Mat,
    y: &Mat,
    dims: Dims,
    params: &ModelParams,
    weights: &LossWeights,
    ablation: &Ablation,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(true);
    let g = record_forward(&mut tape, z, y, dims, params)?;
    let loss = record_loss(&mut tape, &g, weights, ablation)?;
    Ok((tape.scalar(loss.total), tape.backward(loss.total)?))
}

/// Loss value from the direct (tape-free) loss functions, plus the branch
/// signature of the recorded graph.
pub fn joint_value(
    z: &Mat,
    y: &Mat,
    dims: Dims,
    params: &ModelParams,
    weights: &LossWeights,
    ablation: &Ablation,
) -> Result<(f64, Vec<u8>)> {
    let mut tape = Tape::new(true);
    let g = record_forward(&mut tape, z, y, dims, params)?;
    record_loss(&mut tape, &g, weights, ablation)?;
    let bundle = ForwardBundle::from_graph(&tape, &g);
    let value = l_joint(&bundle, z, y, weights, ablation)?.total;
    Ok((value, tape.branch_signature()))
}

/// Runs [`fd_check`] on the joint objective.
pub fn check_joint(
    z: &Mat,
    y: &Mat,
    dims: Dims,
    params: &ModelParams,
    weights: &LossWeights,
    ablation: &Ablation,
    opts: &FdOptions,
) -> Result<FdReport> {
    let (_, grads) = joint_gradients(z, y, dims, params, weights, ablation)?;
    fd_check(
        params,
        &grads,
        |p| joint_value(z, y, dims, p, weights, ablation),
        opts,
    )
}
