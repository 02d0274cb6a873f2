//! Reverse-mode gradient tape over the closed set of operations the fusion
//! network needs.
//!
//! Every node stores its forward value as a row-major matrix (pixels x
//! channels for images, `1 x 1` for scalar losses). `backward` walks the
//! nodes once in reverse insertion order and returns adjoints for every
//! named parameter leaf.
//!
//! Non-smooth ops follow these conventions:
//! - clamp to `[0, 1]`: derivative 1 strictly inside, 0 elsewhere;
//! - leaky activation: derivative 1 for `x > 0`, `slope` otherwise;
//! - L1 residuals: subgradient `sign(r)` with `sign(0) = 0`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::cube::Mat;
use crate::error::{FuseError, Result};

pub type NodeId = usize;

/// Row block used for parallel weight-gradient reductions in reproducible
/// mode. Fixed so results do not depend on the thread count.
const REDUCTION_CHUNK: usize = 256;

/// How per-element residuals are folded into a scalar loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    /// `x (n x in) * w (in x out) + b`.
    Dense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Leaky {
        x: NodeId,
        slope: f64,
    },
    Clamp01 {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    /// Stride-k, k x k block filter with one shared kernel for every channel.
    BlockConv {
        x: NodeId,
        kernel: NodeId,
        img_cols: usize,
        k: usize,
    },
    /// Masked weighted band sum divided by the weight total (plus `eps`).
    SrfNorm {
        x: NodeId,
        w: NodeId,
        sets: Arc<Vec<Vec<usize>>>,
        offsets: Arc<Vec<usize>>,
        eps: f64,
    },
    AbsDiff {
        a: NodeId,
        b: NodeId,
        reduction: Reduction,
    },
    Sum2One {
        x: NodeId,
        reduction: Reduction,
    },
    KlSparse {
        x: NodeId,
        target: f64,
        eps: f64,
        reduction: Reduction,
    },
    SumSquares {
        x: NodeId,
    },
    Weighted {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Adjoints keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.by_name.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<f64>) {
        self.by_name.insert(name.into(), grad);
    }

    /// Gradient for `name`, or zeros of length `len` (with a warning) when
    /// the parameter never reached the tape.
    pub fn get_or_zeros(&self, name: &str, len: usize) -> Vec<f64> {
        match self.by_name.get(name) {
            Some(g) => g.clone(),
            None => {
                log::warn!("parameter {name} absent from tape; using zero gradient");
                vec![0.0; len]
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    reproducible: bool,
}

impl Tape {
    /// In reproducible mode all parallel reductions use a fixed partition,
    /// so results are bit-identical across runs and thread counts.
    pub fn new(reproducible: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            reproducible,
        }
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data[0]
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Mat) -> NodeId {
        self.push(value, Op::Param(name.into()), true)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, din) = self.value(x).shape();
        let (win, dout) = self.value(w).shape();
        if din != win {
            return Err(FuseError::Shape(format!(
                "dense: input width {din} but weight has {win} rows"
            )));
        }
        if let Some(b) = b {
            if self.value(b).data.len() != dout {
                return Err(FuseError::Shape(format!(
                    "dense: bias length {} for {dout} outputs",
                    self.value(b).data.len()
                )));
            }
        }
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = b.map(|b| self.value(b).data.as_slice());
        let mut out = vec![0.0; n * dout];
        out.par_chunks_mut(dout.max(1))
            .zip(xv.par_chunks(din.max(1)))
            .for_each(|(orow, xrow)| {
                if let Some(bv) = bv {
                    orow.copy_from_slice(bv);
                }
                for (k, &xk) in xrow.iter().enumerate() {
                    if xk != 0.0 {
                        let wrow = &wv[k * dout..(k + 1) * dout];
                        for (o, &wkj) in orow.iter_mut().zip(wrow) {
                            *o += xk * wkj;
                        }
                    }
                }
            });
        let rg = self.grad_of(&[x, w]) || b.map_or(false, |b| self.nodes[b].requires_grad);
        Ok(self.push(Mat::from_vec(n, dout, out)?, Op::Dense { x, w, b }, rg))
    }

    pub fn leaky(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.value(x);
        let data = v
            .data
            .iter()
            .map(|&a| if a > 0.0 { a } else { slope * a })
            .collect();
        let value = Mat {
            rows: v.rows,
            cols: v.cols,
            data,
        };
        let rg = self.grad_of(&[x]);
        self.push(value, Op::Leaky { x, slope }, rg)
    }

    pub fn clamp01(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = crate::cube::clamp01(&v.data)?;
        let value = Mat {
            rows: v.rows,
            cols: v.cols,
            data,
        };
        let rg = self.grad_of(&[x]);
        Ok(self.push(value, Op::Clamp01 { x }, rg))
    }

    /// Row-wise softmax over channels.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = softmax_rows(v);
        let rg = self.grad_of(&[x]);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// `x` holds an `img_rows x img_cols` image (pixel-major); `kernel` is a
    /// `k x k` matrix applied with stride `k` to every channel.
    pub fn block_conv(&mut self, x: NodeId, kernel: NodeId, img_rows: usize, img_cols: usize) -> Result<NodeId> {
        let (kr, kc) = self.value(kernel).shape();
        if kr != kc || kr == 0 {
            return Err(FuseError::Shape(format!("PSF kernel must be square, got {kr}x{kc}")));
        }
        let k = kr;
        crate::degrade::check_divisible(img_rows, img_cols, k)?;
        let xv = self.value(x);
        if xv.rows != img_rows * img_cols {
            return Err(FuseError::Shape(format!(
                "block conv: {} pixels for a {img_rows}x{img_cols} image",
                xv.rows
            )));
        }
        let value = block_conv_forward(xv, &self.value(kernel).data, img_rows, img_cols, k);
        let rg = self.grad_of(&[x, kernel]);
        Ok(self.push(value, Op::BlockConv { x, kernel, img_cols, k }, rg))
    }

    /// `w` is a flat weight vector laid out by `offsets` over `sets`.
    pub fn srf_norm(
        &mut self,
        x: NodeId,
        w: NodeId,
        sets: Arc<Vec<Vec<usize>>>,
        eps: f64,
    ) -> Result<NodeId> {
        let mut offsets = vec![0];
        for s in sets.iter() {
            offsets.push(offsets.last().unwrap() + s.len());
        }
        let xv = self.value(x);
        let wv = &self.value(w).data;
        if wv.len() != *offsets.last().unwrap() {
            return Err(FuseError::Shape(format!(
                "SRF: {} weights for {} covered bands",
                wv.len(),
                offsets.last().unwrap()
            )));
        }
        if let Some(&j) = sets.iter().flatten().find(|&&j| j >= xv.cols) {
            return Err(FuseError::Shape(format!(
                "SRF: band index {j} out of range for {} bands",
                xv.cols
            )));
        }
        let value = srf_forward_raw(xv, wv, &sets, &offsets, eps);
        let rg = self.grad_of(&[x, w]);
        Ok(self.push(
            value,
            Op::SrfNorm {
                x,
                w,
                sets,
                offsets: Arc::new(offsets),
                eps,
            },
            rg,
        ))
    }

    /// L1 distance between two same-shape nodes.
    pub fn abs_diff(&mut self, a: NodeId, b: NodeId, reduction: Reduction) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(FuseError::Shape(format!(
                "L1 residual between {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let total: f64 = av.data.iter().zip(&bv.data).map(|(x, y)| (x - y).abs()).sum();
        let v = reduce(total, av.data.len(), reduction);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Mat::filled(1, 1, v), Op::AbsDiff { a, b, reduction }, rg))
    }

    /// Per-pixel `|1 - sum_c x_c|`, reduced over pixels.
    pub fn sum2one(&mut self, x: NodeId, reduction: Reduction) -> NodeId {
        let xv = self.value(x);
        let total: f64 = (0..xv.rows)
            .map(|r| (1.0 - xv.row(r).iter().sum::<f64>()).abs())
            .sum();
        let v = reduce(total, xv.rows, reduction);
        let rg = self.grad_of(&[x]);
        self.push(Mat::filled(1, 1, v), Op::Sum2One { x, reduction }, rg)
    }

    /// Bernoulli KL divergence `KL(target || q)` with `q` the input clamped
    /// into `[eps, 1 - eps]`, summed (or averaged) over all entries.
    pub fn kl_sparse(&mut self, x: NodeId, target: f64, eps: f64, reduction: Reduction) -> NodeId {
        let xv = self.value(x);
        let total: f64 = xv.data.iter().map(|&q| kl_bernoulli(target, q.clamp(eps, 1.0 - eps))).sum();
        let v = reduce(total, xv.data.len(), reduction);
        let rg = self.grad_of(&[x]);
        self.push(
            Mat::filled(1, 1, v),
            Op::KlSparse {
                x,
                target,
                eps,
                reduction,
            },
            rg,
        )
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let v: f64 = self.value(x).data.iter().map(|a| a * a).sum();
        let rg = self.grad_of(&[x]);
        self.push(Mat::filled(1, 1, v), Op::SumSquares { x }, rg)
    }

    /// `sum_t w_t * v_t` over scalar nodes. Zero-weight terms are dropped
    /// entirely, so they contribute neither value nor gradient.
    pub fn weighted(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let kept: Vec<(NodeId, f64)> = terms.iter().copied().filter(|&(_, w)| w != 0.0).collect();
        let v: f64 = kept.iter().map(|&(id, w)| w * self.scalar(id)).sum();
        let rg = kept.iter().any(|&(id, _)| self.nodes[id].requires_grad);
        self.push(Mat::filled(1, 1, v), Op::Weighted { terms: kept }, rg)
    }

    /// Branch pattern of every non-smooth op. Two parameter settings with
    /// equal patterns lie on the same smooth piece of the loss.
    pub fn branch_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Clamp01 { x } => sig.extend(self.value(*x).data.iter().map(|&v| region(v, 0.0, 1.0))),
                Op::Leaky { x, .. } => sig.extend(self.value(*x).data.iter().map(|&v| (v > 0.0) as u8)),
                Op::AbsDiff { a, b, .. } => sig.extend(
                    self.value(*a)
                        .data
                        .iter()
                        .zip(&self.value(*b).data)
                        .map(|(x, y)| sign_code(x - y)),
                ),
                Op::Sum2One { x, .. } => {
                    let xv = self.value(*x);
                    sig.extend((0..xv.rows).map(|r| sign_code(1.0 - xv.row(r).iter().sum::<f64>())));
                }
                Op::KlSparse { x, eps, .. } => {
                    sig.extend(self.value(*x).data.iter().map(|&v| region(v, *eps, 1.0 - eps)))
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).data.len() != 1 {
            return Err(FuseError::Shape("backward needs a scalar loss node".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss] = Some(vec![1.0]);
        let mut grads = Gradients::default();

        for id in (0..=loss).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    grads.insert(name.clone(), g);
                }
                Op::Dense { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (din, dout) = wv.shape();
                    if self.nodes[*x].requires_grad {
                        let mut dx = vec![0.0; xv.data.len()];
                        dx.par_chunks_mut(din.max(1))
                            .zip(g.par_chunks(dout.max(1)))
                            .for_each(|(dxrow, grow)| {
                                for (k, d) in dxrow.iter_mut().enumerate() {
                                    let wrow = &wv.data[k * dout..(k + 1) * dout];
                                    *d = dot(grow, wrow);
                                }
                            });
                        accumulate(&mut adj[*x], dx);
                    }
                    if self.nodes[*w].requires_grad {
                        let dw = self.chunked_sum(xv.rows, din * dout, |range, acc| {
                            for i in range {
                                let xrow = xv.row(i);
                                let grow = &g[i * dout..(i + 1) * dout];
                                for (k, &xk) in xrow.iter().enumerate() {
                                    if xk != 0.0 {
                                        let arow = &mut acc[k * dout..(k + 1) * dout];
                                        for (a, &gj) in arow.iter_mut().zip(grow) {
                                            *a += xk * gj;
                                        }
                                    }
                                }
                            }
                        });
                        accumulate(&mut adj[*w], dw);
                    }
                    if let Some(b) = b {
                        if self.nodes[*b].requires_grad {
                            let mut db = vec![0.0; dout];
                            for grow in g.chunks(dout.max(1)) {
                                for (d, &gj) in db.iter_mut().zip(grow) {
                                    *d += gj;
                                }
                            }
                            accumulate(&mut adj[*b], db);
                        }
                    }
                }
                Op::Leaky { x, slope } => {
                    let xv = &self.value(*x).data;
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { slope * gi })
                        .collect();
                    accumulate(&mut adj[*x], dx);
                }
                Op::Clamp01 { x } => {
                    let xv = &self.value(*x).data;
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > 0.0 && xi < 1.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[*x], dx);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let c = y.cols;
                    let mut dx = vec![0.0; y.data.len()];
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let s = dot(gr, yr);
                        for j in 0..c {
                            dx[r * c + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut adj[*x], dx);
                }
                Op::BlockConv { x, kernel, img_cols, k } => {
                    let xv = self.value(*x);
                    let kv = &self.value(*kernel).data;
                    let (k, img_cols) = (*k, *img_cols);
                    let ch = xv.cols;
                    let out_cols = img_cols / k;
                    let out_pixels = node.value.rows;
                    if self.nodes[*x].requires_grad {
                        let mut dx = vec![0.0; xv.data.len()];
                        for o in 0..out_pixels {
                            let (i, j) = (o / out_cols, o % out_cols);
                            let go = &g[o * ch..(o + 1) * ch];
                            for u in 0..k {
                                for v in 0..k {
                                    let w = kv[u * k + v];
                                    let p = (i * k + u) * img_cols + j * k + v;
                                    for (d, &gc) in dx[p * ch..(p + 1) * ch].iter_mut().zip(go) {
                                        *d += w * gc;
                                    }
                                }
                            }
                        }
                        accumulate(&mut adj[*x], dx);
                    }
                    if self.nodes[*kernel].requires_grad {
                        let mut dk = vec![0.0; k * k];
                        for o in 0..out_pixels {
                            let (i, j) = (o / out_cols, o % out_cols);
                            let go = &g[o * ch..(o + 1) * ch];
                            for u in 0..k {
                                for v in 0..k {
                                    let p = (i * k + u) * img_cols + j * k + v;
                                    dk[u * k + v] += dot(go, xv.row(p));
                                }
                            }
                        }
                        accumulate(&mut adj[*kernel], dk);
                    }
                }
                Op::SrfNorm {
                    x,
                    w,
                    sets,
                    offsets,
                    eps,
                } => {
                    let xv = self.value(*x);
                    let wv = &self.value(*w).data;
                    let out = &node.value;
                    let m = out.cols;
                    let denoms: Vec<f64> = (0..m)
                        .map(|i| wv[offsets[i]..offsets[i + 1]].iter().sum::<f64>() + eps)
                        .collect();
                    if self.nodes[*x].requires_grad {
                        let mut dx = vec![0.0; xv.data.len()];
                        for r in 0..xv.rows {
                            for (i, set) in sets.iter().enumerate() {
                                let gi = g[r * m + i] / denoms[i];
                                for (t, &j) in set.iter().enumerate() {
                                    dx[r * xv.cols + j] += gi * wv[offsets[i] + t];
                                }
                            }
                        }
                        accumulate(&mut adj[*x], dx);
                    }
                    if self.nodes[*w].requires_grad {
                        let mut dw = vec![0.0; wv.len()];
                        for r in 0..xv.rows {
                            let xr = xv.row(r);
                            for (i, set) in sets.iter().enumerate() {
                                let gi = g[r * m + i] / denoms[i];
                                let oi = out.data[r * m + i];
                                for (t, &j) in set.iter().enumerate() {
                                    dw[offsets[i] + t] += gi * (xr[j] - oi);
                                }
                            }
                        }
                        accumulate(&mut adj[*w], dw);
                    }
                }
                Op::AbsDiff { a, b, reduction } => {
                    let av = &self.value(*a).data;
                    let bv = &self.value(*b).data;
                    let scale = g[0] * reduce(1.0, av.len(), *reduction);
                    let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * sign(x - y)).collect();
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut adj[*b], da.iter().map(|v| -v).collect());
                    }
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut adj[*a], da);
                    }
                }
                Op::Sum2One { x, reduction } => {
                    let xv = self.value(*x);
                    let scale = g[0] * reduce(1.0, xv.rows, *reduction);
                    let mut dx = vec![0.0; xv.data.len()];
                    for r in 0..xv.rows {
                        let s = -scale * sign(1.0 - xv.row(r).iter().sum::<f64>());
                        dx[r * xv.cols..(r + 1) * xv.cols].iter_mut().for_each(|d| *d = s);
                    }
                    accumulate(&mut adj[*x], dx);
                }
                Op::KlSparse {
                    x,
                    target,
                    eps,
                    reduction,
                } => {
                    let xv = &self.value(*x).data;
                    let scale = g[0] * reduce(1.0, xv.len(), *reduction);
                    let dx = xv
                        .iter()
                        .map(|&q| {
                            if q > *eps && q < 1.0 - eps {
                                scale * (q - target) / (q * (1.0 - q))
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut adj[*x], dx);
                }
                Op::SumSquares { x } => {
                    let dx = self.value(*x).data.iter().map(|v| 2.0 * g[0] * v).collect();
                    accumulate(&mut adj[*x], dx);
                }
                Op::Weighted { terms } => {
                    for &(t, w) in terms {
                        if self.nodes[t].requires_grad {
                            accumulate(&mut adj[t], vec![w * g[0]]);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Sums per-row contributions into a `len`-vector. Rows are split into
    /// blocks whose partial sums are added in block order.
    fn chunked_sum<F>(&self, rows: usize, len: usize, f: F) -> Vec<f64>
    where
        F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
    {
        let chunk = if self.reproducible {
            REDUCTION_CHUNK
        } else {
            rows.div_ceil(rayon::current_num_threads()).max(1)
        };
        let starts: Vec<usize> = (0..rows).step_by(chunk.max(1)).collect();
        let partials: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let mut acc = vec![0.0; len];
                f(s..(s + chunk).min(rows), &mut acc);
                acc
            })
            .collect();
        let mut out = vec![0.0; len];
        for p in partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign_code(v: f64) -> u8 {
    (sign(v) + 1.0) as u8
}

fn region(v: f64, lo: f64, hi: f64) -> u8 {
    if v <= lo {
        0
    } else if v >= hi {
        2
    } else {
        1
    }
}

fn reduce(total: f64, count: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => total / count.max(1) as f64,
        Reduction::Sum => total,
    }
}

/// `a log(a/q) + (1-a) log((1-a)/(1-q))`.
pub fn kl_bernoulli(a: f64, q: f64) -> f64 {
    a * (a / q).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - q)).ln()
}

pub(crate) fn softmax_rows(v: &Mat) -> Mat {
    let mut data = vec![0.0; v.data.len()];
    for r in 0..v.rows {
        let row = v.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[r * v.cols..(r + 1) * v.cols];
        let mut s = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x - m).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }
    Mat {
        rows: v.rows,
        cols: v.cols,
        data,
    }
}

pub(crate) fn block_conv_forward(x: &Mat, kernel: &[f64], img_rows: usize, img_cols: usize, k: usize) -> Mat {
    let ch = x.cols;
    let (out_rows, out_cols) = (img_rows / k, img_cols / k);
    let mut out = vec![0.0; out_rows * out_cols * ch];
    out.par_chunks_mut(out_cols * ch)
        .enumerate()
        .for_each(|(i, orow)| {
            for j in 0..out_cols {
                let o = &mut orow[j * ch..(j + 1) * ch];
                for u in 0..k {
                    for v in 0..k {
                        let w = kernel[u * k + v];
                        let p = (i * k + u) * img_cols + j * k + v;
                        for (a, &xv) in o.iter_mut().zip(x.row(p)) {
                            *a += w * xv;
                        }
                    }
                }
            }
        });
    Mat {
        rows: out_rows * out_cols,
        cols: ch,
        data: out,
    }
}

pub(crate) fn srf_forward_raw(
    x: &Mat,
    w: &[f64],
    sets: &[Vec<usize>],
    offsets: &[usize],
    eps: f64,
) -> Mat {
    let m = sets.len();
    let denoms: Vec<f64> = (0..m)
        .map(|i| w[offsets[i]..offsets[i + 1]].iter().sum::<f64>() + eps)
        .collect();
    let mut out = vec![0.0; x.rows * m];
    for r in 0..x.rows {
        let xr = x.row(r);
        for (i, set) in sets.iter().enumerate() {
            let num: f64 = set
                .iter()
                .zip(&w[offsets[i]..offsets[i + 1]])
                .map(|(&j, &wj)| wj * xr[j])
                .sum();
            out[r * m + i] = num / denoms[i];
        }
    }
    Mat {
        rows: x.rows,
        cols: m,
        data: out,
    }
}
