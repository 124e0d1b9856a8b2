//! Featurewise sort pooling and its unpooling inverse.
//!
//! Each of the `d` feature rows is sorted independently, then reduced with
//! a per-row weight vector. The weights for a set of `n` elements come
//! from a piecewise-linear calibrator with `k` knots evaluated at the
//! ranks `r_j = j / (n - 1)`; since the calibrator is linear in its knots,
//! evaluating all ranks at once is a product with a constant `k × n`
//! interpolation matrix.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::sortops::{self, HardPerms, SortMode, SortOutcome};
use crate::tensor::Tensor;

/// Default number of calibrator knots.
pub const DEFAULT_KNOTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightInit {
    /// All ones: starts out as sum pooling.
    #[default]
    Ones,
    /// Independent standard normal draws.
    Gaussian,
}

/// Learnable `d × k` knot values, one calibrator per feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorWeights {
    pub w: Tensor,
}

impl CalibratorWeights {
    pub fn new(w: Tensor) -> Result<Self> {
        let (d, k) = w.dims2()?;
        if d < 1 || k < 2 {
            return Err(Error::Invalid(format!(
                "calibrator needs d >= 1 and k >= 2, got {d}x{k}"
            )));
        }
        Ok(Self { w })
    }

    pub fn init(d: usize, k: usize, init: WeightInit, rng: &mut impl Rng) -> Result<Self> {
        let data = match init {
            WeightInit::Ones => vec![1.0; d * k],
            WeightInit::Gaussian => (0..d * k).map(|_| rng.sample(StandardNormal)).collect(),
        };
        Self::new(Tensor::new(vec![d, k], data)?)
    }

    pub fn features(&self) -> usize {
        self.w.rows()
    }

    pub fn knots(&self) -> usize {
        self.w.cols()
    }
}

/// Piecewise-linear interpolation of `knots` at `r ∈ [0, 1]`.
pub fn calibrator_eval(knots: &[f64], r: f64) -> Result<f64> {
    let k = knots.len();
    if k < 2 {
        return Err(Error::Invalid(format!(
            "calibrator needs at least 2 knots, got {k}"
        )));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Invalid(format!(
            "calibrator position {r} outside [0, 1]"
        )));
    }
    let pos = r * (k - 1) as f64;
    Ok(knots
        .iter()
        .enumerate()
        .map(|(i, w)| (1.0 - (pos - i as f64).abs()).max(0.0) * w)
        .sum())
}

/// `k × n` matrix whose column `j` holds the calibrator's interpolation
/// coefficients at rank `r_j = j / (n - 1)` (`r = 0` when `n = 1`).
///
/// Knot positions `j (k - 1) / (n - 1)` are formed from exact integers, so
/// a rank that lands on a knot yields an exact one-hot column.
pub fn interpolation_matrix(k: usize, n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[k, n]);
    for j in 0..n {
        let (num, den) = if n == 1 { (0, 1) } else { (j * (k - 1), n - 1) };
        if num % den == 0 {
            m.set(num / den, j, 1.0);
            continue;
        }
        let pos = num as f64 / den as f64;
        let lo = pos.floor() as usize;
        m.set(lo, j, 1.0 - (pos - lo as f64));
        m.set(lo + 1, j, 1.0 - ((lo + 1) as f64 - pos));
    }
    m
}

/// Per-rank weights `d × n` for a set of size `n`.
pub fn rank_weights(g: &mut Graph, knots: Var, n: usize) -> Result<Var> {
    let k = g.value(knots).cols();
    let m = g.constant(interpolation_matrix(k, n));
    g.matmul(knots, m)
}

/// Row-wise dot products of already sorted features with per-rank weights.
pub fn fspool_fixed_var(g: &mut Graph, sorted: Var, weights: Var) -> Result<Var> {
    let prod = g.mul(sorted, weights)?;
    g.sum(prod, Some(Axis::Cols))
}

/// `y_i = sum_j W_ij X_ij` for a matrix already sorted along its rows.
pub fn fspool_fixed(sorted: &Tensor, weights: &Tensor) -> Result<Vec<f64>> {
    if sorted.shape() != weights.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            sorted.shape(),
            weights.shape()
        )));
    }
    let mut g = Graph::new();
    let s = g.constant(sorted.clone());
    let w = g.constant(weights.clone());
    let y = fspool_fixed_var(&mut g, s, w)?;
    Ok(g.value(y).data().to_vec())
}

/// What the pooling sort left behind for the decoder.
#[derive(Debug, Clone)]
pub enum StoredPerm {
    Hard(HardPerms),
    /// Graph node holding the `d × n × n` relaxed permutation matrices.
    Relaxed(Var),
}

/// Graph-level FSPool over the first `n_valid` columns of `x` (`d × n`).
///
/// Returns the pooled `d × 1` node and the permutations from the sort.
pub fn fspool_var(
    g: &mut Graph,
    x: Var,
    knots: Var,
    n_valid: usize,
    mode: SortMode,
    tau: f64,
) -> Result<(Var, StoredPerm)> {
    let (d, n) = g.value(x).dims2()?;
    if g.value(knots).rows() != d {
        return Err(Error::Shape(format!(
            "{} calibrators for {d} features",
            g.value(knots).rows()
        )));
    }
    if n_valid == 0 {
        return Err(Error::EmptySet("fspool over zero valid columns".into()));
    }
    let (sorted, perm) = match mode {
        SortMode::Hard => {
            let (s, p) = sortops::sort_rows_desc_var(g, x, n_valid)?;
            (s, StoredPerm::Hard(p))
        }
        SortMode::Relaxed => {
            if n_valid != n {
                return Err(Error::Invalid(
                    "relaxed sort requires sets without padding".into(),
                ));
            }
            let (s, p) = sortops::relaxed_sort_var(g, x, tau)?;
            (s, StoredPerm::Relaxed(p))
        }
    };
    let w = rank_weights(g, knots, n_valid)?;
    let y = fspool_fixed_var(g, sorted, w)?;
    Ok((y, perm))
}

/// FSPool on plain tensors; returns the pooled vector and the sort outcome.
pub fn fspool(
    x: &Tensor,
    weights: &CalibratorWeights,
    n_valid: usize,
    mode: SortMode,
    tau: f64,
) -> Result<(Vec<f64>, SortOutcome)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(weights.w.clone());
    let (y, _) = fspool_var(&mut g, xv, kv, n_valid, mode, tau)?;
    let outcome = match mode {
        SortMode::Hard => sortops::sort_rows_desc(x, n_valid)?,
        SortMode::Relaxed => sortops::relaxed_sort_rows(x, tau)?,
    };
    Ok((g.value(y).data().to_vec(), outcome))
}

/// Graph-level FSUnpool: spreads a `d × 1` vector over `n_valid` ranks.
pub fn fsunpool_var(g: &mut Graph, y: Var, knots: Var, n_valid: usize) -> Result<Var> {
    if n_valid == 0 {
        return Err(Error::EmptySet("fsunpool to zero columns".into()));
    }
    let (d, c) = g.value(y).dims2()?;
    if c != 1 || g.value(knots).rows() != d {
        return Err(Error::Shape(format!(
            "unpool of {d}x{c} with {} calibrators",
            g.value(knots).rows()
        )));
    }
    let w = rank_weights(g, knots, n_valid)?;
    g.mul(w, y)
}

/// FSUnpool on plain values; returns `d × n_valid` in sorted order.
pub fn fsunpool(y: &[f64], weights: &CalibratorWeights, n_valid: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let yv = g.constant(Tensor::column(y.to_vec())?);
    let kv = g.constant(weights.w.clone());
    let out = fsunpool_var(&mut g, yv, kv, n_valid)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselinePool {
    Sum,
    Mean,
    Max,
}

struct MaskedMaxOp {
    argmax: Vec<usize>,
    cols: usize,
}

impl CustomOp for MaskedMaxOp {
    fn name(&self) -> &'static str {
        "masked-max"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        for (i, &j) in self.argmax.iter().enumerate() {
            gx.data_mut()[i * self.cols + j] = grad.data()[i];
        }
        vec![Some(gx)]
    }
}

/// Masked sum/mean/max over the columns of `x` (`d × n`); `mask` has one
/// entry per column, non-zero meaning present. Returns `d × 1`.
pub fn baseline_pool_var(g: &mut Graph, x: Var, mask: &[f64], kind: BaselinePool) -> Result<Var> {
    let (d, n) = g.value(x).dims2()?;
    if mask.len() != n {
        return Err(Error::Shape(format!(
            "mask of {} for {n} columns",
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::EmptySet("pooling an empty set".into()));
    }
    match kind {
        BaselinePool::Sum | BaselinePool::Mean => {
            let sel: Vec<f64> = mask
                .iter()
                .map(|&m| if m != 0.0 { 1.0 } else { 0.0 })
                .collect();
            let mv = g.constant(Tensor::column(sel)?);
            let s = g.matmul(x, mv)?;
            if kind == BaselinePool::Mean {
                g.scale(s, 1.0 / count as f64)
            } else {
                Ok(s)
            }
        }
        BaselinePool::Max => {
            let xt = g.value(x);
            let mut argmax = Vec::with_capacity(d);
            let mut out = Vec::with_capacity(d);
            for i in 0..d {
                let r = xt.row(i);
                let mut best: Option<usize> = None;
                for j in (0..n).filter(|&j| mask[j] != 0.0) {
                    if best.is_none_or(|b| r[j] > r[b]) {
                        best = Some(j);
                    }
                }
                let b = best.expect("non-empty mask");
                argmax.push(b);
                out.push(r[b]);
            }
            let value = Tensor::column(out)?;
            g.custom(&[x], value, Box::new(MaskedMaxOp { argmax, cols: n }))
        }
    }
}

pub fn baseline_pool(x: &Tensor, mask: &[f64], kind: BaselinePool) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = baseline_pool_var(&mut g, xv, mask, kind)?;
    Ok(g.value(y).data().to_vec())
}
