//! Row-wise descending sorts with recoverable permutations.
//!
//! The hard sort is a stable comparison sort whose backward pass routes
//! gradients along the chosen permutation. The relaxed sort produces, for
//! each row with scores `s` of length `n`, a row-stochastic matrix whose
//! `a`-th row is `softmax(((n + 1 - 2a) s - |s_j - s_k| 1) / tau)`
//! (1-based `a`), which approaches the hard descending permutation as
//! `tau -> 0`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hard permutation per row: `perm[i][j]` is the original column of
/// sorted position `j` in row `i`.
pub type HardPerms = Vec<Vec<usize>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SortMode {
    #[default]
    Hard,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Permutations {
    Hard(HardPerms),
    /// `d × n × n`; slice `i` is the relaxed permutation matrix of row `i`.
    Relaxed(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortOutcome {
    pub sorted: Tensor,
    pub perm: Permutations,
    pub temperature: Option<f64>,
}

impl SortOutcome {
    pub fn mode(&self) -> SortMode {
        match self.perm {
            Permutations::Hard(_) => SortMode::Hard,
            Permutations::Relaxed(_) => SortMode::Relaxed,
        }
    }
}

fn stable_desc_order(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // slice::sort_by is stable, so ties keep their original column order
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx
}

fn hard_perms(x: &Tensor, n_valid: usize) -> Result<HardPerms> {
    let (d, n) = x.dims2()?;
    if n_valid == 0 {
        return Err(Error::EmptySet("sort over zero valid columns".into()));
    }
    if n_valid > n {
        return Err(Error::Shape(format!(
            "n_valid {n_valid} exceeds {n} columns"
        )));
    }
    Ok((0..d)
        .map(|i| stable_desc_order(&x.row(i)[..n_valid]))
        .collect())
}

fn gather(x: &Tensor, perms: &HardPerms) -> Tensor {
    let n = x.cols();
    let m = perms[0].len();
    let mut out = Vec::with_capacity(perms.len() * m);
    for (i, p) in perms.iter().enumerate() {
        out.extend(p.iter().map(|&src| x.data()[i * n + src]));
    }
    Tensor::new(vec![perms.len(), m], out).expect("gather shape")
}

/// Sorts the first `n_valid` columns of every row in descending order.
///
/// The returned `sorted` tensor is `d × n_valid`; trailing padding columns
/// never take part.
pub fn sort_rows_desc(x: &Tensor, n_valid: usize) -> Result<SortOutcome> {
    let perms = hard_perms(x, n_valid)?;
    Ok(SortOutcome {
        sorted: gather(x, &perms),
        perm: Permutations::Hard(perms),
        temperature: None,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Relaxed permutation matrices for every row of `x` (`d × n`), shape `d × n × n`.
pub fn relaxed_perm_matrices(x: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let (d, n) = x.dims2()?;
    let mut out = vec![0.0; d * n * n];
    let mut logits = vec![0.0; n];
    for i in 0..d {
        let s = x.row(i);
        let spread: Vec<f64> = s
            .iter()
            .map(|&sj| s.iter().map(|&sk| (sj - sk).abs()).sum())
            .collect();
        for a in 0..n {
            let coef = (n as f64) + 1.0 - 2.0 * (a as f64 + 1.0);
            for j in 0..n {
                logits[j] = (coef * s[j] - spread[j]) / tau;
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let row = &mut out[(i * n + a) * n..(i * n + a + 1) * n];
            let mut z = 0.0;
            for (r, l) in row.iter_mut().zip(&logits) {
                *r = (l - m).exp();
                z += *r;
            }
            row.iter_mut().for_each(|r| *r /= z);
        }
    }
    Tensor::new(vec![d, n, n], out)
}

fn row_matvec(p: &Tensor, x: &Tensor) -> Tensor {
    let (d, n) = (x.rows(), x.cols());
    let (pd, xd) = (p.data(), x.data());
    let mut out = vec![0.0; d * n];
    for i in 0..d {
        for a in 0..n {
            let prow = &pd[(i * n + a) * n..(i * n + a + 1) * n];
            out[i * n + a] = prow
                .iter()
                .zip(&xd[i * n..(i + 1) * n])
                .map(|(p, x)| p * x)
                .sum();
        }
    }
    Tensor::new(vec![d, n], out).expect("matvec shape")
}

/// Relaxed sort of every row: `sorted_i = P_i s_i`.
pub fn relaxed_sort_rows(x: &Tensor, tau: f64) -> Result<SortOutcome> {
    let p = relaxed_perm_matrices(x, tau)?;
    Ok(SortOutcome {
        sorted: row_matvec(&p, x),
        perm: Permutations::Relaxed(p),
        temperature: Some(tau),
    })
}

fn check_bijection(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Invalid(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

/// Inverse of a hard sort: `out[perm[j]] = row[j]`.
pub fn unsort_hard(row: &[f64], perm: &[usize]) -> Result<Vec<f64>> {
    if row.len() != perm.len() {
        return Err(Error::Shape(format!(
            "row of {} with perm of {}",
            row.len(),
            perm.len()
        )));
    }
    check_bijection(perm)?;
    let mut out = vec![0.0; row.len()];
    for (j, &p) in perm.iter().enumerate() {
        out[p] = row[j];
    }
    Ok(out)
}

/// Unsorts with a relaxed permutation matrix `P` (`n × n`, rows indexed by
/// sorted position): `out_b = sum_a row_a P_ab`, i.e. `P^T` applied to the row.
pub fn unsort_relaxed(row: &[f64], p: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = p.dims2()?;
    if r != row.len() || c != row.len() {
        return Err(Error::Shape(format!(
            "row of {} with {r}x{c} matrix",
            row.len()
        )));
    }
    let mut out = vec![0.0; c];
    for (a, &v) in row.iter().enumerate() {
        for (o, &pv) in out.iter_mut().zip(p.row(a)) {
            *o += v * pv;
        }
    }
    Ok(out)
}

/// Dense `n × n` matrix of a hard permutation (`P[j][perm[j]] = 1`).
pub fn hard_perm_matrix(perm: &[usize]) -> Tensor {
    let n = perm.len();
    let mut t = Tensor::zeros(&[n, n]);
    for (j, &p) in perm.iter().enumerate() {
        t.set(j, p, 1.0);
    }
    t
}

/// Temperature of the relaxed sort over the course of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    /// Linearly decay from `start` to `floor` over the run.
    pub decay: bool,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            decay: false,
            floor: 0.01,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        if !self.decay || total_steps <= 1 {
            return self.start;
        }
        let frac = step as f64 / (total_steps - 1) as f64;
        (self.start + (self.floor - self.start) * frac).max(self.floor.min(self.start))
    }
}

// ---------------------------------------------------------------------------
// Graph operators

struct GatherOp {
    perms: HardPerms,
    n_in: usize,
}

impl CustomOp for GatherOp {
    fn name(&self) -> &'static str {
        "sort-gather"
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let m = output.cols();
        let mut gx = Tensor::zeros(&[self.perms.len(), self.n_in]);
        let gd = gx.data_mut();
        for (i, p) in self.perms.iter().enumerate() {
            for (j, &src) in p.iter().enumerate() {
                gd[i * self.n_in + src] += grad.data()[i * m + j];
            }
        }
        vec![Some(gx)]
    }
}

struct ScatterOp {
    perms: HardPerms,
}

impl CustomOp for ScatterOp {
    fn name(&self) -> &'static str {
        "unsort-scatter"
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = output.cols();
        let mut gy = Tensor::zeros(output.shape());
        let gd = gy.data_mut();
        for (i, p) in self.perms.iter().enumerate() {
            for (j, &dst) in p.iter().enumerate() {
                gd[i * n + j] = grad.data()[i * n + dst];
            }
        }
        vec![Some(gy)]
    }
}

struct RelaxedPermOp {
    tau: f64,
}

impl CustomOp for RelaxedPermOp {
    fn name(&self) -> &'static str {
        "relaxed-perm"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (d, n) = (x.rows(), x.cols());
        let (pd, gd) = (output.data(), grad.data());
        let mut gx = vec![0.0; d * n];
        let mut d_spread = vec![0.0; n];
        for i in 0..d {
            let s = x.row(i);
            let gs = &mut gx[i * n..(i + 1) * n];
            d_spread.iter_mut().for_each(|v| *v = 0.0);
            for a in 0..n {
                let base = (i * n + a) * n;
                let prow = &pd[base..base + n];
                let grow = &gd[base..base + n];
                let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                let coef = (n as f64) + 1.0 - 2.0 * (a as f64 + 1.0);
                for j in 0..n {
                    let dlogit = prow[j] * (grow[j] - dot) / self.tau;
                    gs[j] += coef * dlogit;
                    d_spread[j] -= dlogit;
                }
            }
            for j in 0..n {
                for k in 0..n {
                    let diff = s[j] - s[k];
                    if diff > 0.0 {
                        gs[j] += d_spread[j] + d_spread[k];
                    } else if diff < 0.0 {
                        gs[j] -= d_spread[j] + d_spread[k];
                    }
                }
            }
        }
        vec![Some(Tensor::new(vec![d, n], gx).expect("shape"))]
    }
}

/// `out[i, a] = sum_b P[i, a, b] x[i, b]`.
struct PermApplyOp;

impl CustomOp for PermApplyOp {
    fn name(&self) -> &'static str {
        "perm-apply"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (p, x) = (inputs[0], inputs[1]);
        let (d, n) = (x.rows(), x.cols());
        let (pd, xd, gd) = (p.data(), x.data(), grad.data());
        let mut gp = vec![0.0; d * n * n];
        let mut gx = vec![0.0; d * n];
        for i in 0..d {
            for a in 0..n {
                let g = gd[i * n + a];
                let base = (i * n + a) * n;
                for b in 0..n {
                    gp[base + b] = g * xd[i * n + b];
                    gx[i * n + b] += g * pd[base + b];
                }
            }
        }
        vec![
            Some(Tensor::new(vec![d, n, n], gp).expect("shape")),
            Some(Tensor::new(vec![d, n], gx).expect("shape")),
        ]
    }
}

/// `out[i, b] = sum_a y[i, a] P[i, a, b]` for rows `i < active`, identity otherwise.
struct PermUnapplyOp {
    active: usize,
}

fn perm_unapply(y: &Tensor, p: &Tensor, active: usize) -> Tensor {
    let (d, n) = (y.rows(), y.cols());
    let (yd, pd) = (y.data(), p.data());
    let mut out = vec![0.0; d * n];
    for i in 0..d {
        let orow = &mut out[i * n..(i + 1) * n];
        if i >= active {
            orow.copy_from_slice(&yd[i * n..(i + 1) * n]);
            continue;
        }
        for a in 0..n {
            let v = yd[i * n + a];
            let prow = &pd[(i * n + a) * n..(i * n + a + 1) * n];
            for (o, &pv) in orow.iter_mut().zip(prow) {
                *o += v * pv;
            }
        }
    }
    Tensor::new(vec![d, n], out).expect("shape")
}

impl CustomOp for PermUnapplyOp {
    fn name(&self) -> &'static str {
        "perm-unapply"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (y, p) = (inputs[0], inputs[1]);
        let (d, n) = (y.rows(), y.cols());
        let (yd, pd, gd) = (y.data(), p.data(), grad.data());
        let mut gy = vec![0.0; d * n];
        let mut gp = vec![0.0; d * n * n];
        for i in 0..d {
            let grow = &gd[i * n..(i + 1) * n];
            if i >= self.active {
                gy[i * n..(i + 1) * n].copy_from_slice(grow);
                continue;
            }
            for a in 0..n {
                let base = (i * n + a) * n;
                let prow = &pd[base..base + n];
                gy[i * n + a] = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                let v = yd[i * n + a];
                for (gpv, g) in gp[base..base + n].iter_mut().zip(grow) {
                    *gpv = v * g;
                }
            }
        }
        vec![
            Some(Tensor::new(vec![d, n], gy).expect("shape")),
            Some(Tensor::new(vec![d, n, n], gp).expect("shape")),
        ]
    }
}

/// Differentiable hard sort of the first `n_valid` columns.
///
/// Returns the `d × n_valid` sorted node and the permutations; backward
/// scatters gradients to the original positions.
pub fn sort_rows_desc_var(g: &mut Graph, x: Var, n_valid: usize) -> Result<(Var, HardPerms)> {
    let xt = g.value(x);
    let perms = hard_perms(xt, n_valid)?;
    let n_in = xt.cols();
    let sorted = gather(xt, &perms);
    let v = g.custom(
        &[x],
        sorted,
        Box::new(GatherOp {
            perms: perms.clone(),
            n_in,
        }),
    )?;
    Ok((v, perms))
}

/// Relaxed permutation matrices of `x` as a graph node (`d × n × n`).
pub fn relaxed_perm_var(g: &mut Graph, x: Var, tau: f64) -> Result<Var> {
    let p = relaxed_perm_matrices(g.value(x), tau)?;
    g.custom(&[x], p, Box::new(RelaxedPermOp { tau }))
}

/// `sorted_i = P_i x_i` for every row.
pub fn perm_apply_var(g: &mut Graph, p: Var, x: Var) -> Result<Var> {
    let (pt, xt) = (g.value(p), g.value(x));
    let (d, n) = xt.dims2()?;
    if pt.shape() != [d, n, n] {
        return Err(Error::Shape(format!(
            "perm {:?} for {d}x{n} rows",
            pt.shape()
        )));
    }
    let out = row_matvec(pt, xt);
    g.custom(&[p, x], out, Box::new(PermApplyOp))
}

/// Relaxed sort as graph nodes: returns `(sorted, P)`.
pub fn relaxed_sort_var(g: &mut Graph, x: Var, tau: f64) -> Result<(Var, Var)> {
    let p = relaxed_perm_var(g, x, tau)?;
    let sorted = perm_apply_var(g, p, x)?;
    Ok((sorted, p))
}

/// Unsorts rows `i < active` of `y` through `P_i^T`; other rows pass through.
pub fn unsort_relaxed_var(g: &mut Graph, y: Var, p: Var, active: usize) -> Result<Var> {
    let (yt, pt) = (g.value(y), g.value(p));
    let (d, n) = yt.dims2()?;
    if pt.shape() != [d, n, n] {
        return Err(Error::Shape(format!(
            "perm {:?} for {d}x{n} rows",
            pt.shape()
        )));
    }
    let out = perm_unapply(yt, pt, active);
    g.custom(&[y, p], out, Box::new(PermUnapplyOp { active }))
}

/// Scatters sorted-order rows back to original order through hard
/// permutations; rows `i >= active` pass through unchanged.
pub fn unsort_hard_var(g: &mut Graph, y: Var, perms: &HardPerms, active: usize) -> Result<Var> {
    let yt = g.value(y);
    let (d, n) = yt.dims2()?;
    if perms.len() != d || perms.iter().any(|p| p.len() != n) {
        return Err(Error::Shape(format!("permutations do not match {d}x{n}")));
    }
    let effective: HardPerms = perms
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i < active {
                p.clone()
            } else {
                (0..n).collect()
            }
        })
        .collect();
    let mut out = vec![0.0; d * n];
    for (i, p) in effective.iter().enumerate() {
        check_bijection(p)?;
        for (j, &dst) in p.iter().enumerate() {
            out[i * n + dst] = yt.data()[i * n + j];
        }
    }
    let out = Tensor::new(vec![d, n], out)?;
    g.custom(&[y], out, Box::new(ScatterOp { perms: effective }))
}
