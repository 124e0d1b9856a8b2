//! Rotation sweep exposing the responsibility problem.
//!
//! A trained polygon model receives the canonical (unpermuted) polygon at
//! every rotation of a fine grid over one symmetry period. A fixed-order
//! decoder has to hand vertices from one output slot to the next somewhere
//! in that period, which shows up as one large jump between adjacent
//! outputs; an equivariant decoder follows the input columns and varies
//! smoothly.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::losses;
use crate::models::{ForwardOptions, SetModel};
use crate::svg;
use crate::tensor::Tensor;

/// Sum over columns of the Euclidean distance between matching columns.
pub fn list_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (d, n) = a.dims2()?;
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((0..n)
        .map(|j| {
            (0..d)
                .map(|f| (a.at(f, j) - b.at(f, j)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepProfile {
    /// Grid over `[0, 2π/n)`; entry `k` is compared with the next grid point.
    pub thetas: Vec<f64>,
    pub d_l: Vec<f64>,
    /// Chamfer distance between consecutive outputs.
    pub d_s: Vec<f64>,
    pub max_d_l: f64,
    pub median_d_l: f64,
    /// `max_d_l / median_d_l`.
    pub ratio: f64,
    /// Summed `d_l` over the run of steps around the largest one that exceed
    /// `JUMP_FACTOR` times the median (just the largest step if none do).
    /// A trained network is continuous, so a responsibility switch is a
    /// steep ramp a few grid steps wide; this total stays put under grid
    /// refinement while a smooth drift halves.
    pub jump: f64,
    /// Mean `d_l`, rescaled to a 1024-step grid, below 1e-3 of the set
    /// diameter: the model ignores the rotation.
    pub collapsed: bool,
}

pub const JUMP_FACTOR: f64 = 10.0;
const REFERENCE_STEPS: f64 = 1024.0;

fn jump_total(d_l: &[f64], median: f64) -> f64 {
    let Some(top) = (0..d_l.len()).max_by(|&a, &b| d_l[a].total_cmp(&d_l[b])) else {
        return 0.0;
    };
    let big = |k: usize| d_l[k] > JUMP_FACTOR * median;
    let mut lo = top;
    while lo > 0 && big(lo - 1) {
        lo -= 1;
    }
    let mut hi = top;
    while hi + 1 < d_l.len() && big(hi + 1) {
        hi += 1;
    }
    if lo == top && hi == top {
        return d_l[top];
    }
    d_l[lo..=hi].iter().sum()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

fn diameter(x: &Tensor) -> f64 {
    let n = x.cols();
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            best = best.max(
                ((x.at(0, i) - x.at(0, j)).powi(2) + (x.at(1, i) - x.at(1, j)).powi(2)).sqrt(),
            );
        }
    }
    best
}

/// Feeds the canonical `n`-gon at `n_steps + 1` rotations spanning one
/// period and records distances between consecutive outputs.
pub fn sweep_rotation(
    model: &SetModel,
    n: usize,
    n_steps: usize,
    opts: &ForwardOptions,
    exec: Execution,
) -> Result<SweepProfile> {
    if n_steps < 64 {
        return Err(Error::Invalid(format!(
            "sweep needs at least 64 steps, got {n_steps}"
        )));
    }
    if model.config.d_in != 2 {
        return Err(Error::Incompatible(format!(
            "sweep feeds 2-d polygons, model expects {}-d elements",
            model.config.d_in
        )));
    }
    if n < 2 {
        return Err(Error::Invalid("polygons need at least 2 points".into()));
    }
    let period = TAU / n as f64;
    let grid: Vec<f64> = (0..=n_steps)
        .map(|k| period * k as f64 / n_steps as f64)
        .collect();
    let outputs = map_indexed(exec, grid.len(), |k| {
        model.reconstruct(&data::polygon(n, grid[k]), opts)
    });
    let outputs: Vec<Tensor> = outputs.into_iter().collect::<Result<_>>()?;
    let mut d_l = Vec::with_capacity(n_steps);
    let mut d_s = Vec::with_capacity(n_steps);
    for w in outputs.windows(2) {
        d_l.push(list_distance(&w[0], &w[1])?);
        d_s.push(losses::chamfer(&w[0], &w[1])?);
    }
    let max_d_l = d_l.iter().copied().fold(0.0, f64::max);
    let median_d_l = median(&d_l);
    let mean = d_l.iter().sum::<f64>() / d_l.len() as f64 * n_steps as f64 / REFERENCE_STEPS;
    Ok(SweepProfile {
        thetas: grid[..n_steps].to_vec(),
        ratio: if median_d_l > 0.0 {
            max_d_l / median_d_l
        } else {
            f64::INFINITY
        },
        collapsed: mean < 1e-3 * diameter(&data::polygon(n, 0.0)),
        jump: jump_total(&d_l, median_d_l),
        d_l,
        d_s,
        max_d_l,
        median_d_l,
    })
}

impl SweepProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("theta,d_l,d_s\n");
        for ((t, l), c) in self.thetas.iter().zip(&self.d_l).zip(&self.d_s) {
            s.push_str(&format!("{t},{l},{c}\n"));
        }
        s
    }

    pub fn to_svg(&self, title: &str) -> String {
        let pts = |v: &[f64]| {
            self.thetas
                .iter()
                .copied()
                .zip(v.iter().copied())
                .collect::<Vec<_>>()
        };
        svg::line_plot(
            title,
            "rotation (rad)",
            "adjacent distance",
            &[("d_l", pts(&self.d_l)), ("d_s", pts(&self.d_s))],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DecoderKind, ModelConfig, PoolKind};

    #[test]
    fn list_distance_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(list_distance(&a, &a).unwrap(), 0.0);
        let th: f64 = 0.3;
        let l1 =
            Tensor::from_rows(&[vec![-th.cos(), th.cos()], vec![-th.sin(), th.sin()]]).unwrap();
        let l2 = l1.permute_columns(&[1, 0]).unwrap();
        assert!((list_distance(&l1, &l2).unwrap() - 4.0).abs() < 1e-12);
        let z = Tensor::zeros(&[2, 4]);
        let u = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, -1.0, 0.0]]).unwrap();
        assert_eq!(list_distance(&z, &u).unwrap(), 3.0);
        assert!(list_distance(&z, &a).is_err());
    }

    #[test]
    fn sweep_shapes_and_errors() {
        let model = SetModel::init(
            ModelConfig::polygon(DecoderKind::Equivariant, PoolKind::Fspool, 4),
            0,
        )
        .unwrap();
        let opts = ForwardOptions::default();
        let p = sweep_rotation(&model, 4, 64, &opts, Execution::Sequential).unwrap();
        assert_eq!(p.thetas.len(), 64);
        assert_eq!(p.d_l.len(), 64);
        assert!(p.d_l.iter().chain(&p.d_s).all(|&v| v >= 0.0));
        assert_eq!(p.to_csv().lines().count(), 65);
        assert!(sweep_rotation(&model, 4, 32, &opts, Execution::Sequential).is_err());
        let mnist =
            SetModel::init(ModelConfig::mnist(DecoderKind::Mlp, PoolKind::Sum, true), 0).unwrap();
        assert!(sweep_rotation(&mnist, 4, 64, &opts, Execution::Sequential).is_err());
    }

    #[test]
    fn jump_sums_the_outlier_run() {
        let d = [1.0, 1.0, 30.0, 50.0, 20.0, 1.0, 1.0];
        assert_eq!(jump_total(&d, 1.0), 100.0);
        assert_eq!(jump_total(&[1.0, 2.0, 1.5], 1.5), 2.0);
    }

    #[test]
    fn constant_model_is_flagged_collapsed() {
        let mut model = SetModel::init(
            ModelConfig::polygon(DecoderKind::Mlp, PoolKind::Fspool, 4),
            0,
        )
        .unwrap();
        let id = model.params.find("decoder.mlp.w1").unwrap();
        let s = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = Tensor::zeros(&s);
        let p = sweep_rotation(
            &model,
            4,
            64,
            &ForwardOptions::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert!(p.collapsed);
    }
}
