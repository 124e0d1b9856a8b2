//! Named finite-difference gradient suites, shared by the command line and
//! the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Graph, Var};
use crate::error::{Error, Result};
use crate::fspool::{self, WeightInit};
use crate::losses;
use crate::models::{Bound, DecoderKind, ForwardOptions, ModelConfig, PoolKind, SetModel};
use crate::sortops::{self, SortMode};
use crate::tensor::Tensor;

pub const SUITES: [&str; 5] = ["autodiff", "sortops", "fspool", "losses", "models"];
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub case: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("positive dims")
}

/// `sum(w ⊙ y)` with a fixed random `w`, so every output entry matters.
fn weighted_sum(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = random(g.value(y).shape(), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

/// Runs one suite; `Err` only for an unknown name or an internal failure.
pub fn run_suite(name: &str) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out = Vec::new();
    let mut push = |suite: &'static str, case: &'static str, err: f64, threshold: f64| {
        out.push(CheckResult {
            suite,
            case,
            max_rel_error: err,
            threshold,
        });
    };
    match name {
        "autodiff" => {
            let w2 = random(&[3, 6], &mut rng);
            let x = random(&[4, 5], &mut rng);
            let w1 = random(&[6, 4], &mut rng);
            let err = grad_check(
                |g, w| {
                    let xv = g.constant(x.clone());
                    let w2v = g.constant(w2.clone());
                    let h = g.matmul(w, xv)?;
                    let h = g.relu(h)?;
                    let o = g.matmul(w2v, h)?;
                    let s = g.softmax(o, crate::autodiff::Axis::Rows)?;
                    weighted_sum(g, s, 1)
                },
                &w1,
                EPS,
            )?;
            push("autodiff", "mlp-softmax", err, 1e-5);
        }
        "sortops" => {
            let x = random(&[3, 6], &mut rng);
            let hard = grad_check(
                |g, x| {
                    let (s, _) = sortops::sort_rows_desc_var(g, x, 6)?;
                    weighted_sum(g, s, 2)
                },
                &x,
                EPS,
            )?;
            push("sortops", "hard-sort", hard, 1e-5);
            let relaxed = grad_check(
                |g, x| {
                    let (s, _) = sortops::relaxed_sort_var(g, x, 0.7)?;
                    weighted_sum(g, s, 3)
                },
                &x,
                EPS,
            )?;
            push("sortops", "relaxed-sort", relaxed, 1e-5);
            let y = random(&[3, 6], &mut rng);
            let unsort = grad_check(
                |g, x| {
                    let (_, p) = sortops::relaxed_sort_var(g, x, 0.7)?;
                    let yv = g.constant(y.clone());
                    let u = sortops::unsort_relaxed_var(g, yv, p, 3)?;
                    weighted_sum(g, u, 4)
                },
                &x,
                EPS,
            )?;
            push("sortops", "relaxed-unsort", unsort, 1e-5);
        }
        "fspool" => {
            let x = random(&[4, 7], &mut rng);
            let knots = random(&[4, fspool::DEFAULT_KNOTS], &mut rng);
            let pool = grad_check(
                |g, x| {
                    let k = g.constant(knots.clone());
                    let (y, _) = fspool::fspool_var(g, x, k, 7, SortMode::Hard, 1.0)?;
                    g.sum(y, None)
                },
                &x,
                EPS,
            )?;
            push("fspool", "fspool-sum", pool, 1e-5);
            let calib = grad_check(
                |g, k| {
                    let xv = g.constant(x.clone());
                    let (y, _) = fspool::fspool_var(g, xv, k, 7, SortMode::Hard, 1.0)?;
                    weighted_sum(g, y, 5)
                },
                &knots,
                EPS,
            )?;
            push("fspool", "calibrator", calib, 1e-5);
            let y = random(&[4, 1], &mut rng);
            let unpool = grad_check(
                |g, k| {
                    let yv = g.constant(y.clone());
                    let u = fspool::fsunpool_var(g, yv, k, 5)?;
                    weighted_sum(g, u, 6)
                },
                &knots,
                EPS,
            )?;
            push("fspool", "fsunpool", unpool, 1e-5);
        }
        "losses" => {
            let p = random(&[2, 6], &mut rng);
            let t = random(&[2, 5], &mut rng);
            let chamfer = grad_check(
                |g, p| {
                    let tv = g.constant(t.clone());
                    losses::chamfer_var(g, p, tv)
                },
                &p,
                EPS,
            )?;
            push("losses", "chamfer", chamfer, 1e-5);
            let t6 = random(&[2, 6], &mut rng);
            let hungarian = grad_check(
                |g, p| {
                    let tv = g.constant(t6.clone());
                    losses::hungarian_loss_var(g, p, tv)
                },
                &p,
                EPS,
            )?;
            push("losses", "hungarian", hungarian, 1e-5);
            let z = random(&[10, 1], &mut rng);
            let ce = grad_check(|g, z| losses::cross_entropy_var(g, z, 3), &z, EPS)?;
            push("losses", "cross-entropy", ce, 1e-5);
        }
        "models" => {
            let mut cfg = ModelConfig::polygon(DecoderKind::Equivariant, PoolKind::Fspool, 5);
            cfg.w_init = WeightInit::Gaussian;
            let model = SetModel::init(cfg, 9)?;
            let x = random(&[2, 5], &mut rng);
            let opts = ForwardOptions {
                sort: SortMode::Relaxed,
                tau: 1.0,
                zero_latent: false,
            };
            let mut worst: f64 = 0.0;
            for id in model
                .params
                .ids()
                .filter(|&id| model.params.name(id).contains(".w"))
            {
                let err = grad_check(
                    |g, v| {
                        let p = Bound::new(g, &model.params, |_| false).with_var(id, v);
                        let xv = g.constant(x.clone());
                        let out = model.reconstruct_var(g, &p, xv, &opts)?;
                        let t = g.constant(x.clone());
                        losses::mse_direct_var(g, out, t)
                    },
                    model.params.get(id),
                    EPS,
                )?;
                worst = worst.max(err);
            }
            push("models", "relaxed-autoencoder", worst, 1e-4);
        }
        other => {
            return Err(Error::Invalid(format!(
                "unknown gradcheck suite {other:?}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nope").is_err());
    }

    #[test]
    fn all_suites_pass() {
        for s in SUITES {
            for r in run_suite(s).unwrap() {
                assert!(r.passed(), "{r:?}");
            }
        }
    }
}
