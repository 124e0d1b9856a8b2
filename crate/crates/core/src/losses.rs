//! Set-prediction losses.
//!
//! Sets are `d × n` matrices whose columns are elements. [`chamfer`] and
//! [`hungarian_loss`] return *sums* of squared distances; the experiment
//! tables report them divided by `n · d` (see [`per_coordinate`]).

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pairwise squared Euclidean distances between the columns of `pred`
/// (rows of the result) and the columns of `target` (columns of the result).
pub fn cost_matrix(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (d, n1) = pred.dims2()?;
    let (d2, n2) = target.dims2()?;
    if d != d2 {
        return Err(Error::Shape(format!("element dims {d} vs {d2}")));
    }
    let (p, t) = (pred.data(), target.data());
    let mut c = vec![0.0; n1 * n2];
    for f in 0..d {
        let pr = &p[f * n1..(f + 1) * n1];
        let tr = &t[f * n2..(f + 1) * n2];
        for (i, &pv) in pr.iter().enumerate() {
            let crow = &mut c[i * n2..(i + 1) * n2];
            for (cv, &tv) in crow.iter_mut().zip(tr) {
                let diff = pv - tv;
                *cv += diff * diff;
            }
        }
    }
    Tensor::new(vec![n1, n2], c)
}

/// Divides a summed set loss by the number of coordinates in one set.
pub fn per_coordinate(loss: f64, d: usize, n: usize) -> f64 {
    loss / (d * n) as f64
}

/// Mean squared error over the columns where `mask` is non-zero.
pub fn mse_direct(pred: &Tensor, target: &Tensor, mask: &[f64]) -> Result<f64> {
    let (d, n) = pred.dims2()?;
    if target.shape() != pred.shape() || mask.len() != n {
        return Err(Error::Shape(format!(
            "pred {:?}, target {:?}, mask {}",
            pred.shape(),
            target.shape(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::EmptySet("mse over an empty mask".into()));
    }
    let mut s = 0.0;
    for f in 0..d {
        for j in (0..n).filter(|&j| mask[j] != 0.0) {
            let diff = pred.at(f, j) - target.at(f, j);
            s += diff * diff;
        }
    }
    Ok(s / (count * d) as f64)
}

/// Mean squared error over all entries as a graph node.
pub fn mse_direct_var(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    g.mean(sq, None)
}

/// Gradient routing for a loss that is a sum of squared distances over a
/// fixed list of `(pred column, target column)` pairs.
struct MatchedPairsOp {
    pairs: Vec<(usize, usize)>,
}

impl CustomOp for MatchedPairsOp {
    fn name(&self) -> &'static str {
        "matched-pairs"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (p, t) = (inputs[0], inputs[1]);
        let (d, n1, n2) = (p.rows(), p.cols(), t.cols());
        let g = grad.data()[0];
        let mut gp = Tensor::zeros(p.shape());
        let mut gt = Tensor::zeros(t.shape());
        for &(i, j) in &self.pairs {
            for f in 0..d {
                let diff = 2.0 * g * (p.data()[f * n1 + i] - t.data()[f * n2 + j]);
                gp.data_mut()[f * n1 + i] += diff;
                gt.data_mut()[f * n2 + j] -= diff;
            }
        }
        vec![Some(gp), Some(gt)]
    }
}

fn argmin_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn chamfer_pairs(cost: &Tensor) -> (f64, Vec<(usize, usize)>) {
    let (n1, n2) = (cost.rows(), cost.cols());
    let mut pairs = Vec::with_capacity(n1 + n2);
    let mut total = 0.0;
    for i in 0..n1 {
        let j = argmin_first(cost.row(i).iter().copied());
        total += cost.at(i, j);
        pairs.push((i, j));
    }
    for j in 0..n2 {
        let i = argmin_first((0..n1).map(|i| cost.at(i, j)));
        total += cost.at(i, j);
        pairs.push((i, j));
    }
    (total, pairs)
}

/// Chamfer loss: every predicted element is charged the squared distance to
/// its nearest target element and vice versa. Ties pick the lowest index.
pub fn chamfer(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(chamfer_pairs(&cost_matrix(pred, target)?).0)
}

pub fn chamfer_var(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let cost = cost_matrix(g.value(pred), g.value(target))?;
    let (total, pairs) = chamfer_pairs(&cost);
    g.custom(
        &[pred, target],
        Tensor::scalar(total),
        Box::new(MatchedPairsOp { pairs }),
    )
}

/// Exact minimum-cost perfect matching of a square cost matrix.
///
/// Returns `assignment` with row `i` matched to column `assignment[i]`.
/// This is the O(n³) shortest-augmenting-path form of the Hungarian method
/// with row/column potentials; rows are inserted in ascending order and
/// columns scanned in ascending order, so the result is deterministic.
pub fn hungarian_solve(cost: &Tensor) -> Result<Vec<usize>> {
    let (n, m) = cost.dims2()?;
    if n != m {
        return Err(Error::Shape(format!(
            "assignment needs a square matrix, got {n}x{m}"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    // 1-based arrays; index 0 is the virtual column used to start each search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost.at(r0 - 1, col - 1) - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    Ok(assignment)
}

pub fn assignment_cost(cost: &Tensor, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.at(i, j))
        .sum()
}

fn check_equal_sizes(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "assignment loss needs equal set sizes, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Linear assignment loss: minimum over bijections of summed squared distances.
pub fn hungarian_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_equal_sizes(pred, target)?;
    let cost = cost_matrix(pred, target)?;
    Ok(assignment_cost(&cost, &hungarian_solve(&cost)?))
}

/// Assignment loss as a graph node; the matching is held fixed in backward.
pub fn hungarian_loss_var(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    check_equal_sizes(g.value(pred), g.value(target))?;
    let cost = cost_matrix(g.value(pred), g.value(target))?;
    let assignment = hungarian_solve(&cost)?;
    let total = assignment_cost(&cost, &assignment);
    let pairs = assignment.into_iter().enumerate().collect();
    g.custom(
        &[pred, target],
        Tensor::scalar(total),
        Box::new(MatchedPairsOp { pairs }),
    )
}

/// Softmax cross-entropy of a `c × 1` logit column against a class index.
pub fn cross_entropy_var(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let c = g.value(logits).rows();
    if label >= c {
        return Err(Error::Invalid(format!("label {label} for {c} classes")));
    }
    g.custom(
        &[logits],
        cross_entropy_value(g.value(logits), label),
        Box::new(CrossEntropyOp { label }),
    )
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn cross_entropy_value(logits: &Tensor, label: usize) -> Tensor {
    Tensor::scalar(-log_softmax(logits.data())[label])
}

struct CrossEntropyOp {
    label: usize,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross-entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0];
        let mut out: Vec<f64> = log_softmax(inputs[0].data())
            .iter()
            .map(|l| l.exp() * g)
            .collect();
        out[self.label] -= g;
        vec![Some(
            Tensor::new(inputs[0].shape().to_vec(), out).expect("shape"),
        )]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(cols: &[&[f64]]) -> Tensor {
        let d = cols[0].len();
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|f| cols.iter().map(|c| c[f]).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn line(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    fn random_set(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![d, n],
            (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn all_perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = vec![];
        for p in all_perms(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force(cost: &Tensor) -> f64 {
        all_perms(cost.rows())
            .iter()
            .map(|p| assignment_cost(cost, p))
            .fold(f64::INFINITY, f64::min)
    }

    fn brute_chamfer(p: &Tensor, t: &Tensor) -> f64 {
        let d = p.rows();
        let dist = |i: usize, j: usize| {
            (0..d)
                .map(|f| (p.at(f, i) - t.at(f, j)).powi(2))
                .sum::<f64>()
        };
        let a: f64 = (0..p.cols())
            .map(|i| {
                (0..t.cols())
                    .map(|j| dist(i, j))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        let b: f64 = (0..t.cols())
            .map(|j| {
                (0..p.cols())
                    .map(|i| dist(i, j))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        a + b
    }

    #[test]
    fn mse_examples() {
        let y = set(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 0.5]]);
        let mask = [1.0, 1.0, 1.0];
        assert_eq!(mse_direct(&y, &y, &mask).unwrap(), 0.0);
        let mut shifted = y.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 0.5);
        assert!((mse_direct(&shifted, &y, &mask).unwrap() - 0.25).abs() < 1e-15);
        let swapped = y.permute_columns(&[1, 0, 2]).unwrap();
        assert!(mse_direct(&swapped, &y, &mask).unwrap() > 0.0);
        assert!(mse_direct(&y, &y, &[0.0, 0.0, 0.0]).is_err());
        let partial = mse_direct(&shifted, &y, &[1.0, 0.0, 0.0]).unwrap();
        assert!((partial - 0.25).abs() < 1e-15);
    }

    #[test]
    fn chamfer_examples() {
        let y = set(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 0.5]]);
        assert_eq!(
            chamfer(&y.permute_columns(&[2, 0, 1]).unwrap(), &y).unwrap(),
            0.0
        );
        let c = chamfer(&line(&[1.0, 1.001, 9.0]), &line(&[1.0, 9.0, 9.001])).unwrap();
        assert!((c - 2e-6).abs() < 1e-12, "{c}");
        let p = set(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let t = set(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(chamfer(&p, &t).unwrap(), 2.0);
        assert_eq!(brute_chamfer(&p, &t), 2.0);
    }

    #[test]
    fn chamfer_matches_brute_force_on_unequal_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let p = random_set(3, rng.random_range(1..9), &mut rng);
            let t = random_set(3, rng.random_range(1..9), &mut rng);
            assert!((chamfer(&p, &t).unwrap() - brute_chamfer(&p, &t)).abs() < 1e-12);
        }
    }

    #[test]
    fn hungarian_examples() {
        let mut c = Tensor::full(&[4, 4], 3.0);
        (0..4).for_each(|i| c.set(i, i, 0.0));
        assert_eq!(hungarian_solve(&c).unwrap(), vec![0, 1, 2, 3]);
        let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(hungarian_solve(&c).unwrap(), vec![0, 1]);
        let bad = Tensor::from_rows(&[vec![0.0, f64::NAN], vec![1.0, 0.0]]).unwrap();
        assert!(hungarian_solve(&bad).is_err());
        assert!(hungarian_solve(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=6 {
            for _ in 0..100 {
                let c = Tensor::new(
                    vec![n, n],
                    (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect(),
                )
                .unwrap();
                let a = hungarian_solve(&c).unwrap();
                let mut sorted = a.clone();
                sorted.sort();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
                assert!((assignment_cost(&c, &a) - brute_force(&c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hungarian_loss_examples() {
        let y = set(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 0.5]]);
        assert_eq!(
            hungarian_loss(&y.permute_columns(&[1, 2, 0]).unwrap(), &y).unwrap(),
            0.0
        );
        assert_eq!(
            hungarian_loss(&line(&[0.0, 2.0]), &line(&[1.0, 0.0])).unwrap(),
            1.0
        );
        assert!(hungarian_loss(&line(&[0.0, 2.0]), &line(&[1.0, 0.0, 3.0])).is_err());
        let h = hungarian_loss(&line(&[1.0, 1.001, 9.0]), &line(&[1.0, 9.0, 9.001])).unwrap();
        assert!((h - (9.0f64 - 1.001).powi(2) - 1e-6).abs() < 1e-9, "{h}");
        assert!(h > 60.0);
    }

    #[test]
    fn chamfer_bounded_by_twice_hungarian_and_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.random_range(1..8);
            let p = random_set(2, n, &mut rng);
            let t = random_set(2, n, &mut rng);
            let c = chamfer(&p, &t).unwrap();
            let h = hungarian_loss(&p, &t).unwrap();
            assert!(c <= 2.0 * h + 1e-12);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let pq = p.permute_columns(&order).unwrap();
            order.shuffle(&mut rng);
            let tq = t.permute_columns(&order).unwrap();
            assert!((chamfer(&pq, &tq).unwrap() - c).abs() < 1e-12);
            assert!((hungarian_loss(&pq, &tq).unwrap() - h).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let p = random_set(2, 5, &mut rng);
        let t = random_set(2, 4, &mut rng);
        let f = |g: &mut Graph, pv: Var| {
            let tv = g.constant(t.clone());
            chamfer_var(g, pv, tv)
        };
        assert!(grad_check(f, &p, 1e-5).unwrap() <= 1e-5);
        let t5 = random_set(2, 5, &mut rng);
        let h = |g: &mut Graph, pv: Var| {
            let tv = g.constant(t5.clone());
            hungarian_loss_var(g, pv, tv)
        };
        assert!(grad_check(h, &p, 1e-5).unwrap() <= 1e-5);
        let m = |g: &mut Graph, pv: Var| {
            let tv = g.constant(t5.clone());
            mse_direct_var(g, pv, tv)
        };
        assert!(grad_check(m, &p, 1e-5).unwrap() <= 1e-5);
        let logits = Tensor::column(vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let ce = |g: &mut Graph, z: Var| cross_entropy_var(g, z, 2);
        assert!(grad_check(ce, &logits, 1e-5).unwrap() <= 1e-5);
    }

    #[test]
    fn uniform_logits_give_log_ten() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[10, 1]));
        let l = cross_entropy_var(&mut g, z, 3).unwrap();
        assert!((g.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
    }
}
