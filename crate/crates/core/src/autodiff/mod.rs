//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built afresh for every forward pass. Primitive methods
//! (`matmul`, `add`, `relu`, ...) evaluate eagerly and append a node; set
//! operators defined elsewhere in the crate plug in through [`CustomOp`].
//! [`Graph::backward`] sweeps the nodes in reverse insertion order and
//! accumulates gradients additively.

mod gradcheck;
mod graph;

pub use gradcheck::grad_check;
pub use graph::{Axis, CustomOp, Gradients, Graph, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn relu_at_kink_and_away() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 3], &mut rng);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn softmax_two_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let y = g.softmax(x, Axis::Cols).unwrap();
        let e = std::f64::consts::E;
        let v = g.value(y).data();
        assert!((v[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((v[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((v[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let s = g.square(x).unwrap();
        let l = g.sum(s, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![-5.0, 5.0]).unwrap());
        let r = g.relu(x).unwrap();
        let l = g.sum(r, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let r = g.relu(x).unwrap();
        let l = g.sum(r, None).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        // loss = sum(x * x) built from a duplicated input must equal sum(x^2).
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap());
        let p = g.mul(x, x).unwrap();
        let l = g.sum(p, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert!(g.backward(y).is_err());
        assert!(g.relu(y).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(g.scale(a, 10.0), Err(crate::Error::NonFinite(_))));
    }

    #[test]
    fn grad_check_of_plain_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random(&[4, 3], &mut rng);
        let err = grad_check(|g, x| g.sum(x, None), &p, 1e-5).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = random(&[5, 3], &mut rng);
        let b1 = random(&[5, 1], &mut rng);
        let w2 = random(&[2, 5], &mut rng);
        let x = random(&[3, 4], &mut rng);
        let f = |g: &mut Graph, w: Var| -> crate::Result<Var> {
            let xv = g.constant(x.clone());
            let b1v = g.constant(b1.clone());
            let w2v = g.constant(w2.clone());
            let h = g.matmul(w, xv)?;
            let h = g.add(h, b1v)?;
            let h = g.relu(h)?;
            let o = g.matmul(w2v, h)?;
            let o = g.square(o)?;
            g.sum(o, None)
        };
        let err = grad_check(f, &w1, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn smooth_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random(&[3, 4], &mut rng);
        let weights = random(&[3, 4], &mut rng);
        let checks: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> crate::Result<Var>>)> = vec![
            (
                "softmax-cols",
                Box::new(|g: &mut Graph, x: Var| {
                    let s = g.softmax(x, Axis::Cols)?;
                    let w = g.constant(weights.clone());
                    let m = g.mul(s, w)?;
                    g.sum(m, None)
                }),
            ),
            (
                "softmax-rows",
                Box::new(|g: &mut Graph, x: Var| {
                    let s = g.softmax(x, Axis::Rows)?;
                    let w = g.constant(weights.clone());
                    let m = g.mul(s, w)?;
                    g.sum(m, None)
                }),
            ),
            (
                "mean-rows-square",
                Box::new(|g: &mut Graph, x: Var| {
                    let m = g.mean(x, Some(Axis::Rows))?;
                    let s = g.square(m)?;
                    g.sum(s, None)
                }),
            ),
            (
                "sum-cols-abs",
                Box::new(|g: &mut Graph, x: Var| {
                    let m = g.sum(x, Some(Axis::Cols))?;
                    let s = g.abs(m)?;
                    g.sum(s, None)
                }),
            ),
            (
                "concat-scale",
                Box::new(|g: &mut Graph, x: Var| {
                    let c = g.concat(&[x, x], Axis::Cols)?;
                    let c2 = g.concat(&[c, c], Axis::Rows)?;
                    let s = g.scale(c2, -0.5)?;
                    let q = g.square(s)?;
                    g.mean(q, None)
                }),
            ),
            (
                "broadcast-sub-mul",
                Box::new(|g: &mut Graph, x: Var| {
                    let col = g.sum(x, Some(Axis::Cols))?;
                    let d = g.sub(x, col)?;
                    let row = g.mean(x, Some(Axis::Rows))?;
                    let m = g.mul(d, row)?;
                    let r = g.reshape(m, &[12])?;
                    let q = g.square(r)?;
                    g.sum(q, None)
                }),
            ),
        ];
        for (name, f) in checks {
            let err = grad_check(f, &p, 1e-5).unwrap();
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn deterministic_outputs_and_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let w = random(&[4, 4], &mut rng);
            let x = random(&[4, 6], &mut rng);
            let mut g = Graph::new();
            let wv = g.leaf(w);
            let xv = g.constant(x);
            let h = g.matmul(wv, xv).unwrap();
            let s = g.softmax(h, Axis::Cols).unwrap();
            let l = g.sum(s, Some(Axis::Rows)).unwrap();
            let l = g.square(l).unwrap();
            let l = g.sum(l, None).unwrap();
            let out = g.value(l).clone();
            let grads = g.backward(l).unwrap();
            (out, grads.get(wv).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert!(ga
            .data()
            .iter()
            .zip(gb.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
