//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] is rebuilt for every evaluation (define-by-run). Each primitive
//! records its inputs; [`Graph::backward`] walks the node list in reverse and
//! accumulates gradients additively, so a value used twice receives both
//! contributions.
//!
//! ```
//! use esfp_core::diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.variable(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
//! ```

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Gradients, Graph, ParamId, Var};
pub use params::{payload_path, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn rand_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
        (0..rank).map(|_| rng.random_range(1..4)).collect()
    }

    fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        check_gradients(f, inputs, 1e-5, None).unwrap().max_rel_error
    }

    /// Weighted sum so every output element gets a distinct upstream gradient.
    fn weighted(g: &mut Graph<f64>, y: Var) -> Result<Var> {
        let n = g.value(y).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect();
        let w = g.constant(Tensor::new(g.shape(y).to_vec(), w)?);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn evaluate_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(2.0));
        let sq = g.mul(x, x).unwrap();
        let y = g.offset(sq, 1.0);
        assert_eq!(g.value(y).item(), Some(5.0));

        let z = g.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(z).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn perceptron_matches_straight_line_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[5, 4]);
        let w1 = rand_tensor(&mut rng, &[4, 6]);
        let b1 = rand_tensor(&mut rng, &[6]);
        let w2 = rand_tensor(&mut rng, &[6, 3]);
        let mut g = Graph::new();
        let (xv, w1v, b1v, w2v) = (
            g.constant(x.clone()),
            g.variable(w1.clone()),
            g.variable(b1.clone()),
            g.variable(w2.clone()),
        );
        let h = g.matmul(xv, w1v).unwrap();
        let h = g.add(h, b1v).unwrap();
        let h = g.relu(h);
        let out = g.matmul(h, w2v).unwrap();

        // straight-line oracle
        for r in 0..5 {
            let mut hid = [0.0; 6];
            for (j, hj) in hid.iter_mut().enumerate() {
                let mut s = b1.data()[j];
                for k in 0..4 {
                    s += x.data()[r * 4 + k] * w1.data()[k * 6 + j];
                }
                *hj = s.max(0.0);
            }
            for c in 0..3 {
                let mut s = 0.0;
                for j in 0..6 {
                    s += hid[j] * w2.data()[j * 3 + c];
                }
                assert!((g.value(out).data()[r * 3 + c] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backprop_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), Some(6.0));

        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(1.25));
        let y = g.add(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), Some(2.0));

        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn matmul_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let mut g = Graph::new();
        let (av, bv) = (g.variable(a.clone()), g.variable(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        // d sum(AB) / dA[i,k] = sum_j B[k,j]; d/dB[k,j] = sum_i A[i,k]
        for i in 0..3 {
            for k in 0..4 {
                let expect: f64 = (0..5).map(|j| b.data()[k * 5 + j]).sum();
                assert!((grads.get(av).unwrap().data()[i * 4 + k] - expect).abs() < 1e-12);
            }
        }
        for k in 0..4 {
            for j in 0..5 {
                let expect: f64 = (0..3).map(|i| a.data()[i * 4 + k]).sum();
                assert!((grads.get(bv).unwrap().data()[k * 5 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for rank in 1..=4 {
            for _ in 0..3 {
                let s = rand_shape(&mut rng, rank);
                let a = rand_tensor(&mut rng, &s);
                let b = rand_tensor(&mut rng, &s);
                let pos = a.map(|v| v.abs() + 0.5);
                let away = a.map(|v| if v.abs() < 0.05 { 0.3 } else { v });

                let errs = [
                    ("add", check(&[a.clone(), b.clone()], |g, v| { let y = g.add(v[0], v[1])?; weighted(g, y) })),
                    ("sub", check(&[a.clone(), b.clone()], |g, v| { let y = g.sub(v[0], v[1])?; weighted(g, y) })),
                    ("mul", check(&[a.clone(), b.clone()], |g, v| { let y = g.mul(v[0], v[1])?; weighted(g, y) })),
                    ("div", check(&[a.clone(), pos.clone()], |g, v| { let y = g.div(v[0], v[1])?; weighted(g, y) })),
                    ("neg", check(&[a.clone()], |g, v| { let y = g.neg(v[0]); weighted(g, y) })),
                    ("scale", check(&[a.clone()], |g, v| { let y = g.scale(v[0], -1.7); weighted(g, y) })),
                    ("exp", check(&[a.clone()], |g, v| { let y = g.exp(v[0]); weighted(g, y) })),
                    ("ln", check(&[pos.clone()], |g, v| { let y = g.ln(v[0]); weighted(g, y) })),
                    ("sqrt", check(&[pos.clone()], |g, v| { let y = g.sqrt(v[0]); weighted(g, y) })),
                    ("abs", check(&[away.clone()], |g, v| { let y = g.abs(v[0]); weighted(g, y) })),
                    ("max_const", check(&[away.clone()], |g, v| { let y = g.max_const(v[0], 0.0); weighted(g, y) })),
                    ("gelu", check(&[a.clone()], |g, v| { let y = g.gelu(v[0]); weighted(g, y) })),
                    ("softplus", check(&[a.clone()], |g, v| { let y = g.softplus(v[0]); weighted(g, y) })),
                    ("softmax", check(&[a.clone()], |g, v| { let y = g.softmax(v[0])?; weighted(g, y) })),
                    ("layer_norm", check(&[a.clone()], |g, v| { let y = g.layer_norm(v[0], 1e-5)?; weighted(g, y) })),
                    ("sum", check(&[a.clone()], |g, v| { let y = g.sum(v[0]); weighted(g, y) })),
                    ("mean", check(&[a.clone()], |g, v| { let y = g.mean(v[0]); weighted(g, y) })),
                    ("sum_axis", check(&[a.clone()], |g, v| { let y = g.sum_axis(v[0], rank - 1)?; weighted(g, y) })),
                    ("mean_axis", check(&[a.clone()], |g, v| { let y = g.mean_axis(v[0], 0)?; weighted(g, y) })),
                    ("reshape", check(&[a.clone()], |g, v| { let n = g.value(v[0]).len(); let y = g.reshape(v[0], &[n])?; weighted(g, y) })),
                    ("concat", check(&[a.clone(), b.clone()], |g, v| { let y = g.concat(&[v[0], v[1]], rank - 1)?; weighted(g, y) })),
                    ("slice", check(&[a.clone()], |g, v| { let y = g.slice(v[0], 0, 0, 1)?; weighted(g, y) })),
                ];
                for (name, e) in errs {
                    assert!(e < 1e-6, "{name} rank {rank} shape {s:?}: {e}");
                }
                if rank >= 2 {
                    let mut perm: Vec<usize> = (0..rank).rev().collect();
                    perm.rotate_left(1);
                    let e = check(&[a.clone()], |g, v| { let y = g.permute(v[0], &perm)?; weighted(g, y) });
                    assert!(e < 1e-6, "permute {e}");
                    let e = check(&[a.clone()], |g, v| { let y = g.transpose(v[0])?; weighted(g, y) });
                    assert!(e < 1e-6, "transpose {e}");
                    // batched and shared-weight matmul
                    let k = s[rank - 1];
                    let mut sb = s.clone();
                    sb[rank - 2] = k;
                    sb[rank - 1] = 2;
                    let bb = rand_tensor(&mut rng, &sb);
                    let e = check(&[a.clone(), bb], |g, v| { let y = g.matmul(v[0], v[1])?; weighted(g, y) });
                    assert!(e < 1e-6, "matmul batched {e}");
                    let b2 = rand_tensor(&mut rng, &[k, 3]);
                    let e = check(&[a.clone(), b2], |g, v| { let y = g.matmul(v[0], v[1])?; weighted(g, y) });
                    assert!(e < 1e-6, "matmul shared {e}");
                }
                // broadcasting along leading axes
                let last = rand_tensor(&mut rng, &s[rank - 1..]);
                let e = check(&[a.clone(), last], |g, v| { let y = g.mul(v[0], v[1])?; weighted(g, y) });
                assert!(e < 1e-6, "broadcast mul {e}");
            }
        }
    }

    #[test]
    fn quaternion_primitives_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q1 = rand_tensor(&mut rng, &[2, 3, 4]);
        let q2 = rand_tensor(&mut rng, &[2, 3, 4]);
        let v = rand_tensor(&mut rng, &[2, 3, 3]);
        let e = check(&[q1.clone(), q2], |g, x| { let y = g.quat_mul(x[0], x[1])?; weighted(g, y) });
        assert!(e < 1e-6, "quat_mul {e}");
        let e = check(&[q1, v], |g, x| { let y = g.quat_rotate(x[0], x[1])?; weighted(g, y) });
        assert!(e < 1e-6, "quat_rotate {e}");
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let a = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let e = check(&[a], |g, v| {
            let y = g.square(v[0])?;
            Ok(g.sum(y))
        });
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn broken_backward_rule_is_detected() {
        let a = Tensor::from_vec(vec![0.7, -1.1, 1.9]);
        let e = check(&[a], |g, v| {
            let y = g.faulty_square(v[0]);
            Ok(g.sum(y))
        });
        assert!(e > 1e-2, "{e}");
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec(vec![0.0, -2.0, 3.0]));
        let y = g.abs(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a = rand_tensor(&mut rng, &[4, 4]);
            let mut g = Graph::<f64>::new();
            let x = g.variable(a);
            let y = g.softmax(x).unwrap();
            let y = g.matmul(y, x).unwrap();
            let y = g.layer_norm(y, 1e-5).unwrap();
            let s = g.sum(y);
            let s2 = g.square(s).unwrap();
            let grads = g.backward(s2).unwrap();
            (g.value(s2).clone(), grads.get(x).unwrap().clone())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
        assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        store.insert("b", Tensor::from_vec(vec![0.125]));
        store.save(&path).unwrap();
        let bytes = std::fs::read(payload_path(&path)).unwrap();
        assert_eq!(bytes.len(), 5 * 8);
        assert_eq!(&bytes[8..16], &(-2.5f64).to_le_bytes());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(manifest["b"]["offset"], 32);
        assert_eq!(manifest["a"]["shape"], serde_json::json!([2, 2]));

        let mut other = ParamStore::<f64>::new();
        other.insert("a", Tensor::zeros(&[2, 2]));
        other.insert("b", Tensor::zeros(&[1]));
        other.load_values(&path).unwrap();
        assert_eq!(other, store);

        let mut wrong = ParamStore::<f64>::new();
        wrong.insert("a", Tensor::zeros(&[4]));
        wrong.insert("b", Tensor::zeros(&[1]));
        assert!(wrong.load_values(&path).is_err());
    }
}
