//! Dense fp64 tensors, a reverse-mode tape, AdamW and dropout masks.

mod adamw;
mod dropout;
mod graph;
mod sum;
mod tensor;

pub use adamw::{AdamW, AdamWConfig, ParamSlot};
pub use dropout::{dropout_mask, sample_mask};
pub use graph::{forward_backward, Gradients, Graph, Var};
pub use sum::{exact_mean, exact_sum};
pub use tensor::Tensor;


#[cfg(test)]
mod tests {
    use super::fd::{max_rel_err, numeric_grad};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        // keep values away from relu kinks
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.5);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap().requires_grad(true)
    }

    /// Builds the graph with `build`, checks analytic against numeric grads for every input.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
            let root = build(&mut g, &vars);
            g.scalar(root)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root).unwrap();
        let mut worst: f64 = 0.0;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .map(|s| s.to_vec())
                .unwrap_or(vec![0.0; inputs[i].numel()]);
            let numeric = numeric_grad(&eval, &inputs, i, 1e-5);
            worst = worst.max(max_rel_err(&analytic, &numeric));
        }
        worst
    }

    #[test]
    fn sum_has_identity_jacobian() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad(true);
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let s = g.sum(v);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_relu() {
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap().requires_grad(true);
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let r = g.relu(v);
        let m = g.mean(r);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().requires_grad(true);
        let mut g = Graph::new();
        let v = g.leaf(&x);
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn frobenius_of_product_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = check(vec![random(&[3, 3], &mut rng), random(&[3, 3], &mut rng)], |g, v| {
            let p = g.matmul(v[0], v[1]);
            let sq = g.mul(p, p);
            g.sum(sq)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn accumulation_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = random(&[2, 3], &mut rng);
        let b = random(&[3, 2], &mut rng);
        let mut g = Graph::new();
        let va = g.leaf(&a);
        let vb = g.leaf(&b);
        let p = g.matmul(va, vb);
        let s = g.sum(p);
        forward_backward(&g, s, &mut [(va, &mut a)]).unwrap();
        let once = a.grad().unwrap().to_vec();
        forward_backward(&g, s, &mut [(va, &mut a)]).unwrap();
        let twice: Vec<f64> = once.iter().map(|v| 2.0 * v).collect();
        assert_eq!(a.grad().unwrap(), twice.as_slice());
    }

    #[test]
    fn elementwise_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = check(
            vec![
                random(&[2, 4], &mut rng),
                random(&[2, 4], &mut rng),
                random(&[4], &mut rng),
            ],
            |g, v| {
                let a = g.add(v[0], v[1]);
                let s = g.sub(a, v[1]);
                let m = g.mul(s, v[1]);
                let b = g.add_row_bias(m, v[2]);
                let r = g.relu(b);
                let c = g.scale(r, 0.7);
                let d = g.mul_const(c, vec![2.0, 0.0, 1.0, 1.5, 0.5, 1.0, 2.0, 0.0]);
                let sq = g.mul(d, d);
                g.mean(sq)
            },
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn reglu_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = check(vec![random(&[3, 6], &mut rng), random(&[3, 3], &mut rng)], |g, v| {
            let r = g.reglu(v[0]);
            let s = g.softmax(r);
            let p = g.mul(s, v[1]);
            g.sum(p)
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn reglu_examples() {
        let mut g = Graph::new();
        let x = g.constant(vec![4], vec![2.0, -3.0, 1.0, 4.0]);
        let y = g.reglu(x);
        assert_eq!(g.value(y), &[2.0, -12.0]);
        let x = g.constant(vec![4], vec![2.0, -3.0, -1.0, 0.0]);
        let y = g.reglu(x);
        assert_eq!(g.value(y), &[0.0, 0.0]);
        let x = g.constant(vec![2], vec![1.0, 1.0]);
        let y = g.reglu(x);
        assert_eq!(g.value(y), &[1.0]);
    }

    #[test]
    fn normalizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            random(&[4, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[3], &mut rng),
            random(&[4, 3], &mut rng),
        ];
        let err = check(inputs.clone(), |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            let p = g.mul(y, v[3]);
            g.sum(p)
        });
        assert!(err < 1e-4, "layer norm rel err {err}");
        let err = check(inputs.clone(), |g, v| {
            let (y, _, _) = g.batch_norm(v[0], v[1], v[2], 1e-5);
            let p = g.mul(y, v[3]);
            g.sum(p)
        });
        assert!(err < 1e-4, "batch norm rel err {err}");
        let err = check(inputs, |g, v| {
            let y = g.channel_affine(v[0], v[1], v[2], vec![0.1, -0.2, 0.3], vec![1.5, 0.5, 2.0]);
            let p = g.mul(y, v[3]);
            g.sum(p)
        });
        assert!(err < 1e-4, "channel affine rel err {err}");
    }

    #[test]
    fn gather_group_mean_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let err = check(
            vec![
                random(&[4, 3], &mut rng),
                random(&[2, 3], &mut rng),
                random(&[6, 3], &mut rng),
            ],
            |g, v| {
                let t = g.concat_rows(v[0], v[1]);
                let x = g.scaled_gather(t, vec![0, 5, 2, 2, 1, 4], vec![0.5, 1.0, -2.0, 1.0, 3.0, 1.0]);
                let w = g.mul(x, v[2]);
                let m = g.group_mean(w, 3);
                let r = g.reshape(m, vec![6]);
                let sq = g.mul(r, r);
                g.sum(sq)
            },
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn unused_gather_rows_get_zero_gradient() {
        let table = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap()
            .requires_grad(true);
        let mut g = Graph::new();
        let t = g.leaf(&table);
        let x = g.scaled_gather(t, vec![0, 2], vec![2.0, 1.0]);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(t).unwrap(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn distances_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let err = check(vec![random(&[5, 3], &mut rng), random(&[2, 3], &mut rng)], |g, v| {
            let d = g.pairwise_sq_dist(v[0], v[1]);
            g.weighted_sum(d, vec![0.1, -0.3, 0.2, 0.5, 1.0, 0.0, 0.3, 0.3, -1.0, 0.25])
        });
        assert!(err < 1e-4, "pairwise rel err {err}");
        let err = check(vec![random(&[4, 3], &mut rng)], |g, v| {
            g.cross_entropy(v[0], &[0, 2, 1, 2])
        });
        assert!(err < 1e-4, "ce rel err {err}");
        let err = check(vec![random(&[4, 1], &mut rng)], |g, v| {
            g.mse(v[0], &[0.5, -1.0, 2.0, 0.0])
        });
        assert!(err < 1e-4, "mse rel err {err}");
    }

    #[test]
    fn attention_with_and_without_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![
            random(&[6, 4], &mut rng),
            random(&[6, 4], &mut rng),
            random(&[6, 4], &mut rng),
            random(&[6, 4], &mut rng),
        ];
        let err = check(inputs.clone(), |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, 3, 2, None);
            let p = g.mul(a, v[3]);
            g.sum(p)
        });
        assert!(err < 1e-4, "attention rel err {err}");
        let mask: Vec<f64> = (0..2 * 2 * 3 * 3)
            .map(|i| if i % 4 == 0 { 0.0 } else { 1.25 })
            .collect();
        let err = check(inputs, |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, 3, 2, Some(mask.clone()));
            let p = g.mul(a, v[3]);
            g.sum(p)
        });
        assert!(err < 1e-4, "masked attention rel err {err}");
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 3], vec![1e3, -1e3, 999.0, -1e3, -1e3, -1e3]);
        let s = g.softmax(x);
        assert!(g.value(s).iter().all(|v| v.is_finite()));
        for row in g.value(s).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ce = g.cross_entropy(x, &[1, 0]);
        assert!(g.scalar(ce).is_finite());
    }

    #[test]
    fn group_mean_is_permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut g = Graph::new();
        let a = g.constant(vec![7, 5], rows.concat());
        let mut perm = rows.clone();
        perm.reverse();
        perm.swap(0, 3);
        let b = g.constant(vec![7, 5], perm.concat());
        let ma = g.group_mean(a, 7);
        let mb = g.group_mean(b, 7);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g.value(ma)), bits(g.value(mb)));
    }
}
