//! Dense tensors and reverse-mode differentiation.
//!
//! Everything above this module (transformer, masking objective, heads)
//! builds its forward passes out of the primitives here. All arithmetic is
//! `f64` with sequential row-major reductions, so a fixed seed reproduces a
//! run bit for bit.

pub mod gradcheck;
pub mod params;
mod tape;
mod tensor;

pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

impl Tape {
    /// `x @ w + b` with `x: [.., d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Layer normalization over the last axis: standardize, then scale by
    /// `gain` and shift by `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize(x, eps);
        let s = self.mul_row(n, gain)?;
        self.add_row(s, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, random_tensor};
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape.constant(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let b = tape.constant(random_tensor(vec![3, 2], &mut rng(1)));
        let out = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(b).data());
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let b = tape.constant(random_tensor(vec![2, 2], &mut rng(2)));
        let out = tape.matmul(z, b).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut r = rng(3);
        let a = random_tensor(vec![4, 5], &mut r);
        let b = random_tensor(vec![5, 3], &mut r);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.matmul(av, bv).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut e = 0.0;
                for k in 0..5 {
                    e += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert!((tape.value(out).data()[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_on_constant_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0; 4]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let y = tape.softmax(x);
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_sum_reference_and_sums_to_one() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let scale = if seed % 2 == 0 { 1.0 } else { 1e4 };
            let x = random_tensor(vec![5, 7], &mut r).map(|v| v * scale);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = tape.softmax(xv);
            for (yrow, xrow) in tape.value(y).data().chunks(7).zip(x.data().chunks(7)) {
                let m = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = xrow.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = exps.iter().sum();
                for (a, e) in yrow.iter().zip(&exps) {
                    assert!((a - e / s).abs() < 1e-12);
                }
                let total: f64 = yrow.iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_zero_on_constant_slice() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 6], 3.5));
        let g = tape.constant(Tensor::full(vec![6], 1.0));
        let b = tape.constant(Tensor::zeros(vec![6]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_near_identity_on_standardized_input() {
        // Build an exactly standardized row, then check the op returns it.
        let raw = vec![1.0, -2.0, 0.5, 3.0, -1.5, 0.25, 2.0, -3.25];
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std: Vec<f64> = raw.iter().map(|v| (v - mean) / var.sqrt()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(std.clone()));
        let g = tape.constant(Tensor::full(vec![8], 1.0));
        let b = tape.constant(Tensor::zeros(vec![8]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&std) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_moments() {
        for seed in 0..10 {
            let x = random_tensor(vec![3, 16], &mut rng(100 + seed));
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = tape.normalize(xv, 1e-12);
            for row in tape.value(y).data().chunks(16) {
                let mean = row.iter().sum::<f64>() / 16.0;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-9, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(random_tensor(vec![3, 4], &mut rng(7)).with_grad());
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(w).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_half_sum_of_squares_is_w() {
        let mut tape = Tape::new();
        let t = random_tensor(vec![5], &mut rng(8));
        let w = tape.leaf(t.clone().with_grad());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        for (g, e) in grads.wrt(w).unwrap().data().iter().zip(t.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(random_tensor(vec![3], &mut rng(9)).with_grad());
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn disconnected_parameter_gets_exact_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(random_tensor(vec![2], &mut rng(10)).with_grad());
        let unused = tape.leaf(random_tensor(vec![4], &mut rng(11)).with_grad());
        let loss = tape.sum_all(used);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(unused).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(grads.wrt(unused).unwrap().shape(), &[4]);
    }

    /// Gradient check for each primitive over >= 20 random seeds.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        type Builder = fn(&mut Tape, &[Var]) -> crate::error::Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
                let y = t.add(v[0], v[1])?;
                Ok(t.sum_all(y))
            }),
            ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| {
                let y = t.sub(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("mul", vec![vec![6], vec![6]], |t, v| {
                let y = t.mul(v[0], v[1])?;
                Ok(t.sum_all(y))
            }),
            ("affine", vec![vec![5]], |t, v| {
                let y = t.affine(v[0], -2.5, 0.75);
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("add_row", vec![vec![3, 4], vec![4]], |t, v| {
                let y = t.add_row(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("mul_row", vec![vec![3, 4], vec![4]], |t, v| {
                let y = t.mul_row(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v| {
                let y = t.bmm(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("index_select", vec![vec![6]], |t, v| {
                let y = t.index_select(v[0], vec![5, 0, 0, 3, 2], vec![5])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("concat_cols", vec![vec![3, 2], vec![3, 3]], |t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("concat_rows", vec![vec![2, 3], vec![4, 3]], |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("softmax", vec![vec![3, 5]], |t, v| {
                let y = t.softmax(v[0]);
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("log_softmax", vec![vec![3, 5]], |t, v| {
                let y = t.log_softmax(v[0]);
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("normalize", vec![vec![3, 6]], |t, v| {
                let y = t.normalize(v[0], 1e-5);
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("gelu", vec![vec![8]], |t, v| {
                let y = t.gelu(v[0]);
                Ok(t.sum_all(y))
            }),
            ("sigmoid", vec![vec![8]], |t, v| {
                let y = t.sigmoid_op(v[0]);
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("mean_last", vec![vec![4, 5]], |t, v| {
                let y = t.mean_last(v[0]);
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
            ("causal_conv1d", vec![vec![7, 3], vec![2, 3, 3], vec![2]], |t, v| {
                let y = t.causal_conv1d(v[0], v[1], v[2], 2)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
        ];
        for (name, shapes, builder) in cases {
            for seed in 0..20u64 {
                let mut r = rng(1000 + seed);
                let leaves: Vec<Tensor> = shapes
                    .iter()
                    .map(|s| random_tensor(s.clone(), &mut r))
                    .collect();
                let report = check_gradients(&leaves, builder, 1e-5, None, seed).unwrap();
                assert!(
                    report.max_err < 1e-4,
                    "{name} seed {seed}: max err {} at {:?}",
                    report.max_err,
                    report.worst
                );
            }
        }
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        for seed in 0..20u64 {
            let mut r = rng(2000 + seed);
            // Keep inputs off the kink so central differences are valid.
            let x = Tensor::from_vec(
                (0..10)
                    .map(|_| {
                        let v: f64 = r.gen_range(0.05..1.0);
                        if r.gen_bool(0.5) {
                            v
                        } else {
                            -v
                        }
                    })
                    .collect(),
            );
            let report = check_gradients(
                &[x],
                |t, v| {
                    let y = t.relu(v[0]);
                    let sq = t.mul(y, y)?;
                    Ok(t.sum_all(sq))
                },
                1e-5,
                None,
                seed,
            )
            .unwrap();
            assert!(report.max_err < 1e-4, "seed {seed}: {}", report.max_err);
        }
    }

    #[test]
    fn pow_and_ln_gradients_on_positive_domain() {
        for seed in 0..20u64 {
            let mut r = rng(3000 + seed);
            let x = Tensor::from_vec((0..8).map(|_| r.gen_range(0.1..0.9)).collect());
            let report = check_gradients(
                &[x],
                |t, v| {
                    let p = t.pow_const(v[0], 2.0);
                    let l = t.ln_clamped(v[0], 1e-12);
                    let y = t.mul(p, l)?;
                    Ok(t.sum_all(y))
                },
                1e-6,
                None,
                seed,
            )
            .unwrap();
            assert!(report.max_err < 1e-4, "seed {seed}: {}", report.max_err);
        }
    }

    #[test]
    fn ln_clamped_floors_and_zeroes_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1e-20, 0.5]).with_grad());
        let y = tape.ln_clamped(x, 1e-12);
        assert!((tape.value(y).data()[0] - (1e-12f64).ln()).abs() < 1e-9);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        let g = grads.wrt(x).unwrap().data();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 2.0).abs() < 1e-12);
    }
}
