//! Property tests for the crate-wide invariants.

use dlvm::distributions::{kl_gaussian_to_std, log_sum_exp, BernoulliProduct, GaussianDiagRank1};
use dlvm::imputation::f1_score;
use dlvm::tape::{grad_check, Tape, Var};
use dlvm::tensor::{matmul, Tensor};
use dlvm::Result;
use proptest::prelude::*;

fn finite_vec(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Reverse-mode gradients match central finite differences for a
    /// composite of every differentiable op, over random shapes up to 16.
    #[test]
    fn autodiff_matches_finite_differences(
        n in 1usize..=16,
        seed in 0u64..1_000,
    ) {
        let mut rng = dlvm::rng::RngStream::seed(seed);
        let x = Tensor::vector((0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect());
        let y = Tensor::vector((0..n).map(|_| rng.uniform_in(0.5, 2.0)).collect());
        let f = |tape: &mut Tape, leaves: &[Var]| -> Result<Var> {
            let t = tape.tanh(leaves[0]);
            let e = tape.exp(t);
            let s = tape.sigmoid(leaves[0]);
            let prod = tape.mul(e, s)?;
            let ratio = tape.div(prod, leaves[1])?;
            let lg = tape.log(leaves[1]);
            let sum = tape.add(ratio, lg)?;
            let neg = tape.neg(sum);
            let sq = tape.mul(neg, neg)?;
            Ok(tape.sum(sq))
        };
        let err = grad_check(f, &[x, y], 1e-5).unwrap();
        prop_assert!(err < 1e-5, "max relative error {}", err);
    }

    /// matmul agrees bit-for-bit with the naive triple loop on dims <= 8.
    #[test]
    fn matmul_matches_triple_loop(
        m in 1usize..=8,
        k in 1usize..=8,
        n in 1usize..=8,
        seed in 0u64..1_000,
    ) {
        let mut rng = dlvm::rng::RngStream::seed(seed);
        let a = Tensor::matrix(m, k, (0..m * k).map(|_| rng.standard_normal()).collect()).unwrap();
        let b = Tensor::matrix(k, n, (0..k * n).map(|_| rng.standard_normal()).collect()).unwrap();
        let got = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.at(i, kk) * b.at(kk, j);
                }
                prop_assert_eq!(got.at(i, j).to_bits(), acc.to_bits());
            }
        }
    }

    /// Bernoulli log-mass is non-positive for every valid input.
    #[test]
    fn bernoulli_log_mass_nonpositive(
        probs in finite_vec(8, 0.0, 1.0),
        bits in prop::collection::vec(prop::bool::ANY, 8),
    ) {
        let b = BernoulliProduct::new(probs);
        let x: Vec<f64> = bits.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        prop_assert!(b.log_mass(&x).unwrap() <= 0.0);
    }

    /// log_sum_exp matches the naive sum where the naive sum is safe.
    #[test]
    fn log_sum_exp_matches_naive(values in finite_vec(10, -20.0, 20.0)) {
        let naive = values.iter().map(|v| v.exp()).sum::<f64>().ln();
        let got = log_sum_exp(&values).unwrap();
        prop_assert!((got - naive).abs() < 1e-10);
    }

    /// KL to the standard normal is nonnegative and vanishes only at the
    /// standard family member.
    #[test]
    fn kl_nonnegative(
        mean in finite_vec(4, -2.0, 2.0),
        log_diag in finite_vec(4, -1.5, 1.5),
        u in finite_vec(4, -1.0, 1.0),
    ) {
        let q = GaussianDiagRank1::new(
            mean.clone(),
            log_diag.iter().map(|l| l.exp()).collect(),
            u.clone(),
        ).unwrap();
        let kl = kl_gaussian_to_std(&q);
        prop_assert!(kl >= -1e-12, "KL = {}", kl);
        let displaced = mean.iter().map(|m| m.abs()).sum::<f64>()
            + log_diag.iter().map(|l| l.abs()).sum::<f64>()
            + u.iter().map(|v| v.abs()).sum::<f64>();
        if displaced > 0.5 {
            prop_assert!(kl > 0.0);
        }
    }

    /// F1 stays in [0, 1] under the documented conventions.
    #[test]
    fn f1_in_unit_interval(
        t_bits in prop::collection::vec(prop::bool::ANY, 12),
        i_bits in prop::collection::vec(prop::bool::ANY, 12),
    ) {
        let truth: Vec<f64> = t_bits.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let imputed: Vec<f64> = i_bits.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let f1 = f1_score(&truth, &imputed).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
        if truth == imputed {
            prop_assert_eq!(f1, 1.0);
        }
    }
}
