//! Every tape primitive against central finite differences, over random
//! inputs drawn from many seeds.

use evcap_core::gradcheck::{grad_check, ParamSet, ParamVars};
use evcap_core::{Array, PointwiseKind, Result, Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts a non-scalar output with fixed random weights so that every
/// output entry contributes to the checked scalar.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum_all(p))
}

fn params(specs: &[(&str, &[usize])], seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs.iter().map(|(n, s)| (n.to_string(), random(s, -1.0, 1.0, &mut rng))).collect()
}

fn check<M>(specs: &[(&str, &[usize])], seed: u64, f: M) -> f64
where
    M: Fn(&mut Tape<f64>, &ParamVars) -> Result<Var>,
{
    grad_check(f, &params(specs, seed), EPS).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn matmul(seed in any::<u64>()) {
        let e = check(&[("a", &[3, 4]), ("b", &[4, 2])], seed, |t, v| {
            let o = t.matmul(v["a"], v["b"])?;
            contract(t, o, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn add_sub_mul(seed in any::<u64>()) {
        for kind in [PointwiseKind::Add, PointwiseKind::Sub, PointwiseKind::Mul] {
            let e = check(&[("a", &[3, 5]), ("b", &[3, 5])], seed, |t, v| {
                let o = t.pointwise(kind, &[v["a"], v["b"]])?;
                contract(t, o, seed)
            });
            prop_assert!(e < TOL, "{kind:?}: {e}");
        }
    }

    #[test]
    fn sigmoid_tanh_exp(seed in any::<u64>()) {
        for which in 0..3 {
            let e = check(&[("a", &[4, 3])], seed, |t, v| {
                let o = match which {
                    0 => t.sigmoid(v["a"]),
                    1 => t.tanh(v["a"]),
                    _ => t.exp(v["a"]),
                };
                contract(t, o, seed)
            });
            prop_assert!(e < TOL, "op {which}: {e}");
        }
    }

    #[test]
    fn add_bias_and_scale(seed in any::<u64>()) {
        let e = check(&[("a", &[4, 3]), ("b", &[1, 3])], seed, |t, v| {
            let o = t.add_bias(v["a"], v["b"])?;
            let o = t.scale(o, -1.7);
            contract(t, o, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn slicing_and_concatenation(seed in any::<u64>()) {
        let e = check(&[("a", &[3, 6]), ("b", &[3, 2])], seed, |t, v| {
            let s = t.slice_cols(v["a"], 1, 4)?;
            let c = t.concat_cols(&[s, v["b"], s])?;
            contract(t, c, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn row_selection_reshape_and_gather(seed in any::<u64>()) {
        let e = check(&[("a", &[4, 6])], seed, |t, v| {
            let s = t.select_rows(v["a"], &[3, 0, 3, 2])?;
            let r = t.reshape(s, &[8, 3])?;
            let g = t.gather_cols(r, &[0, 2, 1, 1, 0, 2, 2, 0])?;
            contract(t, g, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn pooling_and_reductions(seed in any::<u64>()) {
        let e = check(&[("a", &[3, 8])], seed, |t, v| {
            let p = t.pool_time(v["a"], 4)?;
            let p = contract(t, p, seed)?;
            let m = t.mean_all(v["a"]);
            let s = t.sum_all(v["a"]);
            let s = t.scale(s, 0.3);
            let x = t.add(p, m)?;
            t.mul(x, s)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn softmaxes(seed in any::<u64>()) {
        for offdiag in [false, true] {
            let e = check(&[("a", &[5, 5])], seed, |t, v| {
                let o = if offdiag { t.offdiag_softmax(v["a"], 0.5)? } else { t.softmax_rows(v["a"], 0.5)? };
                contract(t, o, seed)
            });
            prop_assert!(e < TOL, "offdiag={offdiag}: {e}");
        }
    }

    #[test]
    fn cosine_similarity(seed in any::<u64>()) {
        let e = check(&[("a", &[5, 4])], seed, |t, v| {
            let d = t.cosine_similarity(v["a"])?;
            contract(t, d, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn contrastive_nll(seed in any::<u64>()) {
        let e = check(&[("a", &[6, 3])], seed, |t, v| {
            let d = t.cosine_similarity(v["a"])?;
            t.contrastive_nll(d, &[1, 0, 3, 2, 5, 4], 0.1)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn bilstm(seed in any::<u64>()) {
        let h = 3;
        let e = check(
            &[
                ("x", &[2, 5]),
                ("fw_ih", &[1, 4 * h]), ("fw_hh", &[h, 4 * h]), ("fw_b", &[1, 4 * h]),
                ("bw_ih", &[1, 4 * h]), ("bw_hh", &[h, 4 * h]), ("bw_b", &[1, 4 * h]),
            ],
            seed,
            |t, v| {
                let o = t.bilstm(v["x"], [v["fw_ih"], v["fw_hh"], v["fw_b"]], [v["bw_ih"], v["bw_hh"], v["bw_b"]])?;
                contract(t, o, seed)
            },
        );
        prop_assert!(e < TOL, "{e}");
    }
}
