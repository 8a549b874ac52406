//! Central finite-difference gradient checks.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Parameter handles registered on a tape, by name.
pub type ParamVars = BTreeMap<String, Var>;

/// Named parameter arrays.
pub type ParamSet<F> = BTreeMap<String, Array<F>>;

fn eval<F: Real, M>(model_fn: &M, params: &ParamSet<F>) -> Result<(Tape<F>, Var)>
where
    M: Fn(&mut Tape<F>, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: ParamVars = params.iter().map(|(k, v)| (k.clone(), tape.param(k, v.clone()))).collect();
    let loss = model_fn(&mut tape, &vars)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric("non-finite loss during gradient check".into()));
    }
    Ok((tape, loss))
}

/// Largest relative disagreement between the tape gradient and central
/// differences over every parameter entry:
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F: Real, M>(model_fn: M, params: &ParamSet<F>, epsilon: f64) -> Result<f64>
where
    M: Fn(&mut Tape<F>, &ParamVars) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::Parameter(alloc::format!("epsilon {epsilon} outside [1e-5, 1e-2]")));
    }
    let (tape, loss) = eval(&model_fn, params)?;
    let analytic = tape.backward(loss)?;
    drop(tape);

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (name, base) in params {
        for k in 0..base.len() {
            let x0 = base.values()[k];
            work.get_mut(name).expect("same keys").values_mut()[k] = F::of(x0.f64() + epsilon);
            let (t, l) = eval(&model_fn, &work)?;
            let plus = t.scalar(l).f64();
            work.get_mut(name).expect("same keys").values_mut()[k] = F::of(x0.f64() - epsilon);
            let (t, l) = eval(&model_fn, &work)?;
            let minus = t.scalar(l).f64();
            work.get_mut(name).expect("same keys").values_mut()[k] = x0;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[name].values()[k].f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array<f64> {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_model_exact() {
        let mut params = ParamSet::new();
        params.insert("w".to_string(), Array::<f64>::scalar(0.7));
        let err = grad_check(
            |t, p| {
                let x = t.constant(Array::scalar(2.5));
                let y = t.mul(p["w"], x)?;
                let target = t.constant(Array::scalar(1.0));
                let r = t.sub(y, target)?;
                Ok(t.mul(r, r)?)
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_epsilon_out_of_range() {
        let params = ParamSet::<f64>::new();
        let r = grad_check(|t, _| Ok(t.constant(Array::scalar(0.0))), &params, 0.1);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = ParamSet::new();
        params.insert("w".to_string(), Array::<f64>::scalar(1000.0));
        let r = grad_check(|t, p| Ok(t.exp(p["w"])), &params, 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        params.insert("a".to_string(), random(&[3, 4], &mut rng));
        params.insert("b".to_string(), random(&[4, 2], &mut rng));
        let err = grad_check(
            |t, p| {
                let c = t.matmul(p["a"], p["b"])?;
                Ok(t.sum_all(c))
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
