//! Central finite-difference gradient checking at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::param::Bound;
use super::{ParamStore, Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `max|a - n| / max(max|a|, max|n|, 1e-6)`: error normalized by the
/// gradient's own scale.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1e-6f64, |m, v| m.max(v.abs()));
    diff / scale
}

/// Reduces any output to a scalar through a fixed random projection so
/// that every output element contributes to the checked gradient.
pub fn project(tape: &Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out);
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Compares the tape gradient of `f` w.r.t. each input with central
/// differences. Returns one relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new(Precision::F64);
        let vars = xs
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let tape = Tape::new(Precision::F64);
    let vars = inputs
        .iter()
        .map(|x| tape.variable(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(errors)
}

/// Same check for every trainable parameter of a store. Returns
/// `(name, relative error)` pairs in store order.
pub fn check_params<F>(store: &ParamStore, step: f64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new(Precision::F64);
        let bound = s.bind(&tape)?;
        let out = f(&tape, &bound)?;
        Ok(tape.value(out).item())
    };
    let tape = Tape::new(Precision::F64);
    let bound = store.bind(&tape)?;
    let loss = f(&tape, &bound)?;
    let analytic = store.gradients(&bound, &tape.backward(loss)?);

    let mut work = store.clone();
    let mut out = Vec::new();
    for p in store.iter().filter(|p| !p.frozen) {
        let a = analytic
            .get(&p.name)
            .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        let mut numeric = vec![0.0; p.tensor.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = p.tensor.data()[j];
            work.get_mut(&p.name).unwrap().tensor.data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(&p.name).unwrap().tensor.data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(&p.name).unwrap().tensor.data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        out.push((p.name.clone(), relative_error(a.data(), &numeric)));
    }
    Ok(out)
}
