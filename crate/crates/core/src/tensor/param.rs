use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Named, optionally frozen, model weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered parameter set with unique dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        frozen: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            frozen,
        });
        Ok(ParamId(id))
    }

    /// Weight `[fan_in, fan_out]` ~ U(±1/sqrt(fan_in)), bias zero.
    pub fn add_linear<R: Rng>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let weight = self.add(
            format!("{prefix}.weight"),
            Tensor::new(vec![fan_in, fan_out], w)?,
            false,
        )?;
        let bias = self.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), false)?;
        Ok(Linear { weight, bias })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Records every parameter as a leaf; frozen ones as constants.
    pub fn bind(&self, tape: &Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), !p.frozen))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(p.tensor.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Gradient map keyed by parameter name. Frozen parameters are absent;
    /// trainable parameters the loss did not touch get zero tensors.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .zip(&bound.vars)
            .filter(|(p, _)| !p.frozen)
            .map(|(p, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
                (p.name.clone(), g)
            })
            .collect()
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Affine map `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add_row(y, bound.var(self.bias))
    }

    /// Applies the map to a tensor of any rank whose last axis is `in`.
    pub fn forward_nd(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let fan_in = *shape
            .last()
            .ok_or_else(|| Error::shape("linear", "scalar input"))?;
        let rows = shape.iter().product::<usize>() / fan_in.max(1);
        let flat = tape.reshape(x, &[rows, fan_in])?;
        let y = self.forward(tape, bound, flat)?;
        let fan_out = tape.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = fan_out;
        tape.reshape(y, &out_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(1.0), false).unwrap();
        assert!(s.add("a", Tensor::scalar(2.0), false).is_err());
    }

    #[test]
    fn frozen_absent_and_unused_zero() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, 2.0]), false).unwrap();
        s.add("unused", Tensor::vector(vec![5.0]), false).unwrap();
        let f = s
            .add("frozen", Tensor::vector(vec![3.0, 4.0]), true)
            .unwrap();
        let t = Tape::new(Precision::F64);
        let b = s.bind(&t).unwrap();
        let prod = t.mul(b.var(a), b.var(f)).unwrap();
        let loss = t.sum(prod).unwrap();
        let g = s.gradients(&b, &t.backward(loss).unwrap());
        assert_eq!(g["a"].data(), &[3.0, 4.0]);
        assert_eq!(g["unused"].data(), &[0.0]);
        assert!(!g.contains_key("frozen"));
    }

    #[test]
    fn linear_init_bounds() {
        let mut s = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let l = s.add_linear("l", 16, 4, &mut rng).unwrap();
        assert!(s.param(l.weight).tensor.max_abs() <= 0.25);
        assert_eq!(s.param(l.bias).tensor.max_abs(), 0.0);
    }
}
