use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::param::{Bound, Linear};
use crate::tensor::{ParamStore, Tape, Var};

/// Multi-head cross-attention: per-head scaled dot products over projected
/// keys, softmax over keys, heads concatenated through an output projection.
/// Residuals are added by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mhca {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl Mhca {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Invalid(format!(
                "dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: store.add_linear(&format!("{prefix}.q_proj"), dim, dim, rng)?,
            k: store.add_linear(&format!("{prefix}.k_proj"), dim, dim, rng)?,
            v: store.add_linear(&format!("{prefix}.v_proj"), dim, dim, rng)?,
            out: store.add_linear(&format!("{prefix}.out_proj"), dim, dim, rng)?,
            dim,
            heads,
        })
    }

    fn split_heads(&self, tape: &Tape, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let x = tape.reshape(x, &[rows, self.heads, self.dim / self.heads])?;
        tape.swap_axes01(x)
    }

    /// Concatenated per-head context `[Lq, d]` (before the output
    /// projection) and attention weights `[heads, Lq, Lk]`, from already
    /// projected inputs.
    pub fn attend_heads(&self, tape: &Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let lq = tape.shape(q)[0];
        let dh = self.dim / self.heads;
        let (qh, kh, vh) = (
            self.split_heads(tape, q)?,
            self.split_heads(tape, k)?,
            self.split_heads(tape, v)?,
        );
        let scores = tape.bmm(qh, kh, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores, 2)?;
        let ctx = tape.bmm(weights, vh, false)?;
        let ctx = tape.swap_axes01(ctx)?;
        Ok((tape.reshape(ctx, &[lq, self.dim])?, weights))
    }

    /// Output `[Lq, d]` and weights from already projected inputs.
    pub fn attend_projected(
        &self,
        tape: &Tape,
        bound: &Bound,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var)> {
        let (ctx, weights) = self.attend_heads(tape, q, k, v)?;
        Ok((self.out.forward(tape, bound, ctx)?, weights))
    }

    pub fn forward_with_weights(
        &self,
        tape: &Tape,
        bound: &Bound,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var)> {
        let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
        if qs.len() != 2
            || ks.len() != 2
            || vs.len() != 2
            || qs[1] != self.dim
            || ks[1] != self.dim
            || vs != ks
        {
            return Err(Error::shape(
                "mhca",
                format!("q {qs:?}, k {ks:?}, v {vs:?} for d = {}", self.dim),
            ));
        }
        let qp = self.q.forward(tape, bound, q)?;
        let kp = self.k.forward(tape, bound, k)?;
        let vp = self.v.forward(tape, bound, v)?;
        self.attend_projected(tape, bound, qp, kp, vp)
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, bound, q, k, v)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, project, DEFAULT_STEP};
    use crate::tensor::{Precision, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn set(store: &mut ParamStore, name: &str, t: Tensor) {
        store.get_mut(name).unwrap().tensor = t;
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Mhca::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn single_key_ignores_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = Mhca::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let tape = Tape::new(Precision::F64);
        let b = store.bind(&tape).unwrap();
        let q = tape.constant(random(3, 8, &mut rng)).unwrap();
        let kv = tape.constant(random(1, 8, &mut rng)).unwrap();
        let out = tape.value(m.forward(&tape, &b, q, kv, kv).unwrap());
        let v = m.v.forward(&tape, &b, kv).unwrap();
        let expect = tape.value(m.out.forward(&tape, &b, v).unwrap());
        for r in 0..3 {
            for (a, e) in out.row(r).iter().zip(expect.row(0)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_projections_give_gram_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let m = Mhca::new(&mut store, "a", 3, 1, &mut rng).unwrap();
        for p in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            set(&mut store, &format!("a.{p}.weight"), Tensor::eye(3));
        }
        let tape = Tape::new(Precision::F64);
        let b = store.bind(&tape).unwrap();
        let x = tape.constant(Tensor::eye(3)).unwrap();
        let (out, w) = m.forward_with_weights(&tape, &b, x, x, x).unwrap();
        // Gram matrix of one-hot rows is I, scaled by 1/sqrt(3): diagonal
        // weight e^s / (e^s + 2) with s = 1/sqrt(3).
        let s = 1.0 / 3f64.sqrt();
        let diag = s.exp() / (s.exp() + 2.0);
        let off = 1.0 / (s.exp() + 2.0);
        let w = tape.value(w);
        let out = tape.value(out);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { diag } else { off };
                assert!((w.data()[i * 3 + j] - e).abs() < 1e-12);
                assert!((out.data()[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let m = Mhca::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let q = random(3, 8, &mut rng);
        let kv = random(4, 8, &mut rng);
        let errs = check_params(&store, DEFAULT_STEP, |tape, b| {
            let q = tape.constant(q.clone())?;
            let kv = tape.constant(kv.clone())?;
            let out = m.forward(tape, b, q, kv, kv)?;
            project(tape, out, 9)
        })
        .unwrap();
        assert_eq!(errs.len(), 8);
        for (name, e) in errs {
            assert!(e <= 1e-4, "{name}: {e}");
        }
    }
}
