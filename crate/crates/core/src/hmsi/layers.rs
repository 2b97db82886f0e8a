//! Building blocks of the scoring network, each usable on its own.

use std::f64::consts::PI;

use rand::Rng;

use super::attention::Mhca;
use crate::error::{Error, Result};
use crate::matching::BBox;
use crate::tensor::param::{Bound, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const POS_TEMPERATURE: f64 = 10000.0;

/// Symmetric pixel-word cross-attention; both directions read the
/// pre-update inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiFusion {
    /// Pixels attend to words.
    pub v2t: Mhca,
    /// Words attend to pixels.
    pub t2v: Mhca,
}

/// Projections of the visual side that do not depend on the query.
#[derive(Clone, Copy, Debug)]
pub struct VisualProjections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl BiFusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            v2t: Mhca::new(store, &format!("{prefix}.v2t"), dim, heads, rng)?,
            t2v: Mhca::new(store, &format!("{prefix}.t2v"), dim, heads, rng)?,
        })
    }

    pub fn project_visual(&self, tape: &Tape, bound: &Bound, fv: Var) -> Result<VisualProjections> {
        Ok(VisualProjections {
            q: self.v2t.q.forward(tape, bound, fv)?,
            k: self.t2v.k.forward(tape, bound, fv)?,
            v: self.t2v.v.forward(tape, bound, fv)?,
        })
    }

    /// `(F_v + MHCA(F_v, R_w, R_w), R_w + MHCA(R_w, F_v, F_v))`.
    pub fn forward(&self, tape: &Tape, bound: &Bound, fv: Var, rw: Var) -> Result<(Var, Var)> {
        let pv = self.project_visual(tape, bound, fv)?;
        self.forward_projected(tape, bound, fv, rw, &pv)
    }

    pub fn forward_projected(
        &self,
        tape: &Tape,
        bound: &Bound,
        fv: Var,
        rw: Var,
        pv: &VisualProjections,
    ) -> Result<(Var, Var)> {
        let (fs, ws) = (tape.shape(fv), tape.shape(rw));
        if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[1] || fs[1] != self.v2t.dim {
            return Err(Error::shape(
                "bi_fusion",
                format!("visual {fs:?}, words {ws:?}"),
            ));
        }
        let wk = self.v2t.k.forward(tape, bound, rw)?;
        let wv = self.v2t.v.forward(tape, bound, rw)?;
        let (dv, _) = self.v2t.attend_projected(tape, bound, pv.q, wk, wv)?;
        let wq = self.t2v.q.forward(tape, bound, rw)?;
        let (dw, _) = self.t2v.attend_projected(tape, bound, wq, pv.k, pv.v)?;
        Ok((tape.add(fv, dv)?, tape.add(rw, dw)?))
    }
}

/// Multi-scale pyramid: repeated 2x2 average pooling (ceil at odd sizes),
/// then a learned projection per level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pyramid {
    pub proj: Vec<Linear>,
}

impl Pyramid {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        levels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = (0..levels)
            .map(|l| store.add_linear(&format!("{prefix}.{l}"), dim, dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self { proj })
    }

    pub fn levels(&self) -> usize {
        self.proj.len()
    }

    /// Smallest map side that keeps every level distinct.
    pub fn min_side(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    /// Unprojected levels of a `[H, W, d]` map.
    pub fn pool_levels(&self, tape: &Tape, map: Var) -> Result<Vec<Var>> {
        let s = tape.shape(map);
        if s.len() != 3 || s[0] < self.min_side() || s[1] < self.min_side() {
            return Err(Error::shape(
                "build_pyramid",
                format!(
                    "map {s:?} too small for {} levels (need sides >= {})",
                    self.levels(),
                    self.min_side()
                ),
            ));
        }
        let mut out = vec![map];
        for _ in 1..self.levels() {
            let next = tape.avg_pool2(*out.last().unwrap())?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, map: Var) -> Result<Vec<Var>> {
        self.pool_levels(tape, map)?
            .into_iter()
            .zip(&self.proj)
            .map(|(lvl, p)| p.forward_nd(tape, bound, lvl))
            .collect()
    }
}

/// Box-conditioned deformable sampling over the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformSampler {
    pub offset: Linear,
    pub attn: Linear,
    pub value: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformSampler {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 || levels == 0 || points == 0 {
            return Err(Error::Invalid(format!(
                "deformable sampler needs d divisible by heads and nonzero levels/points (d {dim}, heads {heads})"
            )));
        }
        let slots = heads * levels * points;
        Ok(Self {
            offset: store.add_linear(&format!("{prefix}.offset"), dim, slots * 2, rng)?,
            attn: store.add_linear(&format!("{prefix}.attn"), dim, slots, rng)?,
            value: store.add_linear(&format!("{prefix}.value_proj"), dim, dim, rng)?,
            out: store.add_linear(&format!("{prefix}.out_proj"), dim, dim, rng)?,
            dim,
            heads,
            levels,
            points,
        })
    }

    /// Value projection of every level. Bilinear weights sum to one, so
    /// projecting before sampling equals projecting the samples.
    pub fn value_maps(&self, tape: &Tape, bound: &Bound, levels: &[Var]) -> Result<Vec<Var>> {
        levels
            .iter()
            .map(|&l| self.value.forward_nd(tape, bound, l))
            .collect()
    }

    /// Query per box: mean over levels of the bilinear sample at its center.
    pub fn center_query(&self, tape: &Tape, levels: &[Var], boxes: &[BBox]) -> Result<Var> {
        let centers = Tensor::new(
            vec![boxes.len(), 2],
            boxes.iter().flat_map(|b| [b.cx, b.cy]).collect(),
        )?;
        let centers = tape.constant(centers)?;
        let mut acc: Option<Var> = None;
        for &l in levels {
            let s = tape.bilinear_sample(l, centers)?;
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::shape("deform_sample", "empty pyramid"))?;
        tape.scale(acc, 1.0 / levels.len() as f64)
    }

    /// Samples all boxes at once. Returns `[n, d]` and the attention weights
    /// `[n * heads, levels * points]`.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        levels: &[Var],
        value_maps: &[Var],
        boxes: &[BBox],
    ) -> Result<(Var, Var)> {
        if levels.len() != self.levels || value_maps.len() != self.levels {
            return Err(Error::shape(
                "deform_sample",
                format!("expected {} levels", self.levels),
            ));
        }
        let n = boxes.len();
        let group = self.levels * self.points;
        let slots = self.heads * group;
        let query = self.center_query(tape, levels, boxes)?;

        let offsets = self.offset.forward(tape, bound, query)?;
        let offsets = tape.reshape(offsets, &[n * slots, 2])?;
        let mut scale = Vec::with_capacity(n * slots * 2);
        let mut base = Vec::with_capacity(n * slots * 2);
        for b in boxes {
            for _ in 0..slots {
                scale.extend([b.w, b.h]);
                base.extend([b.cx, b.cy]);
            }
        }
        let scale = tape.constant(Tensor::new(vec![n * slots, 2], scale)?)?;
        let base = tape.constant(Tensor::new(vec![n * slots, 2], base)?)?;
        let points = tape.add(tape.mul(offsets, scale)?, base)?;

        let logits = self.attn.forward(tape, bound, query)?;
        let logits = tape.reshape(logits, &[n * self.heads, group])?;
        let weights = tape.softmax(logits, 1)?;
        let w3 = tape.reshape(weights, &[n * self.heads, 1, group])?;

        let gathered = tape.deform_gather(value_maps, points, self.heads, self.points)?;
        let heads_out = tape.bmm(w3, gathered, false)?;
        let heads_out = tape.reshape(heads_out, &[n, self.dim])?;
        Ok((self.out.forward(tape, bound, heads_out)?, weights))
    }
}

/// `q + MHCA(q, keys, values)` for a single query row `q[d]`, giving `[d]`.
pub fn aggregate(
    tape: &Tape,
    bound: &Bound,
    attn: &Mhca,
    q: Var,
    keys: Var,
    values: Var,
) -> Result<Var> {
    let d = attn.dim;
    if tape.shape(q) != [d] {
        return Err(Error::shape(
            "aggregate",
            format!("query {:?} for d = {d}", tape.shape(q)),
        ));
    }
    let q2 = tape.reshape(q, &[1, d])?;
    let upd = attn.forward(tape, bound, q2, keys, values)?;
    let out = tape.add(q2, upd)?;
    tape.reshape(out, &[d])
}

/// Referring query: the sentence embedding attends over the original words
/// as keys and the visually grounded words as values.
pub fn refer_aggregate(
    tape: &Tape,
    bound: &Bound,
    attn: &Mhca,
    rs: Var,
    rw: Var,
    rw_vl: Var,
) -> Result<Var> {
    aggregate(tape, bound, attn, rs, rw, rw_vl)
}

/// Caption tokens attend over the referring words; residual from the tokens.
pub fn caption_filter(
    tape: &Tape,
    bound: &Bound,
    attn: &Mhca,
    cw: Var,
    rw: Var,
    rw_vl: Var,
) -> Result<Var> {
    let upd = attn.forward(tape, bound, cw, rw, rw_vl)?;
    tape.add(cw, upd)
}

/// Caption sentence pools its filtered tokens into the semantic descriptor.
pub fn caption_aggregate(
    tape: &Tape,
    bound: &Bound,
    attn: &Mhca,
    cs: Var,
    cw: Var,
    cw_vl: Var,
) -> Result<Var> {
    aggregate(tape, bound, attn, cs, cw, cw_vl)
}

/// Sinusoidal embedding of `(cx, cy, w, h)`: `d/4` dimensions per
/// coordinate, interleaved `sin, cos` pairs with geometric frequencies.
pub fn pos_embed(b: &BBox, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 8 != 0 {
        return Err(Error::Invalid(format!(
            "positional embedding needs d divisible by 8, got {dim}"
        )));
    }
    let per = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for c in [b.cx, b.cy, b.w, b.h] {
        for i in 0..per / 2 {
            let freq = POS_TEMPERATURE.powf(2.0 * i as f64 / per as f64);
            let angle = c * 2.0 * PI / freq;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Ok(out)
}

pub fn pos_embed_rows(boxes: &[BBox], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(boxes.len() * dim);
    for b in boxes {
        data.extend(pos_embed(b, dim)?);
    }
    Tensor::new(vec![boxes.len(), dim], data)
}

/// `F_fuse(O_v + O_c + 2 O_p)`, the sum of the two position-fused streams.
/// A missing caption stream counts as zeros.
pub fn holistic_project(
    tape: &Tape,
    bound: &Bound,
    fuse: &Linear,
    ov: Var,
    oc: Option<Var>,
    op: Var,
) -> Result<Var> {
    let mut x = ov;
    if let Some(oc) = oc {
        x = tape.add(x, oc)?;
    }
    let op2 = tape.scale(op, 2.0)?;
    x = tape.add(x, op2)?;
    fuse.forward(tape, bound, x)
}
