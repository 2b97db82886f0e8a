//! The cross-modal scoring network.
//!
//! For one frame and one referring expression it fuses pixels with words,
//! samples a multi-scale pyramid around every proposal box, filters each
//! proposal's caption against the expression, adds positional embeddings,
//! and scores each proposal by cosine similarity with the referring query.
//!
//! Work that does not depend on the expression (visual projections, caption
//! embeddings, positional embeddings) lives in a [`FrameContext`] that is
//! shared by every query scored on the same tape.

pub mod attention;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::Mhca;
pub use layers::{
    caption_aggregate, caption_filter, holistic_project, pos_embed, pos_embed_rows,
    refer_aggregate, BiFusion, DeformSampler, Pyramid,
};

use crate::encoders::{SyntheticVisual, TextEncoder};
use crate::error::{Error, Result};
use crate::matching::BBox;
use crate::priors::{AttributeGrammar, Proposal, SceneRecord};
use crate::tensor::container::TensorFile;
use crate::tensor::param::{Bound, Linear, ParamId};
use crate::tensor::{ParamStore, Precision, Tape, Tensor, Var};

pub const TEXT_TABLE: &str = "encoders.text.table";
pub const VISUAL_PROJECTION: &str = "encoders.visual.projection";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmsiConfig {
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub fusion_layers: usize,
    pub map_height: usize,
    pub map_width: usize,
    /// Background noise of the synthetic visual map.
    pub visual_noise: f64,
    /// Seed of the frozen encoders and of parameter initialization.
    pub seed: u64,
    /// Caption stream on or off.
    pub esi: bool,
}

impl Default for HmsiConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 8,
            levels: 4,
            points: 4,
            fusion_layers: 1,
            map_height: 24,
            map_width: 72,
            visual_noise: 0.0,
            seed: 42,
            esi: true,
        }
    }
}

impl HmsiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 8 != 0 {
            return Err(Error::Invalid(format!(
                "d = {} must be divisible by 8",
                self.dim
            )));
        }
        if self.levels == 0 || self.points == 0 {
            return Err(Error::Invalid("levels and points must be positive".into()));
        }
        let min = 1usize << (self.levels - 1);
        if self.map_height < min || self.map_width < min {
            return Err(Error::Invalid(format!(
                "map {}x{} too small for {} levels",
                self.map_height, self.map_width, self.levels
            )));
        }
        if !(self.visual_noise >= 0.0 && self.visual_noise.is_finite()) {
            return Err(Error::Invalid(
                "visual_noise must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Scalar entries stored alongside the parameters in a checkpoint.
    pub fn to_meta(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("meta.dim", self.dim as f64),
            ("meta.heads", self.heads as f64),
            ("meta.levels", self.levels as f64),
            ("meta.points", self.points as f64),
            ("meta.fusion_layers", self.fusion_layers as f64),
            ("meta.map_height", self.map_height as f64),
            ("meta.map_width", self.map_width as f64),
            ("meta.visual_noise", self.visual_noise),
            ("meta.seed", self.seed as f64),
            ("meta.esi", if self.esi { 1.0 } else { 0.0 }),
        ]
    }

    pub fn from_meta(file: &TensorFile) -> Result<Self> {
        let get = |k: &str| -> Result<f64> { Ok(file.get(k)?.item()) };
        let cfg = Self {
            dim: get("meta.dim")? as usize,
            heads: get("meta.heads")? as usize,
            levels: get("meta.levels")? as usize,
            points: get("meta.points")? as usize,
            fusion_layers: get("meta.fusion_layers")? as usize,
            map_height: get("meta.map_height")? as usize,
            map_width: get("meta.map_width")? as usize,
            visual_noise: get("meta.visual_noise")?,
            seed: get("meta.seed")? as u64,
            esi: get("meta.esi")? != 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter handles of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HmsiLayers {
    pub fusion: Vec<BiFusion>,
    pub pyramid: Pyramid,
    pub deform: DeformSampler,
    pub refer: Mhca,
    pub caption_filter: Mhca,
    pub caption_aggregate: Mhca,
    pub fuse: Linear,
    pub text_table: ParamId,
}

#[derive(Clone, Debug)]
pub struct Hmsi {
    pub config: HmsiConfig,
    pub params: ParamStore,
    pub layers: HmsiLayers,
    pub text: TextEncoder,
    pub visual: SyntheticVisual,
}

/// Per-frame, query-independent state recorded on a tape.
#[derive(Clone, Debug)]
pub struct FrameContext {
    pub height: usize,
    pub width: usize,
    /// `[H*W, d]`.
    pub visual: Var,
    first_layer: layers::VisualProjections,
    pub boxes: Vec<BBox>,
    /// `[N, d]`.
    pub positional: Tensor,
    captions: Option<CaptionContext>,
}

impl FrameContext {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug)]
struct CaptionContext {
    /// Token rows of all captions stacked: `[sum Lc, d]`.
    words: Var,
    /// Row range of each proposal's caption.
    spans: Vec<(usize, usize)>,
    /// `[N, d]` sentence embeddings.
    sentences: Var,
    filter_q: Var,
    agg_q: Var,
    agg_k: Var,
}

/// Query-dependent embeddings.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub words: Var,
    pub sentence: Var,
}

/// Output of scoring one query against (a subset of) a frame's proposals.
#[derive(Clone, Debug)]
pub struct QueryScores {
    /// `[n]` cosine scores in the order of `indices`.
    pub scores: Var,
    /// `[n, d]` holistic object representations.
    pub holistic: Var,
    /// `[d]` referring query.
    pub referring: Var,
    pub indices: Vec<usize>,
}

impl Hmsi {
    pub fn new(config: HmsiConfig) -> Result<Self> {
        Self::with_grammar(config, &AttributeGrammar::default())
    }

    pub fn with_grammar(config: HmsiConfig, grammar: &AttributeGrammar) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let fusion = (0..config.fusion_layers)
            .map(|i| {
                BiFusion::new(
                    &mut store,
                    &format!("hmsi.bifusion.{i}"),
                    d,
                    config.heads,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let pyramid = Pyramid::new(&mut store, "hmsi.pyramid", d, config.levels, &mut rng)?;
        let deform = DeformSampler::new(
            &mut store,
            "hmsi.deform",
            d,
            config.heads,
            config.levels,
            config.points,
            &mut rng,
        )?;
        let refer = Mhca::new(&mut store, "hmsi.refer", d, config.heads, &mut rng)?;
        let caption_filter =
            Mhca::new(&mut store, "hmsi.caption_filter", d, config.heads, &mut rng)?;
        let caption_aggregate = Mhca::new(
            &mut store,
            "hmsi.caption_aggregate",
            d,
            config.heads,
            &mut rng,
        )?;
        let fuse = store.add_linear("hmsi.fuse", d, d, &mut rng)?;

        let text = TextEncoder::new(grammar, d, config.seed);
        let visual = SyntheticVisual::new(
            grammar,
            d,
            config.map_height,
            config.map_width,
            config.visual_noise,
            config.seed,
        );
        let text_table = store.add(TEXT_TABLE, text.table.clone(), true)?;
        store.add(VISUAL_PROJECTION, visual.projection.clone(), true)?;

        Ok(Self {
            config,
            params: store,
            layers: HmsiLayers {
                fusion,
                pyramid,
                deform,
                refer,
                caption_filter,
                caption_aggregate,
                fuse,
                text_table,
            },
            text,
            visual,
        })
    }

    /// Rebuilds the network from a checkpoint's meta entries and parameters.
    pub fn from_container(file: &TensorFile) -> Result<Self> {
        let mut model = Self::new(HmsiConfig::from_meta(file)?)?;
        model.load_params(file)?;
        Ok(model)
    }

    pub fn load_params(&mut self, file: &TensorFile) -> Result<()> {
        for p in self.params.iter_mut() {
            let t = file.get(&p.name)?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("`{}`: {:?} vs {:?}", p.name, t.shape(), p.tensor.shape()),
                ));
            }
            p.tensor = t.clone();
        }
        self.sync_encoders()
    }

    /// Copies the stored frozen encoder tensors into the encoders.
    pub fn sync_encoders(&mut self) -> Result<()> {
        let table = self
            .params
            .get(TEXT_TABLE)
            .ok_or_else(|| Error::NotFound(TEXT_TABLE.into()))?
            .tensor
            .clone();
        self.text = TextEncoder::with_table(self.text.vocab.clone(), table)?;
        let proj = self
            .params
            .get(VISUAL_PROJECTION)
            .ok_or_else(|| Error::NotFound(VISUAL_PROJECTION.into()))?;
        self.visual.projection = proj.tensor.clone();
        Ok(())
    }

    /// Parameters plus meta entries, each stored at `precision`.
    pub fn to_container(&self, precision: Precision) -> TensorFile {
        let mut file = TensorFile::new();
        for p in self.params.iter() {
            file.insert(p.name.clone(), precision, p.tensor.clone());
        }
        for (k, v) in self.config.to_meta() {
            file.insert(k, Precision::F64, Tensor::scalar(v));
        }
        file
    }

    pub fn encode_frame(&self, frame: &SceneRecord) -> Result<Tensor> {
        Ok(self.visual.encode_frame(frame)?.features)
    }

    /// Embeds text through the frozen table on the tape.
    pub fn encode_query(&self, tape: &Tape, bound: &Bound, text: &str) -> Result<QueryVars> {
        let (_, ids) = self.text.token_ids(text)?;
        let table = bound.var(self.layers.text_table);
        let words = tape.index_rows(table, &ids)?;
        let n = ids.len();
        let avg = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64))?;
        let sentence = tape.matmul(avg, words)?;
        let sentence = tape.reshape(sentence, &[self.config.dim])?;
        Ok(QueryVars { words, sentence })
    }

    /// Records the query-independent part of a frame.
    pub fn frame_context(
        &self,
        tape: &Tape,
        bound: &Bound,
        visual: &Tensor,
        proposals: &[Proposal],
    ) -> Result<FrameContext> {
        let d = self.config.dim;
        let (h, w) = match *visual.shape() {
            [h, w, c] if c == d => (h, w),
            ref s => {
                return Err(Error::shape(
                    "frame_context",
                    format!("visual map {s:?} for d = {d}"),
                ))
            }
        };
        let fv = tape.constant(visual.reshape(&[h * w, d])?)?;
        let first = match self.layers.fusion.first() {
            Some(layer) => layer.project_visual(tape, bound, fv)?,
            None => layers::VisualProjections {
                q: fv,
                k: fv,
                v: fv,
            },
        };
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let positional = pos_embed_rows(&boxes, d)?;
        let captions = if self.config.esi && !proposals.is_empty() {
            Some(self.caption_context(tape, bound, proposals)?)
        } else {
            None
        };
        Ok(FrameContext {
            height: h,
            width: w,
            visual: fv,
            first_layer: first,
            boxes,
            positional,
            captions,
        })
    }

    fn caption_context(
        &self,
        tape: &Tape,
        bound: &Bound,
        proposals: &[Proposal],
    ) -> Result<CaptionContext> {
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(proposals.len());
        for p in proposals {
            let (_, t) = self.text.token_ids(&p.caption)?;
            spans.push((ids.len(), t.len()));
            ids.extend(t);
        }
        let table = bound.var(self.layers.text_table);
        let words = tape.index_rows(table, &ids)?;
        let mut avg = vec![0.0; proposals.len() * ids.len()];
        for (i, &(s, l)) in spans.iter().enumerate() {
            for j in s..s + l {
                avg[i * ids.len() + j] = 1.0 / l as f64;
            }
        }
        let avg = tape.constant(Tensor::new(vec![proposals.len(), ids.len()], avg)?)?;
        let sentences = tape.matmul(avg, words)?;
        let lf = &self.layers.caption_filter;
        let la = &self.layers.caption_aggregate;
        Ok(CaptionContext {
            filter_q: lf.q.forward(tape, bound, words)?,
            agg_q: la.q.forward(tape, bound, sentences)?,
            agg_k: la.k.forward(tape, bound, words)?,
            words,
            spans,
            sentences,
        })
    }

    /// Grounded visual features `[H*W, d]` and words `[L, d]` after all
    /// fusion layers.
    pub fn fuse(
        &self,
        tape: &Tape,
        bound: &Bound,
        ctx: &FrameContext,
        q: &QueryVars,
    ) -> Result<(Var, Var)> {
        let (mut fv, mut rw) = (ctx.visual, q.words);
        for (i, layer) in self.layers.fusion.iter().enumerate() {
            (fv, rw) = if i == 0 {
                layer.forward_projected(tape, bound, fv, rw, &ctx.first_layer)?
            } else {
                layer.forward(tape, bound, fv, rw)?
            };
        }
        Ok((fv, rw))
    }

    /// Scores the proposals listed in `subset` (all when `None`) against
    /// one query. Scores of a proposal do not depend on which others are
    /// evaluated alongside it.
    pub fn score_query(
        &self,
        tape: &Tape,
        bound: &Bound,
        ctx: &FrameContext,
        query: &QueryVars,
        subset: Option<&[usize]>,
    ) -> Result<QueryScores> {
        let d = self.config.dim;
        let indices: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..ctx.len()).collect(),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= ctx.len()) {
            return Err(Error::shape(
                "score_query",
                format!("proposal {bad} out of {}", ctx.len()),
            ));
        }
        let (fv_vl, rw_vl) = self.fuse(tape, bound, ctx, query)?;
        let referring = refer_aggregate(
            tape,
            bound,
            &self.layers.refer,
            query.sentence,
            query.words,
            rw_vl,
        )?;
        if indices.is_empty() {
            let empty = tape.constant(Tensor::zeros(&[0]))?;
            let holistic = tape.constant(Tensor::zeros(&[0, d]))?;
            return Ok(QueryScores {
                scores: empty,
                holistic,
                referring,
                indices,
            });
        }

        let map = tape.reshape(fv_vl, &[ctx.height, ctx.width, d])?;
        let levels = self.layers.pyramid.forward(tape, bound, map)?;
        let values = self.layers.deform.value_maps(tape, bound, &levels)?;
        let boxes: Vec<BBox> = indices.iter().map(|&i| ctx.boxes[i]).collect();
        let (ov, _) = self
            .layers
            .deform
            .forward(tape, bound, &levels, &values, &boxes)?;

        let oc = match &ctx.captions {
            Some(c) => Some(self.caption_stream(tape, bound, c, query.words, rw_vl, &indices)?),
            None => None,
        };
        let mut pos = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            pos.extend_from_slice(ctx.positional.row(i));
        }
        let op = tape.constant(Tensor::new(vec![indices.len(), d], pos)?)?;
        let holistic = holistic_project(tape, bound, &self.layers.fuse, ov, oc, op)?;
        let scores = tape.cosine_rows(holistic, referring)?;
        Ok(QueryScores {
            scores,
            holistic,
            referring,
            indices,
        })
    }

    /// Caption descriptors `[n, d]` for the selected proposals.
    fn caption_stream(
        &self,
        tape: &Tape,
        bound: &Bound,
        c: &CaptionContext,
        rw: Var,
        rw_vl: Var,
        indices: &[usize],
    ) -> Result<Var> {
        let lf = &self.layers.caption_filter;
        let la = &self.layers.caption_aggregate;
        let mut rows = Vec::new();
        let mut local = Vec::with_capacity(indices.len());
        for &i in indices {
            let (s, l) = c.spans[i];
            local.push((rows.len(), l));
            rows.extend(s..s + l);
        }
        // Filtering: every selected caption token attends over the words.
        let fk = lf.k.forward(tape, bound, rw)?;
        let fv = lf.v.forward(tape, bound, rw_vl)?;
        let q = tape.index_rows(c.filter_q, &rows)?;
        let (upd, _) = lf.attend_projected(tape, bound, q, fk, fv)?;
        let cw = tape.index_rows(c.words, &rows)?;
        let cw_vl = tape.add(cw, upd)?;

        // Aggregation: each sentence attends over its own tokens.
        let av = la.v.forward(tape, bound, cw_vl)?;
        let mut ctxs = Vec::with_capacity(indices.len());
        for (j, &i) in indices.iter().enumerate() {
            let (s, l) = c.spans[i];
            let (ls, _) = local[j];
            let q = tape.index_rows(c.agg_q, &[i])?;
            let k = tape.index_rows(c.agg_k, &(s..s + l).collect::<Vec<_>>())?;
            let v = tape.index_rows(av, &(ls..ls + l).collect::<Vec<_>>())?;
            ctxs.push(la.attend_heads(tape, q, k, v)?.0);
        }
        let ctx = tape.concat(&ctxs)?;
        let upd = la.out.forward(tape, bound, ctx)?;
        let sent = tape.index_rows(c.sentences, indices)?;
        tape.add(sent, upd)
    }

    /// Cosine scores of every proposal for one expression, without
    /// recording gradients.
    pub fn score_frame(
        &self,
        visual: &Tensor,
        proposals: &[Proposal],
        text: &str,
        precision: Precision,
    ) -> Result<Vec<f64>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new(precision);
        let bound = self.params.bind_frozen(&tape)?;
        let ctx = self.frame_context(&tape, &bound, visual, proposals)?;
        let q = self.encode_query(&tape, &bound, text)?;
        let out = self.score_query(&tape, &bound, &ctx, &q, None)?;
        Ok(tape.value(out.scores).into_data())
    }
}

#[cfg(test)]
mod tests;
