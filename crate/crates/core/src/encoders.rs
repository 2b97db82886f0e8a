//! Frozen feature providers: a synthetic visual map rasterized from scene
//! annotations, a seeded word-embedding table, and a loader for features
//! exported offline into a tensor container.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::grammar::{tokenize, AttributeGrammar};
use crate::priors::SceneRecord;
use crate::tensor::container::TensorFile;
use crate::tensor::{Precision, Tensor};

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// 64-bit FNV-1a, used to derive per-frame noise streams from string ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("sized by construction")
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// `[H, W, d]`.
    pub features: Tensor,
}

impl VisualFeatureMap {
    pub fn from_tensor(features: Tensor) -> Result<Self> {
        match *features.shape() {
            [height, width, dim] => Ok(Self {
                height,
                width,
                dim,
                features,
            }),
            ref s => Err(Error::shape(
                "visual_map",
                format!("expected [H, W, d], got {s:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// `[L, d]`.
    pub words: Tensor,
    /// `[d]`, mean of the word rows.
    pub sentence: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    #[default]
    Synthetic,
    Precomputed,
}

/// Where visual features come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureProvider {
    pub mode: FeatureMode,
    pub source: Option<PathBuf>,
}

/// Rasterizes annotated objects into a `[H, W, d]` map. Each object's
/// attribute one-hot vector is projected by a fixed seeded matrix and
/// painted into every cell whose center lies inside its box, later objects
/// over earlier ones; seeded Gaussian noise is added on top.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVisual {
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// `[attribute_dim, d]`.
    pub projection: Tensor,
    grammar: AttributeGrammar,
}

impl SyntheticVisual {
    pub fn new(
        grammar: &AttributeGrammar,
        dim: usize,
        height: usize,
        width: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(b"visual-projection"));
        let a = grammar.attribute_dim();
        let projection = gaussian_matrix(
            a,
            dim,
            1.0 / (grammar.slots.len().max(1) as f64).sqrt(),
            &mut rng,
        );
        Self {
            height,
            width,
            noise_sigma,
            seed,
            projection,
            grammar: grammar.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.shape()[1]
    }

    /// Projected attribute vector of one object.
    pub fn object_vector(&self, attrs: &crate::priors::Attributes) -> Vec<f64> {
        let one_hot = self.grammar.one_hot(attrs);
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (i, &v) in one_hot.iter().enumerate() {
            if v != 0.0 {
                for (o, p) in out.iter_mut().zip(self.projection.row(i)) {
                    *o += v * p;
                }
            }
        }
        out
    }

    /// Map before noise.
    pub fn render_clean(&self, frame: &SceneRecord) -> Tensor {
        let (h, w, d) = (self.height, self.width, self.dim());
        let mut data = vec![0.0; h * w * d];
        for obj in &frame.gt_objects {
            let v = self.object_vector(&obj.attributes);
            for r in 0..h {
                let y = (r as f64 + 0.5) / h as f64;
                for c in 0..w {
                    let x = (c as f64 + 0.5) / w as f64;
                    if obj.bbox.contains_point(x, y) {
                        data[(r * w + c) * d..(r * w + c + 1) * d].copy_from_slice(&v);
                    }
                }
            }
        }
        Tensor::new(vec![h, w, d], data).expect("sized by construction")
    }

    pub fn encode_frame(&self, frame: &SceneRecord) -> Result<VisualFeatureMap> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("visual map must have positive size".into()));
        }
        let mut map = self.render_clean(frame);
        if self.noise_sigma > 0.0 {
            let stream = fnv1a(frame.sequence_id.as_bytes())
                ^ (frame.frame_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream);
            for v in map.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += self.noise_sigma * n;
            }
        }
        VisualFeatureMap::from_tensor(map)
    }
}

/// Seeded word-embedding table over the grammar's tokens plus one unknown row.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub vocab: Vec<String>,
    /// `[vocab.len() + 1, d]`; the last row embeds unknown tokens.
    pub table: Tensor,
}

impl TextEncoder {
    pub fn new(grammar: &AttributeGrammar, dim: usize, seed: u64) -> Self {
        let vocab: Vec<String> = grammar
            .tokens()
            .into_iter()
            .map(|t| t.to_lowercase())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(b"text-table"));
        let table = gaussian_matrix(vocab.len() + 1, dim, 1.0, &mut rng);
        Self { vocab, table }
    }

    pub fn with_table(vocab: Vec<String>, table: Tensor) -> Result<Self> {
        if table.rank() != 2 || table.shape()[0] != vocab.len() + 1 {
            return Err(Error::shape(
                "text_table",
                format!("{:?} for {} tokens", table.shape(), vocab.len()),
            ));
        }
        Ok(Self { vocab, table })
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn unknown_id(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_ids(&self, text: &str) -> Result<(Vec<String>, Vec<usize>)> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Invalid("cannot encode empty text".into()));
        }
        let ids = tokens
            .iter()
            .map(|t| {
                self.vocab
                    .iter()
                    .position(|v| v == t)
                    .unwrap_or(self.unknown_id())
            })
            .collect();
        Ok((tokens, ids))
    }

    pub fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        let (tokens, ids) = self.token_ids(text)?;
        let d = self.dim();
        let mut words = Vec::with_capacity(ids.len() * d);
        let mut sentence = vec![0.0; d];
        for &id in &ids {
            let row = self.table.row(id);
            words.extend_from_slice(row);
            for (s, v) in sentence.iter_mut().zip(row) {
                *s += v;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        sentence.iter_mut().for_each(|s| *s *= inv);
        Ok(TextEmbedding {
            words: Tensor::new(vec![ids.len(), d], words)?,
            sentence: Tensor::vector(sentence),
            tokens,
            ids,
        })
    }
}

/// Key under which a frame's precomputed visual map is stored.
pub fn visual_key(sequence_id: &str, frame_id: u32) -> String {
    format!("{sequence_id}/{frame_id}/visual")
}

/// Reads one stored tensor, checking its dtype and trailing dimension.
pub fn load_precomputed(
    file: &TensorFile,
    key: &str,
    dim: usize,
    dtype: Option<Precision>,
) -> Result<Tensor> {
    let entry = file.entry(key)?;
    if let Some(want) = dtype {
        if entry.dtype != want {
            return Err(Error::Format(format!(
                "`{key}` stored as {:?}, expected {want:?}",
                entry.dtype
            )));
        }
    }
    if entry.tensor.shape().last() != Some(&dim) {
        return Err(Error::shape(
            "load_precomputed",
            format!(
                "`{key}` has shape {:?}, model d = {dim}",
                entry.tensor.shape()
            ),
        ));
    }
    Ok(entry.tensor.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::BBox;
    use crate::priors::{Attributes, GtObject};
    use std::collections::BTreeMap;

    fn frame(objects: Vec<GtObject>) -> SceneRecord {
        SceneRecord {
            sequence_id: "s".into(),
            frame_id: 3,
            width: 1242,
            height: 375,
            proposals: vec![],
            gt_objects: objects,
            positives: BTreeMap::new(),
        }
    }

    fn attrs() -> Attributes {
        [
            ("category", "car"),
            ("color", "red"),
            ("location", "left"),
            ("motion", "parked"),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
    }

    #[test]
    fn empty_noiseless_scene_is_zero() {
        let v = SyntheticVisual::new(&AttributeGrammar::default(), 8, 6, 10, 0.0, 1);
        let m = v.encode_frame(&frame(vec![])).unwrap();
        assert_eq!(m.features.shape(), &[6, 10, 8]);
        assert_eq!(m.features.max_abs(), 0.0);
    }

    #[test]
    fn rasterization_matches_cell_oracle() {
        let g = AttributeGrammar::default();
        let (h, w, d) = (8, 10, 6);
        let v = SyntheticVisual::new(&g, d, h, w, 0.0, 7);
        // Rows 2..=4 and columns 3..=6 have their centers inside this box.
        let bbox = BBox::from_corners(0.3, 0.25, 0.7, 0.625);
        let m = v
            .encode_frame(&frame(vec![GtObject {
                object_id: 1,
                bbox,
                attributes: attrs(),
            }]))
            .unwrap();
        let one_hot = g.one_hot(&attrs());
        let mut expected = vec![0.0; d];
        for (i, &x) in one_hot.iter().enumerate() {
            for j in 0..d {
                expected[j] += x * v.projection.data()[i * d + j];
            }
        }
        for r in 0..h {
            for c in 0..w {
                let cell = &m.features.data()[(r * w + c) * d..(r * w + c + 1) * d];
                if (2..=4).contains(&r) && (3..=6).contains(&c) {
                    for (a, b) in cell.iter().zip(&expected) {
                        assert!((a - b).abs() < 1e-12);
                    }
                } else {
                    assert!(cell.iter().all(|&x| x == 0.0), "cell {r},{c}");
                }
            }
        }
    }

    #[test]
    fn noisy_maps_are_deterministic() {
        let g = AttributeGrammar::default();
        let v = SyntheticVisual::new(&g, 8, 8, 8, 0.3, 42);
        let f = frame(vec![GtObject {
            object_id: 1,
            bbox: BBox::new(0.5, 0.5, 0.3, 0.3),
            attributes: attrs(),
        }]);
        assert_eq!(v.encode_frame(&f).unwrap(), v.encode_frame(&f).unwrap());
        let mut other = f.clone();
        other.frame_id = 4;
        assert_ne!(v.encode_frame(&f).unwrap(), v.encode_frame(&other).unwrap());
    }

    #[test]
    fn text_pooling() {
        let t = TextEncoder::new(&AttributeGrammar::default(), 8, 3);
        let one = t.encode_text("car").unwrap();
        assert_eq!(one.words.data(), one.sentence.data());
        let a = t.encode_text("red car").unwrap();
        let b = t.encode_text("car red").unwrap();
        assert_ne!(a.words, b.words);
        for (x, y) in a.sentence.data().iter().zip(b.sentence.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let red = t.vocab.iter().position(|v| v == "red").unwrap();
        let car = t.vocab.iter().position(|v| v == "car").unwrap();
        for j in 0..8 {
            let want = (t.table.row(red)[j] + t.table.row(car)[j]) / 2.0;
            assert!((a.sentence.data()[j] - want).abs() < 1e-6);
        }
        assert_eq!(t.encode_text("Zebra").unwrap().ids, vec![t.unknown_id()]);
        assert!(t.encode_text("   ").is_err());
    }

    #[test]
    fn precomputed_loader_contract() {
        let mut file = TensorFile::new();
        for k in ["a/0/visual", "a/1/visual", "b/0/visual"] {
            file.insert(k, Precision::F32, Tensor::full(&[2, 2, 4], 0.5));
        }
        let file = TensorFile::from_bytes(&file.to_bytes()).unwrap();
        assert_eq!(
            file.keys().collect::<Vec<_>>(),
            vec!["a/0/visual", "a/1/visual", "b/0/visual"]
        );
        assert_eq!(
            load_precomputed(&file, "a/1/visual", 4, Some(Precision::F32)).unwrap(),
            Tensor::full(&[2, 2, 4], 0.5)
        );
        match load_precomputed(&file, "c/0/visual", 4, None) {
            Err(Error::NotFound(k)) => assert!(k.contains("c/0/visual")),
            other => panic!("{other:?}"),
        }
        assert!(load_precomputed(&file, "a/0/visual", 8, None).is_err());
        assert!(load_precomputed(&file, "a/0/visual", 4, Some(Precision::F64)).is_err());
    }
}
