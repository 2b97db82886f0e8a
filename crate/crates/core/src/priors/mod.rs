//! Observation priors supplied as data: proposals with captions, synthetic
//! scene generation with a detector/captioner noise model, and rule-based
//! counterfactual expressions.

pub mod counterfactual;
pub mod dataset;
pub mod generate;
pub mod grammar;
pub mod ingest;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::matching::BBox;

pub use counterfactual::{load_counterfactuals, perturb_expression, CounterfactualQuery};
pub use dataset::{Dataset, Expression, Sequence, ValidationIssue, ValidationReport};
pub use generate::{generate_scene, generate_sequence, NoiseParams, SequenceParams};
pub use grammar::{AttributeGrammar, Attributes};
pub use ingest::{ingest_proposals, RawDetection, RawFrame};

/// Default image size used when converting pixel coordinates.
pub const IMAGE_WIDTH: u32 = 1242;
pub const IMAGE_HEIGHT: u32 = 375;

/// A prior observation: box plus descriptive caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub caption: String,
    pub detector_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub object_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub attributes: Attributes,
}

/// One annotated frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub sequence_id: String,
    pub frame_id: u32,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    pub proposals: Vec<Proposal>,
    pub gt_objects: Vec<GtObject>,
    /// expression id -> object ids referred to in this frame.
    #[serde(default)]
    pub positives: BTreeMap<String, Vec<u64>>,
}

fn default_width() -> u32 {
    IMAGE_WIDTH
}

fn default_height() -> u32 {
    IMAGE_HEIGHT
}

impl SceneRecord {
    pub fn gt_object(&self, id: u64) -> Option<&GtObject> {
        self.gt_objects.iter().find(|o| o.object_id == id)
    }

    pub fn positives_for(&self, expression_id: &str) -> &[u64] {
        self.positives
            .get(expression_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// True when every slot realized by `query` has the same value in `attrs`.
pub fn attributes_match(attrs: &Attributes, query: &Attributes) -> bool {
    query.iter().all(|(k, v)| attrs.get(k) == Some(v))
}
