use serde::{Deserialize, Serialize};

use super::Proposal;
use crate::error::{Error, Result};
use crate::matching::BBox;

/// Raw detector output for one frame. When image dimensions are present the
/// boxes are pixel corners and are normalized on ingestion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawFrame {
    #[serde(default)]
    pub image_width: Option<f64>,
    #[serde(default)]
    pub image_height: Option<f64>,
    #[serde(default)]
    pub detections: Vec<RawDetection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    /// `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
    pub caption: String,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

const EDGE_TOL: f64 = 1e-9;

pub fn ingest_proposals(raw: &RawFrame) -> Result<Vec<Proposal>> {
    let (sx, sy) = match (raw.image_width, raw.image_height) {
        (Some(w), Some(h)) if w > 0.0 && h > 0.0 => (w, h),
        (None, None) => (1.0, 1.0),
        _ => {
            return Err(Error::Invalid(
                "image_width and image_height must both be positive".into(),
            ))
        }
    };
    raw.detections
        .iter()
        .enumerate()
        .map(|(index, d)| {
            let [x1, y1, x2, y2] = d.bbox;
            let reject = |msg: String| Error::Record { index, msg };
            if d.bbox.iter().any(|v| !v.is_finite()) {
                return Err(reject("non-finite coordinate".into()));
            }
            if x2 < x1 || y2 < y1 {
                return Err(reject(format!("negative width or height in {:?}", d.bbox)));
            }
            let (nx1, ny1, nx2, ny2) = (x1 / sx, y1 / sy, x2 / sx, y2 / sy);
            if [nx1, ny1, nx2, ny2]
                .iter()
                .any(|v| *v < -EDGE_TOL || *v > 1.0 + EDGE_TOL)
            {
                return Err(reject(format!("box {:?} falls outside the image", d.bbox)));
            }
            if d.caption.trim().is_empty() {
                return Err(reject("empty caption".into()));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(reject(format!("detector score {} outside [0, 1]", d.score)));
            }
            Ok(Proposal {
                bbox: BBox::from_corners(nx1, ny1, nx2, ny2),
                caption: d.caption.clone(),
                detector_score: d.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: [f64; 4]) -> RawDetection {
        RawDetection {
            bbox: b,
            caption: "a car".into(),
            score: 0.9,
        }
    }

    #[test]
    fn empty_record() {
        assert!(ingest_proposals(&RawFrame::default()).unwrap().is_empty());
    }

    #[test]
    fn pixel_normalization() {
        let raw = RawFrame {
            image_width: Some(1242.0),
            image_height: Some(375.0),
            detections: vec![det([100.0, 50.0, 200.0, 150.0])],
        };
        let p = ingest_proposals(&raw).unwrap();
        let b = p[0].bbox;
        assert!((b.cx - 150.0 / 1242.0).abs() < 1e-12);
        assert!((b.cx - 0.1207).abs() < 1e-4);
        assert!((b.cy - 100.0 / 375.0).abs() < 1e-12);
        assert!((b.w - 100.0 / 1242.0).abs() < 1e-12);
        assert!((b.h - 100.0 / 375.0).abs() < 1e-12);
    }

    #[test]
    fn negative_width_names_index() {
        let raw = RawFrame {
            image_width: None,
            image_height: None,
            detections: vec![det([0.1, 0.1, 0.2, 0.2]), det([0.5, 0.1, 0.4, 0.2])],
        };
        match ingest_proposals(&raw) {
            Err(Error::Record { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_image_rejected() {
        let raw = RawFrame {
            image_width: Some(100.0),
            image_height: Some(100.0),
            detections: vec![det([10.0, 10.0, 120.0, 20.0])],
        };
        assert!(ingest_proposals(&raw).is_err());
    }
}
