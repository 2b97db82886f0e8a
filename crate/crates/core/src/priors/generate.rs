use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::counterfactual::perturb_expression;
use super::dataset::{Expression, Sequence};
use super::grammar::{placeholders, render, AttributeGrammar, Attributes};
use super::{attributes_match, GtObject, Proposal, SceneRecord, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::error::{Error, Result};
use crate::matching::BBox;

const GRID_ROWS: usize = 3;
const GRID_COLS: usize = 8;
/// Number of non-overlapping placement slots.
pub const GRID_CAPACITY: usize = GRID_ROWS * GRID_COLS;

/// Detector/captioner noise model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub n_objects: usize,
    /// Probability that a caption hallucinates one attribute.
    pub caption_error_rate: f64,
    /// Box jitter std as a fraction of box size.
    pub box_jitter: f64,
    /// Probability, per ground-truth object, of an extra spurious proposal.
    pub spurious_rate: f64,
    /// Probability that a ground-truth object gets no proposal.
    pub miss_rate: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            n_objects: 4,
            caption_error_rate: 0.0,
            box_jitter: 0.0,
            spurious_rate: 0.0,
            miss_rate: 0.0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("caption_error_rate", self.caption_error_rate),
            ("box_jitter", self.box_jitter),
            ("spurious_rate", self.spurious_rate),
            ("miss_rate", self.miss_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.n_objects > GRID_CAPACITY {
            return Err(Error::Invalid(format!(
                "{} objects exceed the placement grid capacity of {GRID_CAPACITY}",
                self.n_objects
            )));
        }
        Ok(())
    }
}

fn location_of(cx: f64) -> &'static str {
    if cx < 1.0 / 3.0 {
        "left"
    } else if cx > 2.0 / 3.0 {
        "right"
    } else {
        "center"
    }
}

fn pick<'a, R: Rng>(values: &'a [String], rng: &mut R) -> &'a String {
    &values[rng.gen_range(0..values.len())]
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn clamp_box(b: BBox) -> BBox {
    let x1 = b.x1().clamp(0.0, 1.0);
    let x2 = b.x2().clamp(0.0, 1.0);
    let y1 = b.y1().clamp(0.0, 1.0);
    let y2 = b.y2().clamp(0.0, 1.0);
    BBox::from_corners(x1, y1, x2.max(x1), y2.max(y1))
}

struct Placed {
    bbox: BBox,
    attrs: Attributes,
}

fn place_objects<R: Rng>(grammar: &AttributeGrammar, n: usize, rng: &mut R) -> Vec<Placed> {
    let mut slots: Vec<usize> = (0..GRID_CAPACITY).collect();
    slots.shuffle(rng);
    slots.truncate(n);
    slots
        .into_iter()
        .map(|s| {
            let (r, c) = (s / GRID_COLS, s % GRID_COLS);
            let cx = (c as f64 + 0.5) / GRID_COLS as f64 + rng.gen_range(-0.01..0.01);
            let cy = (r as f64 + 0.5) / GRID_ROWS as f64 + rng.gen_range(-0.02..0.02);
            let bbox = BBox::new(cx, cy, rng.gen_range(0.05..0.10), rng.gen_range(0.12..0.25));
            let mut attrs = Attributes::new();
            for slot in &grammar.slots {
                let v = if slot == "location" {
                    location_of(cx).to_string()
                } else {
                    pick(grammar.values(slot), rng).clone()
                };
                attrs.insert(slot.clone(), v);
            }
            Placed { bbox, attrs }
        })
        .collect()
}

/// Proposals for one frame under the noise model: jittered ground-truth
/// boxes (minus misses) followed by spurious detections.
pub fn observe<R: Rng>(
    grammar: &AttributeGrammar,
    objects: &[GtObject],
    params: &NoiseParams,
    rng: &mut R,
) -> Result<Vec<Proposal>> {
    params.validate()?;
    let mut proposals = Vec::with_capacity(objects.len());
    for obj in objects {
        if rng.gen::<f64>() < params.miss_rate {
            continue;
        }
        let b = obj.bbox;
        let j = params.box_jitter;
        let bbox = if j > 0.0 {
            clamp_box(BBox::new(
                b.cx + j * b.w * normal(rng),
                b.cy + j * b.h * normal(rng),
                (b.w * (1.0 + j * normal(rng))).max(1e-3),
                (b.h * (1.0 + j * normal(rng))).max(1e-3),
            ))
        } else {
            b
        };
        let mut attrs = obj.attributes.clone();
        if rng.gen::<f64>() < params.caption_error_rate {
            let slot = pick(&grammar.slots, rng).clone();
            let truth = attrs[&slot].clone();
            let wrong: Vec<&String> = grammar
                .values(&slot)
                .iter()
                .filter(|v| **v != truth)
                .collect();
            attrs.insert(slot, wrong[rng.gen_range(0..wrong.len())].clone());
        }
        proposals.push(Proposal {
            bbox,
            caption: grammar.caption(&attrs)?,
            detector_score: rng.gen_range(0.5..1.0),
        });
    }
    for _ in 0..objects.len() {
        if rng.gen::<f64>() >= params.spurious_rate {
            continue;
        }
        let w = rng.gen_range(0.03..0.10);
        let h = rng.gen_range(0.08..0.25);
        let bbox = BBox::new(
            rng.gen_range(w / 2.0..1.0 - w / 2.0),
            rng.gen_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
        );
        let mut attrs = Attributes::new();
        for slot in &grammar.slots {
            attrs.insert(slot.clone(), pick(grammar.values(slot), rng).clone());
        }
        proposals.push(Proposal {
            bbox,
            caption: grammar.caption(&attrs)?,
            detector_score: rng.gen_range(0.1..0.7),
        });
    }
    Ok(proposals)
}

/// A single synthetic frame with `params.n_objects` ground-truth objects.
pub fn generate_scene<R: Rng>(
    grammar: &AttributeGrammar,
    params: &NoiseParams,
    rng: &mut R,
) -> Result<SceneRecord> {
    params.validate()?;
    grammar.validate()?;
    let gt_objects: Vec<GtObject> = place_objects(grammar, params.n_objects, rng)
        .into_iter()
        .enumerate()
        .map(|(i, p)| GtObject {
            object_id: i as u64 + 1,
            bbox: p.bbox,
            attributes: p.attrs,
        })
        .collect();
    let proposals = observe(grammar, &gt_objects, params, rng)?;
    Ok(SceneRecord {
        sequence_id: "scene".into(),
        frame_id: 0,
        width: IMAGE_WIDTH,
        height: IMAGE_HEIGHT,
        proposals,
        gt_objects,
        positives: BTreeMap::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceParams {
    pub sequence_id: String,
    pub n_frames: usize,
    pub n_expressions: usize,
    pub counterfactuals_per_expression: usize,
    pub noise: NoiseParams,
}

struct Mover {
    id: u64,
    bbox: BBox,
    vx: f64,
    vy: f64,
    turn: f64,
    attrs: Attributes,
}

impl Mover {
    fn advance(&mut self) {
        if self.turn != 0.0 {
            let (s, c) = self.turn.sin_cos();
            let (vx, vy) = (self.vx * c - self.vy * s, self.vx * s + self.vy * c);
            self.vx = vx;
            self.vy = vy;
        }
        let b = &mut self.bbox;
        b.cx += self.vx;
        b.cy += self.vy;
        if b.x1() < 0.0 || b.x2() > 1.0 {
            self.vx = -self.vx;
            b.cx = b.cx.clamp(b.w / 2.0, 1.0 - b.w / 2.0);
        }
        if b.y1() < 0.0 || b.y2() > 1.0 {
            self.vy = -self.vy;
            b.cy = b.cy.clamp(b.h / 2.0, 1.0 - b.h / 2.0);
        }
        self.attrs
            .insert("location".into(), location_of(b.cx).into());
    }
}

/// A sequence of frames with persistent, moving objects, referring
/// expressions over their attributes, and rule-generated counterfactuals.
pub fn generate_sequence<R: Rng>(
    grammar: &AttributeGrammar,
    params: &SequenceParams,
    rng: &mut R,
) -> Result<Sequence> {
    params.noise.validate()?;
    grammar.validate()?;
    let mut movers: Vec<Mover> = place_objects(grammar, params.noise.n_objects, rng)
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let motion = p
                .attrs
                .get("motion")
                .map(String::as_str)
                .unwrap_or("moving");
            let speed = rng.gen_range(0.004..0.012) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let (vx, vy, turn) = match motion {
                "parked" => (0.0, 0.0, 0.0),
                "turning" => (speed, 0.0, 0.08),
                _ => (speed, 0.0, 0.0),
            };
            Mover {
                id: i as u64 + 1,
                bbox: p.bbox,
                vx,
                vy,
                turn,
                attrs: p.attrs,
            }
        })
        .collect();

    // Expressions are written against the first frame.
    let mut expressions = BTreeMap::new();
    let mut texts: Vec<String> = Vec::new();
    if !movers.is_empty() {
        for e in 0..params.n_expressions {
            let mut chosen = None;
            for attempt in 0..32 {
                let obj = &movers[(e + attempt) % movers.len()];
                let template = pick(&grammar.templates, rng);
                let attrs: Attributes = placeholders(template)
                    .into_iter()
                    .map(|s| {
                        let v = obj.attrs[&s].clone();
                        (s, v)
                    })
                    .collect();
                let text = render(template, &attrs)?;
                let unique = !texts.contains(&text);
                if unique || attempt == 31 {
                    chosen = Some((text, attrs));
                    break;
                }
            }
            let (text, attributes) = chosen.expect("loop always chooses");
            texts.push(text.clone());
            let id = format!("{}-e{:02}", params.sequence_id, e);
            expressions.insert(
                id,
                Expression {
                    text,
                    attributes,
                    positives: BTreeMap::new(),
                },
            );
        }
    }

    let mut frames = Vec::with_capacity(params.n_frames);
    for f in 0..params.n_frames {
        if f > 0 {
            for m in &mut movers {
                m.advance();
            }
        }
        let gt_objects: Vec<GtObject> = movers
            .iter()
            .map(|m| GtObject {
                object_id: m.id,
                bbox: m.bbox,
                attributes: m.attrs.clone(),
            })
            .collect();
        let proposals = observe(grammar, &gt_objects, &params.noise, rng)?;
        let mut positives = BTreeMap::new();
        for (id, expr) in expressions.iter_mut() {
            let ids: Vec<u64> = gt_objects
                .iter()
                .filter(|o| attributes_match(&o.attributes, &expr.attributes))
                .map(|o| o.object_id)
                .collect();
            expr.positives.insert(f as u32, ids.clone());
            positives.insert(id.clone(), ids);
        }
        frames.push(SceneRecord {
            sequence_id: params.sequence_id.clone(),
            frame_id: f as u32,
            width: IMAGE_WIDTH,
            height: IMAGE_HEIGHT,
            proposals,
            gt_objects,
            positives,
        });
    }

    let mut counterfactuals = BTreeMap::new();
    for (id, expr) in &expressions {
        let mut list: Vec<super::CounterfactualQuery> = Vec::new();
        for _ in 0..params.counterfactuals_per_expression * 4 {
            if list.len() == params.counterfactuals_per_expression {
                break;
            }
            let cf = perturb_expression(id, &expr.text, &expr.attributes, grammar, rng)?;
            if !list.iter().any(|c| c.text == cf.text) {
                list.push(cf);
            }
        }
        counterfactuals.insert(id.clone(), list);
    }

    Ok(Sequence {
        id: params.sequence_id.clone(),
        frames,
        expressions,
        counterfactuals,
    })
}
