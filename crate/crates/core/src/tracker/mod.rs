//! Two-stage tracking-by-detection driven by semantic scores.

pub mod kalman;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmsi::Hmsi;
use crate::losses::to_probability;
use crate::matching::{iou, linear_assignment, BBox, CostMatrix};
use crate::priors::SceneRecord;
use crate::tensor::{Precision, Tensor};

pub use kalman::{KalmanParams, KalmanState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub tau_high: f64,
    pub tau_low: f64,
    /// Minimum score for a detection to start a track.
    pub epsilon: f64,
    /// Minimum IoU of a feasible track-detection pair.
    pub iou_gate: f64,
    pub max_lost: u32,
    /// Multiply the semantic score by the proposal's detector score.
    pub combine_detector_score: bool,
    pub kalman: KalmanParams,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau_high: 0.4,
            tau_low: 0.1,
            epsilon: 0.4,
            iou_gate: 0.3,
            max_lost: 30,
            combine_detector_score: false,
            kalman: KalmanParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Probability in `[0, 1]`.
    pub score: f64,
    pub frame_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackState {
    Tentative,
    Confirmed,
    Lost,
    Removed,
}

impl TrackState {
    /// Edges of the lifecycle graph.
    pub fn can_become(self, next: TrackState) -> bool {
        use TrackState::*;
        matches!(
            (self, next),
            (Tentative, Confirmed)
                | (Tentative, Removed)
                | (Confirmed, Lost)
                | (Lost, Confirmed)
                | (Lost, Removed)
        ) || self == next
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub state: TrackState,
    pub kalman: KalmanState,
    pub last_score: f64,
    pub age: u32,
    pub hits: u32,
    pub time_since_update: u32,
}

impl Track {
    fn set_state(&mut self, next: TrackState) {
        debug_assert!(self.state.can_become(next), "{:?} -> {next:?}", self.state);
        self.state = next;
    }
}

/// One line of tracker output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRecord {
    pub frame_id: u32,
    pub track_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// Tracks over one (sequence, expression) pair.
#[derive(Clone, Debug)]
pub struct Tracker {
    pub config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
    frames_seen: u64,
}

/// Gated maximum-IoU matching of `tracks` to `dets`, as index pairs into
/// the two slices.
pub fn match_by_iou(tracks: &[BBox], dets: &[BBox], gate: f64) -> Vec<(usize, usize)> {
    let cost = CostMatrix::from_fn(tracks.len(), dets.len(), |i, j| {
        let v = iou(&tracks[i], &dets[j]);
        (v >= gate).then_some(v)
    });
    linear_assignment(&cost, true).pairs
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            config,
            tracks: Vec::new(),
            next_id: 1,
            frames_seen: 0,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Predicts, associates and updates; returns the records of confirmed
    /// tracks updated in this frame, sorted by track id.
    pub fn step(&mut self, frame_id: u32, detections: &[Detection]) -> Vec<TrackRecord> {
        let cfg = self.config;
        let first_frame = self.frames_seen == 0;
        self.frames_seen += 1;
        for t in &mut self.tracks {
            t.kalman = t.kalman.predict(&cfg.kalman);
            t.age += 1;
        }

        let high: Vec<usize> = (0..detections.len())
            .filter(|&j| detections[j].score >= cfg.tau_high)
            .collect();
        let low: Vec<usize> = (0..detections.len())
            .filter(|&j| detections[j].score >= cfg.tau_low && detections[j].score < cfg.tau_high)
            .collect();
        let mut det_used = vec![false; detections.len()];
        let mut track_hit = vec![false; self.tracks.len()];

        let pool = |states: &[TrackState], hit: &[bool], tracks: &[Track]| -> Vec<usize> {
            (0..tracks.len())
                .filter(|&i| !hit[i] && states.contains(&tracks[i].state))
                .collect()
        };
        let stages: [(&[TrackState], &[usize]); 3] = [
            (&[TrackState::Confirmed, TrackState::Lost], &high),
            (&[TrackState::Tentative], &high),
            (&[TrackState::Confirmed, TrackState::Lost], &low),
        ];
        for (states, dets) in stages {
            let ti = pool(states, &track_hit, &self.tracks);
            let di: Vec<usize> = dets.iter().copied().filter(|&j| !det_used[j]).collect();
            let tb: Vec<BBox> = ti.iter().map(|&i| self.tracks[i].kalman.bbox()).collect();
            let db: Vec<BBox> = di.iter().map(|&j| detections[j].bbox).collect();
            for (a, b) in match_by_iou(&tb, &db, cfg.iou_gate) {
                let (i, j) = (ti[a], di[b]);
                track_hit[i] = true;
                det_used[j] = true;
                let t = &mut self.tracks[i];
                t.kalman = t.kalman.update(&detections[j].bbox, &cfg.kalman);
                t.last_score = detections[j].score;
                t.hits += 1;
                t.time_since_update = 0;
                if t.state != TrackState::Confirmed {
                    t.set_state(TrackState::Confirmed);
                }
            }
        }

        for (i, t) in self.tracks.iter_mut().enumerate() {
            if track_hit[i] {
                continue;
            }
            t.time_since_update += 1;
            match t.state {
                TrackState::Tentative => t.set_state(TrackState::Removed),
                TrackState::Confirmed => t.set_state(TrackState::Lost),
                TrackState::Lost if t.time_since_update > cfg.max_lost => {
                    t.set_state(TrackState::Removed)
                }
                _ => {}
            }
        }
        self.tracks.retain(|t| t.state != TrackState::Removed);

        for &j in &high {
            if det_used[j] || detections[j].score < cfg.epsilon {
                continue;
            }
            let state = if first_frame {
                TrackState::Confirmed
            } else {
                TrackState::Tentative
            };
            self.tracks.push(Track {
                track_id: self.next_id,
                state,
                kalman: KalmanState::initiate(&detections[j].bbox, &cfg.kalman),
                last_score: detections[j].score,
                age: 1,
                hits: 1,
                time_since_update: 0,
            });
            self.next_id += 1;
        }

        let mut out: Vec<TrackRecord> = self
            .tracks
            .iter()
            .filter(|t| t.state == TrackState::Confirmed && t.time_since_update == 0)
            .map(|t| TrackRecord {
                frame_id,
                track_id: t.track_id,
                bbox: t.kalman.bbox(),
                score: t.last_score,
            })
            .collect();
        out.sort_by_key(|r| r.track_id);
        out
    }
}

/// Semantic probabilities of every proposal for one expression.
pub fn score_frame(
    model: &Hmsi,
    visual: &Tensor,
    frame: &SceneRecord,
    expression: &str,
    config: &TrackerConfig,
    precision: Precision,
) -> Result<Vec<Detection>> {
    let scores = model.score_frame(visual, &frame.proposals, expression, precision)?;
    Ok(frame
        .proposals
        .iter()
        .zip(scores)
        .map(|(p, s)| {
            let mut score = to_probability(s).clamp(0.0, 1.0);
            if config.combine_detector_score {
                score *= p.detector_score;
            }
            Detection {
                bbox: p.bbox,
                score,
                frame_id: frame.frame_id,
            }
        })
        .collect())
}

/// Tracks one expression through the frames in order.
pub fn run_sequence(
    model: &Hmsi,
    frames: &[SceneRecord],
    expression: &str,
    config: &TrackerConfig,
    precision: Precision,
) -> Result<Vec<TrackRecord>> {
    let mut tracker = Tracker::new(*config);
    let mut out = Vec::new();
    for f in frames {
        let visual = model.encode_frame(f)?;
        let dets = score_frame(model, &visual, f, expression, config, precision)?;
        out.extend(tracker.step(f.frame_id, &dets));
    }
    Ok(out)
}

/// `frame,track_id,x,y,w,h,score,-1,-1,-1` lines sorted by frame, then id.
pub fn format_records(records: &[TrackRecord]) -> String {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.frame_id, r.track_id));
    let mut s = String::new();
    for r in sorted {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},-1,-1,-1",
            r.frame_id,
            r.track_id,
            r.bbox.x1(),
            r.bbox.y1(),
            r.bbox.w,
            r.bbox.h,
            r.score
        )
        .expect("writing to a string");
    }
    s
}

/// Parses [`format_records`] output. Blank lines are skipped.
pub fn parse_records(text: &str) -> Result<Vec<TrackRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Record {
            index: i,
            msg: format!("{msg}: `{line}`"),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() < 7 {
            return Err(bad("expected at least 7 comma-separated fields"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad("malformed number"));
        let (x, y, w, h, score) = (num(2)?, num(3)?, num(4)?, num(5)?, num(6)?);
        if ![x, y, w, h, score].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(bad("invalid box"));
        }
        out.push(TrackRecord {
            frame_id: f[0].parse().map_err(|_| bad("malformed frame"))?,
            track_id: f[1].parse().map_err(|_| bad("malformed track id"))?,
            bbox: BBox::from_tlwh(x, y, w, h),
            score,
        });
    }
    Ok(out)
}
