//! HOTA and its decomposition over expression-conditioned sequences.
//!
//! Frames are matched independently at every localization threshold α of
//! the 19-point grid; association is scored from how consistently each
//! ground-truth id pairs with each predicted id across the sequence.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{iou, linear_assignment, BBox, CostMatrix};
use crate::parallel::map_ordered;
use crate::priors::{Dataset, Sequence};
use crate::tracker::parse_records;

pub use report::{BenchmarkReport, ExpressionResult, REPORT_COLUMNS, REPORT_NOTE};

/// Number of localization thresholds.
pub const N_ALPHAS: usize = 19;

/// `{0.05, 0.10, …, 0.95}`.
pub fn alphas() -> [f64; N_ALPHAS] {
    std::array::from_fn(|i| (i + 1) as f64 * 0.05)
}

/// Ids and boxes of one frame.
pub type FrameObjects = Vec<(u64, BBox)>;

/// Result of matching one frame at one α. Indices refer to the input
/// slices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatch {
    /// `(gt index, pred index, iou)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

fn check_unique(objects: &[(u64, BBox)], what: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (id, _) in objects {
        if !seen.insert(*id) {
            return Err(Error::Invalid(format!("duplicate {what} id {id} in one frame")));
        }
    }
    Ok(())
}

/// Maximum-cardinality, then maximum-IoU, matching among pairs with
/// IoU ≥ `alpha`.
pub fn match_frame(gt: &[(u64, BBox)], pred: &[(u64, BBox)], alpha: f64) -> Result<FrameMatch> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    check_unique(gt, "ground-truth")?;
    check_unique(pred, "predicted")?;
    let cost = CostMatrix::from_fn(gt.len(), pred.len(), |i, j| {
        let v = iou(&gt[i].1, &pred[j].1);
        (v >= alpha).then_some(v)
    });
    let a = linear_assignment(&cost, true);
    Ok(FrameMatch {
        pairs: a
            .pairs
            .iter()
            .map(|&(i, j)| (i, j, iou(&gt[i].1, &pred[j].1)))
            .collect(),
        false_positives: a.unmatched_cols,
        false_negatives: a.unmatched_rows,
    })
}

/// All components at one α.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    pub alpha: f64,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub detre: f64,
    pub detpr: f64,
    pub assre: f64,
    pub asspr: f64,
    pub loca: f64,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HotaResult {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub detre: f64,
    pub detpr: f64,
    pub assre: f64,
    pub asspr: f64,
    pub loca: f64,
    pub per_alpha: Vec<AlphaResult>,
}

impl HotaResult {
    /// The eight headline metrics in report order.
    pub fn columns(&self) -> [f64; 8] {
        [
            self.hota, self.deta, self.assa, self.detre, self.detpr, self.assre, self.asspr,
            self.loca,
        ]
    }

    /// Field-wise mean, including the per-α table. `None` for no input.
    pub fn mean(results: &[HotaResult]) -> Option<HotaResult> {
        let n = results.len();
        if n == 0 {
            return None;
        }
        let avg = |f: &dyn Fn(&HotaResult) -> f64| results.iter().map(f).sum::<f64>() / n as f64;
        let per_alpha = (0..N_ALPHAS)
            .map(|k| {
                let a = |f: &dyn Fn(&AlphaResult) -> f64| {
                    results.iter().map(|r| f(&r.per_alpha[k])).sum::<f64>() / n as f64
                };
                let s = |f: &dyn Fn(&AlphaResult) -> u64| results.iter().map(|r| f(&r.per_alpha[k])).sum();
                AlphaResult {
                    alpha: alphas()[k],
                    hota: a(&|r| r.hota),
                    deta: a(&|r| r.deta),
                    assa: a(&|r| r.assa),
                    detre: a(&|r| r.detre),
                    detpr: a(&|r| r.detpr),
                    assre: a(&|r| r.assre),
                    asspr: a(&|r| r.asspr),
                    loca: a(&|r| r.loca),
                    tp: s(&|r| r.tp),
                    fn_: s(&|r| r.fn_),
                    fp: s(&|r| r.fp),
                }
            })
            .collect();
        Some(HotaResult {
            hota: avg(&|r| r.hota),
            deta: avg(&|r| r.deta),
            assa: avg(&|r| r.assa),
            detre: avg(&|r| r.detre),
            detpr: avg(&|r| r.detpr),
            assre: avg(&|r| r.assre),
            asspr: avg(&|r| r.asspr),
            loca: avg(&|r| r.loca),
            per_alpha,
        })
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn score_alpha(gt: &[FrameObjects], pred: &[FrameObjects], alpha: f64) -> Result<AlphaResult> {
    let mut matches: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut gt_count: BTreeMap<u64, u64> = BTreeMap::new();
    let mut pred_count: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut tp, mut fn_, mut fp) = (0u64, 0u64, 0u64);
    let mut iou_sum = 0.0;
    for (g, p) in gt.iter().zip(pred) {
        let m = match_frame(g, p, alpha)?;
        for &(i, j, v) in &m.pairs {
            *matches.entry((g[i].0, p[j].0)).or_default() += 1;
            iou_sum += v;
        }
        tp += m.pairs.len() as u64;
        fn_ += m.false_negatives.len() as u64;
        fp += m.false_positives.len() as u64;
        for (id, _) in g {
            *gt_count.entry(*id).or_default() += 1;
        }
        for (id, _) in p {
            *pred_count.entry(*id).or_default() += 1;
        }
    }

    if tp + fn_ + fp == 0 {
        return Ok(AlphaResult {
            alpha,
            hota: 1.0,
            deta: 1.0,
            assa: 1.0,
            detre: 1.0,
            detpr: 1.0,
            assre: 1.0,
            asspr: 1.0,
            loca: 1.0,
            ..Default::default()
        });
    }

    // Every TP of a pairing shares the same TPA, FNA and FPA.
    let (mut assa, mut assre, mut asspr) = (0.0, 0.0, 0.0);
    for (&(g, p), &n) in &matches {
        let n_f = n as f64;
        let (gc, pc) = (gt_count[&g] as f64, pred_count[&p] as f64);
        assa += n_f * n_f / (gc + pc - n_f);
        assre += n_f * n_f / gc;
        asspr += n_f * n_f / pc;
    }
    let tp_f = tp as f64;
    let deta = ratio(tp_f, (tp + fn_ + fp) as f64);
    let assa = ratio(assa, tp_f);
    Ok(AlphaResult {
        alpha,
        hota: (deta * assa).sqrt(),
        deta,
        assa,
        detre: ratio(tp_f, (tp + fn_) as f64),
        detpr: ratio(tp_f, (tp + fp) as f64),
        assre: ratio(assre, tp_f),
        asspr: ratio(asspr, tp_f),
        loca: ratio(iou_sum, tp_f),
        tp,
        fn_,
        fp,
    })
}

/// HOTA over one sequence. `gt[t]` and `pred[t]` hold frame `t`.
pub fn hota(gt: &[FrameObjects], pred: &[FrameObjects]) -> Result<HotaResult> {
    if gt.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "ground truth covers {} frames, prediction {}",
            gt.len(),
            pred.len()
        )));
    }
    let per_alpha = alphas()
        .into_iter()
        .map(|a| score_alpha(gt, pred, a))
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: fn(&AlphaResult) -> f64| per_alpha.iter().map(f).sum::<f64>() / N_ALPHAS as f64;
    Ok(HotaResult {
        hota: avg(|r| r.hota),
        deta: avg(|r| r.deta),
        assa: avg(|r| r.assa),
        detre: avg(|r| r.detre),
        detpr: avg(|r| r.detpr),
        assre: avg(|r| r.assre),
        asspr: avg(|r| r.asspr),
        loca: avg(|r| r.loca),
        per_alpha,
    })
}

/// `<root>/<sequence>/<expression>.txt`.
pub fn prediction_path(root: &Path, sequence_id: &str, expression_id: &str) -> PathBuf {
    root.join(sequence_id).join(format!("{expression_id}.txt"))
}

/// Per-frame ground truth of one expression: the positive objects.
pub fn expression_ground_truth(seq: &Sequence, expression_id: &str) -> Result<Vec<FrameObjects>> {
    let expr = seq
        .expressions
        .get(expression_id)
        .ok_or_else(|| Error::NotFound(format!("{}/{expression_id}", seq.id)))?;
    seq.frames
        .iter()
        .map(|f| {
            expr.positives_at(f.frame_id)
                .iter()
                .map(|&id| {
                    f.gt_object(id).map(|o| (id, o.bbox)).ok_or_else(|| {
                        Error::Invalid(format!(
                            "{}: frame {} has no object {id}",
                            seq.id, f.frame_id
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

/// Groups tracker output text by the sequence's frames. Records on
/// frames outside the sequence are an error.
pub fn predictions_by_frame(seq: &Sequence, text: &str) -> Result<Vec<FrameObjects>> {
    let index: BTreeMap<u32, usize> = seq
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| (f.frame_id, i))
        .collect();
    let mut out = vec![Vec::new(); seq.frames.len()];
    for r in parse_records(text)? {
        let &i = index.get(&r.frame_id).ok_or_else(|| {
            Error::Invalid(format!("{}: prediction on unknown frame {}", seq.id, r.frame_id))
        })?;
        out[i].push((r.track_id, r.bbox));
    }
    Ok(out)
}

/// Scores one (sequence, expression) pair from an optional prediction
/// text; `None` counts as an empty prediction.
pub fn evaluate_expression(
    seq: &Sequence,
    expression_id: &str,
    prediction: Option<&str>,
) -> Result<ExpressionResult> {
    let gt = expression_ground_truth(seq, expression_id)?;
    let pred = match prediction {
        Some(text) => predictions_by_frame(seq, text)?,
        None => vec![Vec::new(); gt.len()],
    };
    Ok(ExpressionResult {
        sequence_id: seq.id.clone(),
        expression_id: expression_id.to_string(),
        missing: prediction.is_none(),
        result: hota(&gt, &pred)?,
    })
}

/// Scores every (sequence, expression) pair of `dataset` against the
/// files under `predictions`. Results are ordered by sequence, then
/// expression id.
pub fn evaluate_benchmark(dataset: &Dataset, predictions: &Path) -> Result<BenchmarkReport> {
    evaluate_benchmark_jobs(dataset, predictions, 1)
}

/// [`evaluate_benchmark`] fanned out over `jobs` threads.
pub fn evaluate_benchmark_jobs(
    dataset: &Dataset,
    predictions: &Path,
    jobs: usize,
) -> Result<BenchmarkReport> {
    let pairs: Vec<(&Sequence, &str)> = dataset
        .sequences
        .iter()
        .flat_map(|s| s.expressions.keys().map(move |e| (s, e.as_str())))
        .collect();
    let entries = map_ordered(&pairs, jobs, |&(seq, expr_id)| {
        let path = prediction_path(predictions, &seq.id, expr_id);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => Some(t),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                log::warn!("missing prediction file {}", path.display());
                None
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        evaluate_expression(seq, expr_id, text.as_deref())
    });
    Ok(BenchmarkReport::new(entries.into_iter().collect::<Result<_>>()?))
}
