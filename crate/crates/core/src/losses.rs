//! Training objective: cosine scores mapped to probabilities, a binary
//! cross-entropy over every proposal for the true expressions, and a push
//! term on the matched targets under their counterfactual expressions.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::hmsi::{FrameContext, Hmsi, QueryVars};
use crate::matching::{iou, linear_assignment, BBox, CostMatrix};
use crate::priors::{CounterfactualQuery, Expression, SceneRecord};
use crate::tensor::param::Bound;
use crate::tensor::{Tape, Tensor, Var};

/// Clamp applied to probabilities before logarithms.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_N_QUERIES: usize = 10;

/// `(S + 1) / 2`, unclamped.
pub fn to_probability(score: f64) -> f64 {
    (score + 1.0) / 2.0
}

/// Probabilities on the tape, clamped to `[eps, 1 - eps]`.
pub fn probabilities(tape: &Tape, scores: Var) -> Result<Var> {
    let p = tape.affine(scores, 0.5, 0.5)?;
    tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross-entropy of `probs` against 0/1 `labels`.
pub fn main_loss(tape: &Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    let n = tape.shape(probs).iter().product::<usize>();
    if n != labels.len() || n == 0 {
        return Err(Error::shape(
            "main_loss",
            format!("{n} probabilities for {} labels", labels.len()),
        ));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = tape.constant(Tensor::vector(y))?;
    let not_y = tape.constant(Tensor::vector(not_y))?;
    let log_p = tape.log(probs)?;
    let log_q = tape.log(tape.affine(probs, -1.0, 1.0)?)?;
    let terms = tape.add(tape.mul(y, log_p)?, tape.mul(not_y, log_q)?)?;
    tape.scale(tape.mean(terms)?, -1.0)
}

/// Mean of `-log(1 - p)` over the target probabilities of one
/// counterfactual query.
pub fn cf_loss(tape: &Tape, p_cf: Var) -> Result<Var> {
    if tape.shape(p_cf).iter().product::<usize>() == 0 {
        return Err(Error::shape("cf_loss", "no target probabilities".to_string()));
    }
    let log_q = tape.log(tape.affine(p_cf, -1.0, 1.0)?)?;
    tape.scale(tape.mean(log_q)?, -1.0)
}

/// Maximum-IoU one-to-one matching of proposals to ground truth, keeping
/// pairs at or above `threshold`. Returns proposal index -> object id.
pub fn assign_labels(
    proposals: &[BBox],
    gt: &[(u64, BBox)],
    threshold: f64,
) -> BTreeMap<usize, u64> {
    let cost = CostMatrix::from_fn(proposals.len(), gt.len(), |i, j| {
        Some(iou(&proposals[i], &gt[j].1))
    });
    linear_assignment(&cost, true)
        .pairs
        .into_iter()
        .filter(|&(i, j)| iou(&proposals[i], &gt[j].1) >= threshold)
        .map(|(i, j)| (i, gt[j].0))
        .collect()
}

/// Proposal-to-object matching of a scene record.
pub fn frame_label_map(frame: &SceneRecord, threshold: f64) -> BTreeMap<usize, u64> {
    let boxes: Vec<BBox> = frame.proposals.iter().map(|p| p.bbox).collect();
    let gt: Vec<(u64, BBox)> = frame
        .gt_objects
        .iter()
        .map(|o| (o.object_id, o.bbox))
        .collect();
    assign_labels(&boxes, &gt, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Negative,
    Positive,
    Masked,
}

/// `[n_proposals, 2 * n_queries]` labels. Columns `0..n` are the true
/// expressions, `n..2n` their counterfactuals in the same order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    n_proposals: usize,
    n_queries: usize,
    entries: Vec<Label>,
}

impl LabelMatrix {
    /// Builds the matrix from the positive proposal set of each expression.
    pub fn from_positives(n_proposals: usize, positives: &[BTreeSet<usize>]) -> Self {
        let n = positives.len();
        let mut entries = vec![Label::Masked; n_proposals * 2 * n];
        for (k, pos) in positives.iter().enumerate() {
            for i in 0..n_proposals {
                let hit = pos.contains(&i);
                entries[i * 2 * n + k] = if hit { Label::Positive } else { Label::Negative };
                if hit {
                    entries[i * 2 * n + n + k] = Label::Negative;
                }
            }
        }
        Self {
            n_proposals,
            n_queries: n,
            entries,
        }
    }

    pub fn n_proposals(&self) -> usize {
        self.n_proposals
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn get(&self, proposal: usize, column: usize) -> Label {
        self.entries[proposal * 2 * self.n_queries + column]
    }

    pub fn column(&self, column: usize) -> Vec<Label> {
        (0..self.n_proposals).map(|i| self.get(i, column)).collect()
    }

    /// Targets of expression `k`, i.e. the unmasked rows of its
    /// counterfactual column.
    pub fn cf_targets(&self, k: usize) -> Vec<usize> {
        (0..self.n_proposals)
            .filter(|&i| self.get(i, self.n_queries + k) != Label::Masked)
            .collect()
    }

    /// Checks the masking rules column by column.
    pub fn check(&self) -> Result<()> {
        let n = self.n_queries;
        for k in 0..n {
            for i in 0..self.n_proposals {
                let (main, cf) = (self.get(i, k), self.get(i, n + k));
                let ok = match main {
                    Label::Positive => cf == Label::Negative,
                    Label::Negative => cf == Label::Masked,
                    Label::Masked => false,
                };
                if !ok {
                    return Err(Error::Invalid(format!(
                        "label matrix cell ({i}, {k}) is {main:?} with counterfactual {cf:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One frame paired with `n` expressions and their counterfactuals.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub expression_ids: Vec<String>,
    /// `2n` texts: expressions, then counterfactuals.
    pub texts: Vec<String>,
    pub labels: LabelMatrix,
}

impl QueryBatch {
    pub fn n_queries(&self) -> usize {
        self.labels.n_queries()
    }
}

/// Pairs each expression with its counterfactual and labels proposals
/// through `label_map`.
pub fn build_query_batch(
    frame: &SceneRecord,
    expressions: &[(&str, &Expression)],
    counterfactuals: &[&CounterfactualQuery],
    label_map: &BTreeMap<usize, u64>,
) -> Result<QueryBatch> {
    if expressions.len() != counterfactuals.len() {
        return Err(Error::Invalid(format!(
            "{} expressions paired with {} counterfactuals",
            expressions.len(),
            counterfactuals.len()
        )));
    }
    let mut positives = Vec::with_capacity(expressions.len());
    let mut ids = Vec::with_capacity(expressions.len());
    let mut texts = Vec::with_capacity(2 * expressions.len());
    for (i, (&(id, e), cf)) in expressions.iter().zip(counterfactuals).enumerate() {
        if cf.source_expression_id != id {
            return Err(Error::Record {
                index: i,
                msg: format!(
                    "counterfactual of `{}` paired with expression `{id}`",
                    cf.source_expression_id
                ),
            });
        }
        let objects = e.positives_at(frame.frame_id);
        positives.push(
            label_map
                .iter()
                .filter(|(_, o)| objects.contains(o))
                .map(|(&p, _)| p)
                .collect::<BTreeSet<usize>>(),
        );
        ids.push(id.to_string());
        texts.push(e.text.clone());
    }
    texts.extend(counterfactuals.iter().map(|c| c.text.clone()));
    Ok(QueryBatch {
        expression_ids: ids,
        texts,
        labels: LabelMatrix::from_positives(frame.proposals.len(), &positives),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub counterfactual: f64,
    pub total: f64,
    pub main_terms: usize,
    pub cf_terms: usize,
}

/// How counterfactual columns are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfPath {
    /// Only unmasked proposals are scored.
    Subset,
    /// Every proposal is scored; masked cells are dropped afterwards.
    Full,
}

/// Per-column probabilities recorded while computing a frame loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameProbabilities {
    /// `[query][proposal]` for the true expressions.
    pub main: Vec<Vec<f64>>,
    /// `[query][target]` for the counterfactuals, target order as in
    /// [`LabelMatrix::cf_targets`].
    pub counterfactual: Vec<Vec<f64>>,
}

pub struct FrameLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub probs: FrameProbabilities,
}

/// `L_m + L_cf` for one batch. Returns `None` when the frame has no
/// proposals and so contributes no terms.
pub fn frame_loss(
    model: &Hmsi,
    tape: &Tape,
    bound: &Bound,
    ctx: &FrameContext,
    batch: &QueryBatch,
    cf_enabled: bool,
    path: CfPath,
) -> Result<Option<FrameLoss>> {
    let labels = &batch.labels;
    if labels.n_proposals() == 0 || labels.n_queries() == 0 {
        return Ok(None);
    }
    let n = labels.n_queries();
    let encode = |text: &str| -> Result<QueryVars> { model.encode_query(tape, bound, text) };
    let mut probs = FrameProbabilities::default();

    let mut main_terms = Vec::with_capacity(n);
    for k in 0..n {
        let q = encode(&batch.texts[k])?;
        let s = model.score_query(tape, bound, ctx, &q, None)?;
        let p = probabilities(tape, s.scores)?;
        let y: Vec<bool> = labels
            .column(k)
            .iter()
            .map(|&l| l == Label::Positive)
            .collect();
        main_terms.push(main_loss(tape, p, &y)?);
        probs.main.push(tape.value(p).into_data());
    }
    let l_main = tape.scale(tape.sum(tape.concat(&reshape_scalars(tape, &main_terms)?)?)?, 1.0 / n as f64)?;

    let mut cf_terms = Vec::new();
    if cf_enabled {
        for k in 0..n {
            let targets = labels.cf_targets(k);
            if targets.is_empty() {
                probs.counterfactual.push(Vec::new());
                continue;
            }
            let q = encode(&batch.texts[n + k])?;
            let p = match path {
                CfPath::Subset => {
                    let s = model.score_query(tape, bound, ctx, &q, Some(&targets))?;
                    probabilities(tape, s.scores)?
                }
                CfPath::Full => {
                    let s = model.score_query(tape, bound, ctx, &q, None)?;
                    let col = tape.reshape(s.scores, &[labels.n_proposals(), 1])?;
                    let picked = tape.index_rows(col, &targets)?;
                    probabilities(tape, tape.reshape(picked, &[targets.len()])?)?
                }
            };
            cf_terms.push(cf_loss(tape, p)?);
            probs.counterfactual.push(tape.value(p).into_data());
        }
    }
    let (loss, l_cf) = if cf_terms.is_empty() {
        (l_main, 0.0)
    } else {
        let l_cf = tape.scale(
            tape.sum(tape.concat(&reshape_scalars(tape, &cf_terms)?)?)?,
            1.0 / cf_terms.len() as f64,
        )?;
        (tape.add(l_main, l_cf)?, tape.value(l_cf).item())
    };
    let total = tape.value(loss).item();
    Ok(Some(FrameLoss {
        loss,
        breakdown: LossBreakdown {
            main: tape.value(l_main).item(),
            counterfactual: l_cf,
            total,
            main_terms: n,
            cf_terms: cf_terms.len(),
        },
        probs,
    }))
}

fn reshape_scalars(tape: &Tape, xs: &[Var]) -> Result<Vec<Var>> {
    xs.iter().map(|&x| tape.reshape(x, &[1, 1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::BBox;
    use crate::priors::{GtObject, Proposal};
    use crate::tensor::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bce(p: &[f64], y: &[bool]) -> f64 {
        let mut s = 0.0;
        for (pi, &yi) in p.iter().zip(y) {
            let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
            s += if yi { -pc.ln() } else { -(1.0 - pc).ln() };
        }
        s / p.len() as f64
    }

    fn eval_main(p: &[f64], y: &[bool]) -> f64 {
        let tape = Tape::new(Precision::F64);
        let v = tape.constant(Tensor::vector(p.to_vec())).unwrap();
        let v = tape.clamp(v, PROB_EPS, 1.0 - PROB_EPS).unwrap();
        tape.value(main_loss(&tape, v, y).unwrap()).item()
    }

    #[test]
    fn probability_mapping() {
        assert_eq!(to_probability(1.0), 1.0);
        assert_eq!(to_probability(0.0), 0.5);
        assert_eq!(to_probability(-1.0), 0.0);
        let tape = Tape::new(Precision::F64);
        let s = tape.constant(Tensor::vector(vec![1.0, 0.0, -1.0])).unwrap();
        let p = tape.value(probabilities(&tape, s).unwrap());
        assert_eq!(p.data(), &[1.0 - PROB_EPS, 0.5, PROB_EPS]);
    }

    #[test]
    fn main_loss_examples_and_oracle() {
        assert!((eval_main(&[0.5, 0.5], &[true, false]) - 0.5f64.ln().abs()).abs() < 1e-4);
        assert!(eval_main(&[1.0 - PROB_EPS], &[true]) < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            assert!((eval_main(&p, &y) - bce(&p, &y)).abs() < 1e-6);
        }
        let tape = Tape::new(Precision::F64);
        let v = tape.constant(Tensor::vector(vec![])).unwrap();
        assert!(main_loss(&tape, v, &[]).is_err());
    }

    #[test]
    fn main_loss_is_invariant_to_proposal_order() {
        let p = [0.2, 0.9, 0.6, 0.35];
        let y = [false, true, true, false];
        let (pr, yr) = ([0.6, 0.35, 0.9, 0.2], [true, false, true, false]);
        assert!((eval_main(&p, &y) - eval_main(&pr, &yr)).abs() < 1e-15);
    }

    #[test]
    fn cf_loss_examples() {
        let tape = Tape::new(Precision::F64);
        let eval = |p: f64| {
            let v = tape.constant(Tensor::vector(vec![p])).unwrap();
            tape.value(cf_loss(&tape, v).unwrap()).item()
        };
        assert!(eval(PROB_EPS) < 1e-6);
        assert!((eval(0.5) - 0.693_147).abs() < 1e-4);
        let v = tape.constant(Tensor::vector(vec![0.2, 0.6])).unwrap();
        let want = (-(0.8f64).ln() - (0.4f64).ln()) / 2.0;
        assert!((tape.value(cf_loss(&tape, v).unwrap()).item() - want).abs() < 1e-12);
    }

    #[test]
    fn push_and_pull_signs() {
        let tape = Tape::new(Precision::F64);
        let p = tape.variable(Tensor::vector(vec![0.3, 0.6])).unwrap();
        let pull = main_loss(&tape, p, &[true, false]).unwrap();
        let g = tape.backward(pull).unwrap();
        let g = g.get(p).unwrap();
        assert!(g.data()[0] < 0.0 && g.data()[1] > 0.0);
        let q = tape.variable(Tensor::vector(vec![0.4])).unwrap();
        let push = cf_loss(&tape, q).unwrap();
        assert!(tape.backward(push).unwrap().get(q).unwrap().item() > 0.0);
    }

    fn brute_max_iou(props: &[BBox], gt: &[(u64, BBox)]) -> f64 {
        // Every injective map of GT into proposals (GT count <= proposals).
        fn go(props: &[BBox], gt: &[(u64, BBox)], j: usize, used: &mut Vec<bool>) -> f64 {
            if j == gt.len() {
                return 0.0;
            }
            let mut best = f64::MIN;
            for i in 0..props.len() {
                if !used[i] {
                    used[i] = true;
                    best = best.max(iou(&props[i], &gt[j].1) + go(props, gt, j + 1, used));
                    used[i] = false;
                }
            }
            best
        }
        go(props, gt, 0, &mut vec![false; props.len()])
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        BBox::new(
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.1..0.4),
            rng.gen_range(0.1..0.4),
        )
    }

    #[test]
    fn assignment_examples_and_oracle() {
        let gt = vec![
            (7, BBox::new(0.2, 0.2, 0.1, 0.1)),
            (9, BBox::new(0.7, 0.6, 0.2, 0.3)),
        ];
        let props: Vec<BBox> = gt.iter().map(|g| g.1).collect();
        assert_eq!(
            assign_labels(&props, &gt, 0.5),
            BTreeMap::from([(0, 7), (1, 9)])
        );
        let far = [BBox::new(0.95, 0.95, 0.02, 0.02)];
        assert!(assign_labels(&far, &gt, 0.5).is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let props: Vec<BBox> = (0..5).map(|_| random_box(&mut rng)).collect();
            let gt: Vec<(u64, BBox)> = (0..4).map(|k| (k + 1, random_box(&mut rng))).collect();
            let map = assign_labels(&props, &gt, 0.0);
            let total: f64 = map
                .iter()
                .map(|(&i, &o)| iou(&props[i], &gt[o as usize - 1].1))
                .sum();
            assert!((total - brute_max_iou(&props, &gt)).abs() < 1e-9);
        }
    }

    fn scene(boxes: &[BBox]) -> SceneRecord {
        SceneRecord {
            sequence_id: "s".into(),
            frame_id: 0,
            width: 1242,
            height: 375,
            proposals: boxes
                .iter()
                .map(|&b| Proposal {
                    bbox: b,
                    caption: "a car".into(),
                    detector_score: 1.0,
                })
                .collect(),
            gt_objects: boxes
                .iter()
                .enumerate()
                .map(|(i, &b)| GtObject {
                    object_id: i as u64 + 1,
                    bbox: b,
                    attributes: Default::default(),
                })
                .collect(),
            positives: BTreeMap::new(),
        }
    }

    fn expression(text: &str, objects: &[u64]) -> Expression {
        Expression {
            text: text.into(),
            attributes: Default::default(),
            positives: BTreeMap::from([(0, objects.to_vec())]),
        }
    }

    fn counterfactual(source: &str, text: &str) -> CounterfactualQuery {
        CounterfactualQuery {
            text: text.into(),
            source_expression_id: source.into(),
            perturbed_slot: "color".into(),
            original_value: "red".into(),
            new_value: "white".into(),
        }
    }

    #[test]
    fn two_query_masking_scenario() {
        let f = scene(&[
            BBox::new(0.2, 0.5, 0.1, 0.2),
            BBox::new(0.5, 0.5, 0.1, 0.2),
            BBox::new(0.8, 0.5, 0.1, 0.2),
        ]);
        let (e1, e2) = (expression("r1", &[1]), expression("r2", &[2, 3]));
        let (c1, c2) = (counterfactual("e1", "c1"), counterfactual("e2", "c2"));
        let map = frame_label_map(&f, 0.5);
        let b = build_query_batch(&f, &[("e1", &e1), ("e2", &e2)], &[&c1, &c2], &map).unwrap();
        use Label::*;
        assert_eq!(b.labels.column(0), vec![Positive, Negative, Negative]);
        assert_eq!(b.labels.column(1), vec![Negative, Positive, Positive]);
        assert_eq!(b.labels.column(2), vec![Negative, Masked, Masked]);
        assert_eq!(b.labels.column(3), vec![Masked, Negative, Negative]);
        assert_eq!(b.texts, vec!["r1", "r2", "c1", "c2"]);
        b.labels.check().unwrap();

        assert!(build_query_batch(&f, &[("e1", &e1)], &[&c2], &map).is_err());
        assert!(build_query_batch(&f, &[("e1", &e1)], &[], &map).is_err());
    }

    #[test]
    fn empty_frame_batch_is_well_formed() {
        let f = scene(&[]);
        let e = expression("r", &[]);
        let c = counterfactual("e", "c");
        let b = build_query_batch(&f, &[("e", &e)], &[&c], &BTreeMap::new()).unwrap();
        assert_eq!(b.labels.n_proposals(), 0);
        assert_eq!(b.labels.n_queries(), 1);
        assert_eq!(b.texts.len(), 2);
    }

    // Independent restatement of the masking rules over a raw grid.
    fn masking_rules_hold(grid: &[Vec<Label>], n: usize, expected: &[BTreeSet<usize>]) -> bool {
        grid.iter().enumerate().all(|(i, row)| {
            (0..n).all(|k| {
                let target = expected[k].contains(&i);
                let main_ok = row[k] == if target { Label::Positive } else { Label::Negative };
                let cf_ok = row[n + k] == if target { Label::Negative } else { Label::Masked };
                main_ok && cf_ok
            })
        })
    }

    #[test]
    fn random_batches_respect_masking_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n_obj = rng.gen_range(0..5);
            let boxes: Vec<BBox> = (0..n_obj).map(|_| random_box(&mut rng)).collect();
            let mut f = scene(&boxes);
            // Some proposals drift off their object; a spurious one may be added.
            for p in &mut f.proposals {
                if rng.gen_bool(0.3) {
                    p.bbox.cx = (p.bbox.cx + 0.3).min(0.95);
                }
            }
            if rng.gen_bool(0.3) {
                f.proposals.push(Proposal {
                    bbox: random_box(&mut rng),
                    caption: "a van".into(),
                    detector_score: 1.0,
                });
            }
            let n = rng.gen_range(1..5);
            let exprs: Vec<(String, Expression)> = (0..n)
                .map(|k| {
                    let objs: Vec<u64> = (1..=n_obj as u64).filter(|_| rng.gen_bool(0.4)).collect();
                    (format!("e{k}"), expression(&format!("r{k}"), &objs))
                })
                .collect();
            let cfs: Vec<CounterfactualQuery> =
                exprs.iter().map(|(id, _)| counterfactual(id, "c")).collect();
            let map = frame_label_map(&f, 0.5);
            let pairs: Vec<(&str, &Expression)> = exprs.iter().map(|(i, e)| (i.as_str(), e)).collect();
            let refs: Vec<&CounterfactualQuery> = cfs.iter().collect();
            let b = build_query_batch(&f, &pairs, &refs, &map).unwrap();

            let expected: Vec<BTreeSet<usize>> = exprs
                .iter()
                .map(|(_, e)| {
                    (0..f.proposals.len())
                        .filter(|&i| {
                            let best = f
                                .gt_objects
                                .iter()
                                .find(|o| map.get(&i) == Some(&o.object_id));
                            best.is_some_and(|o| e.positives_at(0).contains(&o.object_id))
                        })
                        .collect()
                })
                .collect();
            let grid: Vec<Vec<Label>> = (0..f.proposals.len())
                .map(|i| (0..2 * n).map(|c| b.labels.get(i, c)).collect())
                .collect();
            assert!(masking_rules_hold(&grid, n, &expected));
            b.labels.check().unwrap();
        }
    }

    fn tiny_frame() -> (Hmsi, SceneRecord, Tensor, QueryBatch) {
        use crate::hmsi::HmsiConfig;
        use crate::priors::{generate_sequence, AttributeGrammar, NoiseParams, SequenceParams};
        let g = AttributeGrammar::default();
        let params = SequenceParams {
            sequence_id: "t".into(),
            n_frames: 1,
            n_expressions: 3,
            counterfactuals_per_expression: 1,
            noise: NoiseParams { n_objects: 4, spurious_rate: 0.5, ..Default::default() },
        };
        let seq = generate_sequence(&g, &params, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let cfg = HmsiConfig { dim: 8, heads: 2, points: 2, map_height: 8, map_width: 8, ..Default::default() };
        let model = Hmsi::new(cfg).unwrap();
        let frame = seq.frames[0].clone();
        let visual = model.encode_frame(&frame).unwrap();
        let exprs: Vec<(&str, &Expression)> = seq.expressions.iter().map(|(k, e)| (k.as_str(), e)).collect();
        let cfs: Vec<&CounterfactualQuery> = exprs.iter().map(|(k, _)| &seq.counterfactuals[*k][0]).collect();
        let batch = build_query_batch(&frame, &exprs, &cfs, &frame_label_map(&frame, 0.5)).unwrap();
        (model, frame, visual, batch)
    }

    fn run(model: &Hmsi, frame: &SceneRecord, visual: &Tensor, batch: &QueryBatch, path: CfPath) -> (f64, BTreeMap<String, Tensor>) {
        let tape = Tape::new(Precision::F64);
        let b = model.params.bind(&tape).unwrap();
        let ctx = model.frame_context(&tape, &b, visual, &frame.proposals).unwrap();
        let out = frame_loss(model, &tape, &b, &ctx, batch, true, path).unwrap().unwrap();
        let bd = out.breakdown;
        assert!((bd.total - (bd.main + bd.counterfactual)).abs() <= 1e-7);
        let grads = model.params.gradients(&b, &tape.backward(out.loss).unwrap());
        (bd.total, grads)
    }

    #[test]
    fn masked_cells_change_nothing() {
        let (model, frame, visual, batch) = tiny_frame();
        assert!(frame.proposals.len() > batch.labels.cf_targets(0).len());
        let (l_sub, g_sub) = run(&model, &frame, &visual, &batch, CfPath::Subset);
        let (l_full, g_full) = run(&model, &frame, &visual, &batch, CfPath::Full);
        assert_eq!(l_sub.to_bits(), l_full.to_bits());
        assert_eq!(g_sub.keys().collect::<Vec<_>>(), g_full.keys().collect::<Vec<_>>());
        for (k, a) in &g_sub {
            let b = &g_full[k];
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits() || (*x == 0.0 && *y == 0.0)), "{k}");
        }
    }

    #[test]
    fn cf_gradient_vanishes_off_target() {
        let (model, frame, visual, batch) = tiny_frame();
        let k = (0..batch.n_queries()).find(|&k| !batch.labels.cf_targets(k).is_empty()).unwrap();
        let targets = batch.labels.cf_targets(k);
        let tape = Tape::new(Precision::F64);
        let b = model.params.bind(&tape).unwrap();
        let ctx = model.frame_context(&tape, &b, &visual, &frame.proposals).unwrap();
        let q = model.encode_query(&tape, &b, &batch.texts[batch.n_queries() + k]).unwrap();
        let s = model.score_query(&tape, &b, &ctx, &q, None).unwrap().scores;
        let col = tape.reshape(s, &[frame.proposals.len(), 1]).unwrap();
        let picked = tape.reshape(tape.index_rows(col, &targets).unwrap(), &[targets.len()]).unwrap();
        let loss = cf_loss(&tape, probabilities(&tape, picked).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(s).unwrap();
        for i in 0..frame.proposals.len() {
            if targets.contains(&i) {
                assert!(g.data()[i] > 0.0);
            } else {
                assert_eq!(g.data()[i], 0.0);
            }
        }
    }
}
