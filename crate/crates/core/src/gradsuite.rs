//! Registry of 64-bit finite-difference gradient checks: every tape op,
//! every network block, the losses, and a tiny end-to-end forward.

use std::fmt::Write as _;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hmsi::attention::Mhca;
use crate::hmsi::layers::{
    caption_aggregate, caption_filter, holistic_project, refer_aggregate, BiFusion, DeformSampler,
    Pyramid,
};
use crate::hmsi::{Hmsi, HmsiConfig};
use crate::losses::{build_query_batch, cf_loss, frame_label_map, frame_loss, main_loss, probabilities, CfPath};
use crate::priors::{generate_sequence, AttributeGrammar, NoiseParams, SceneRecord, Sequence, SequenceParams};
use crate::tensor::gradcheck::{check_inputs, check_params, project, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

type CaseFn = Box<dyn Fn() -> Result<Vec<f64>>>;

/// One named check. Running it yields one relative error per checked
/// input or parameter.
pub struct GradCase {
    pub name: String,
    run: CaseFn,
}

impl GradCase {
    pub fn new(name: impl Into<String>, run: impl Fn() -> Result<Vec<f64>> + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }

    /// Checks a function of freshly bound constant inputs.
    fn inputs(
        name: &str,
        inputs: Vec<Tensor>,
        f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self::new(name, move || {
            check_inputs(&inputs, DEFAULT_STEP, |t, v| {
                let out = f(t, v)?;
                project(t, out, 17)
            })
        })
    }

    /// Checks every trainable parameter of `store`.
    fn params(
        name: &str,
        store: ParamStore,
        f: impl Fn(&Tape, &crate::tensor::param::Bound) -> Result<Var> + 'static,
    ) -> Self {
        Self::new(name, move || {
            let errs = check_params(&store, DEFAULT_STEP, |t, b| {
                let out = f(t, b)?;
                project(t, out, 19)
            })?;
            Ok(errs.into_iter().map(|(_, e)| e).collect())
        })
    }
}

/// Sizes of the end-to-end check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EndToEndDims {
    pub proposals: usize,
    pub tokens: usize,
    pub dim: usize,
    pub map_side: usize,
}

impl Default for EndToEndDims {
    fn default() -> Self {
        Self {
            proposals: 2,
            tokens: 3,
            dim: 8,
            map_side: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn to_text(&self) -> String {
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>7}  result", "op", "max rel err", "checked");
        for r in &self.results {
            let verdict = match (&r.error, r.passed) {
                (Some(e), _) => format!("ERROR {e}"),
                (None, true) => "pass".to_string(),
                (None, false) => "FAIL".to_string(),
            };
            let _ = writeln!(
                s,
                "{:<width$}  {:>12.3e}  {:>7}  {verdict}",
                r.name, r.max_rel_error, r.checked
            );
        }
        let failed = self.failures().count();
        let _ = writeln!(
            s,
            "{} checks, {} failed, tolerance {:.0e}",
            self.results.len(),
            failed,
            self.tolerance
        );
        s
    }
}

/// Runs the cases in order. A case that errors counts as failed.
pub fn run(cases: &[GradCase], tolerance: f64) -> GradcheckReport {
    let results = cases
        .iter()
        .map(|c| {
            let start = Instant::now();
            let out = (c.run)();
            let seconds = start.elapsed().as_secs_f64();
            match out {
                Ok(errs) => {
                    let max = errs.iter().fold(0.0f64, |m, e| m.max(*e));
                    let passed = !errs.is_empty() && errs.iter().all(|e| *e <= tolerance);
                    CheckResult {
                        name: c.name.clone(),
                        max_rel_error: max,
                        checked: errs.len(),
                        passed,
                        error: None,
                        seconds,
                    }
                }
                Err(e) => CheckResult {
                    name: c.name.clone(),
                    max_rel_error: f64::INFINITY,
                    checked: 0,
                    passed: false,
                    error: Some(e.to_string()),
                    seconds,
                },
            }
        })
        .collect();
    GradcheckReport { tolerance, results }
}

pub fn run_default(dims: &EndToEndDims) -> Result<GradcheckReport> {
    Ok(run(&registry(dims)?, DEFAULT_TOLERANCE))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("shape matches")
}

/// Uniform values kept at least `margin` away from each kink.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Sample coordinates on a `h x w` map kept clear of the pixel-center
/// grid lines where bilinear weights have kinks.
fn sample_points(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    let grid = |size: usize| -> Vec<f64> { (0..size).map(|i| (i as f64 + 0.5) / size as f64).collect() };
    let (gx, gy) = (grid(w), grid(h));
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        for g in [&gx, &gy] {
            data.push(loop {
                let v = rng.gen_range(0.05..0.95);
                if g.iter().all(|k| (v - k).abs() > 0.01) {
                    break v;
                }
            });
        }
    }
    Tensor::new(vec![n, 2], data).expect("shape matches")
}

fn op_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut rng;
    let mut cases = vec![
        GradCase::inputs("matmul", vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        GradCase::inputs("bmm", vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[2, 4, 2], -1.0, 1.0)], |t, v| {
            t.bmm(v[0], v[1], false)
        }),
        GradCase::inputs("bmm_transposed", vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[2, 5, 4], -1.0, 1.0)], |t, v| {
            t.bmm(v[0], v[1], true)
        }),
        GradCase::inputs("add", vec![rand_tensor(r, &[3, 2], -1.0, 1.0), rand_tensor(r, &[3, 2], -1.0, 1.0)], |t, v| {
            t.add(v[0], v[1])
        }),
        GradCase::inputs("sub", vec![rand_tensor(r, &[3, 2], -1.0, 1.0), rand_tensor(r, &[3, 2], -1.0, 1.0)], |t, v| {
            t.sub(v[0], v[1])
        }),
        GradCase::inputs("mul", vec![rand_tensor(r, &[3, 2], -1.0, 1.0), rand_tensor(r, &[3, 2], -1.0, 1.0)], |t, v| {
            t.mul(v[0], v[1])
        }),
        GradCase::inputs("add_row", vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)], |t, v| {
            t.add_row(v[0], v[1])
        }),
        GradCase::inputs("mul_row", vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)], |t, v| {
            t.mul_row(v[0], v[1])
        }),
        GradCase::inputs("affine", vec![rand_tensor(r, &[5], -1.0, 1.0)], |t, v| t.affine(v[0], -1.5, 0.25)),
        GradCase::inputs("sum", vec![rand_tensor(r, &[2, 3], -1.0, 1.0)], |t, v| t.sum(v[0])),
        GradCase::inputs("mean", vec![rand_tensor(r, &[2, 3], -1.0, 1.0)], |t, v| t.mean(v[0])),
        GradCase::inputs("softmax_axis0", vec![rand_tensor(r, &[3, 4], -2.0, 2.0)], |t, v| t.softmax(v[0], 0)),
        GradCase::inputs("softmax_axis1", vec![rand_tensor(r, &[3, 4], -2.0, 2.0)], |t, v| t.softmax(v[0], 1)),
        GradCase::inputs("softmax_axis2", vec![rand_tensor(r, &[2, 2, 3], -2.0, 2.0)], |t, v| t.softmax(v[0], 2)),
        GradCase::inputs("transpose", vec![rand_tensor(r, &[3, 4], -1.0, 1.0)], |t, v| t.transpose(v[0])),
        GradCase::inputs("swap_axes01", vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.swap_axes01(v[0])),
        GradCase::inputs("reshape", vec![rand_tensor(r, &[2, 6], -1.0, 1.0)], |t, v| t.reshape(v[0], &[3, 4])),
        GradCase::inputs("slice_cols", vec![rand_tensor(r, &[3, 5], -1.0, 1.0)], |t, v| t.slice_cols(v[0], 1, 3)),
        GradCase::inputs(
            "concat",
            vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[1, 3], -1.0, 1.0), rand_tensor(r, &[3, 3], -1.0, 1.0)],
            |t, v| t.concat(v),
        ),
        GradCase::inputs("index_rows", vec![rand_tensor(r, &[4, 3], -1.0, 1.0)], |t, v| t.index_rows(v[0], &[2, 0, 2, 3])),
        GradCase::inputs("log", vec![rand_tensor(r, &[5], 0.3, 2.0)], |t, v| t.log(v[0])),
        GradCase::inputs("clamp", vec![away_from(r, &[8], -2.0, 2.0, &[-1.0, 1.0], 0.01)], |t, v| t.clamp(v[0], -1.0, 1.0)),
        GradCase::inputs("cosine_rows", vec![rand_tensor(r, &[3, 5], -1.0, 1.0), rand_tensor(r, &[5], -1.0, 1.0)], |t, v| {
            t.cosine_rows(v[0], v[1])
        }),
        GradCase::inputs("cosine", vec![rand_tensor(r, &[5], -1.0, 1.0), rand_tensor(r, &[5], -1.0, 1.0)], |t, v| t.cosine(v[0], v[1])),
        GradCase::inputs("avg_pool2", vec![rand_tensor(r, &[5, 6, 2], -1.0, 1.0)], |t, v| t.avg_pool2(v[0])),
    ];
    cases.push(GradCase::inputs(
        "bilinear_sample",
        vec![rand_tensor(r, &[5, 6, 3], -1.0, 1.0), sample_points(r, 4, 5, 6)],
        |t, v| t.bilinear_sample(v[0], v[1]),
    ));
    // Two levels, two heads, two points per level, one batch row: the
    // points of both levels must avoid the grid lines of both sizes.
    let pts = {
        let a = sample_points(r, 8, 6, 6);
        let clear = |v: f64| (0..3).all(|i| (v - (i as f64 + 0.5) / 3.0).abs() > 0.01);
        let data: Vec<f64> = a.data().iter().map(|&v| if clear(v) { v } else { v + 0.03 }).collect();
        Tensor::new(vec![8, 2], data).expect("shape matches")
    };
    cases.push(GradCase::inputs(
        "deform_gather",
        vec![rand_tensor(r, &[6, 6, 4], -1.0, 1.0), rand_tensor(r, &[3, 3, 4], -1.0, 1.0), pts],
        |t, v| t.deform_gather(&v[..2], v[2], 2, 2),
    ));
    cases
}

fn layer_cases() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let d = 8;
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let m = Mhca::new(&mut store, "mhca", d, 2, &mut rng)?;
    let (q, k, v) = (
        rand_tensor(&mut rng, &[3, d], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, d], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, d], -1.0, 1.0),
    );
    cases.push(GradCase::params("mhca", store, move |t, b| {
        let (q, k, v) = (t.constant(q.clone())?, t.constant(k.clone())?, t.constant(v.clone())?);
        m.forward(t, b, q, k, v)
    }));

    let mut store = ParamStore::new();
    let f = BiFusion::new(&mut store, "bifusion", d, 2, &mut rng)?;
    let (fv, rw) = (rand_tensor(&mut rng, &[6, d], -1.0, 1.0), rand_tensor(&mut rng, &[3, d], -1.0, 1.0));
    cases.push(GradCase::params("bi_fusion", store, move |t, b| {
        let (a, c) = f.forward(t, b, t.constant(fv.clone())?, t.constant(rw.clone())?)?;
        let a = t.reshape(a, &[6 * d])?;
        let c = t.reshape(c, &[3 * d])?;
        t.concat(&[a, c])
    }));

    let mut store = ParamStore::new();
    let p = Pyramid::new(&mut store, "pyramid", d, 3, &mut rng)?;
    let map = rand_tensor(&mut rng, &[5, 7, d], -1.0, 1.0);
    cases.push(GradCase::params("pyramid", store, move |t, b| {
        let levels = p.forward(t, b, t.constant(map.clone())?)?;
        let flat = levels
            .iter()
            .map(|&l| {
                let n = t.shape(l).iter().product::<usize>();
                t.reshape(l, &[n])
            })
            .collect::<Result<Vec<_>>>()?;
        t.concat(&flat)
    }));

    let mut store = ParamStore::new();
    let ds = DeformSampler::new(&mut store, "deform", d, 2, 2, 2, &mut rng)?;
    let (l0, l1) = (rand_tensor(&mut rng, &[6, 6, d], -1.0, 1.0), rand_tensor(&mut rng, &[3, 3, d], -1.0, 1.0));
    let boxes = [
        crate::matching::BBox::new(0.4, 0.45, 0.3, 0.2),
        crate::matching::BBox::new(0.62, 0.3, 0.15, 0.25),
    ];
    cases.push(GradCase::params("deform_sample", store, move |t, b| {
        let levels = [t.constant(l0.clone())?, t.constant(l1.clone())?];
        let values = ds.value_maps(t, b, &levels)?;
        Ok(ds.forward(t, b, &levels, &values, &boxes)?.0)
    }));

    for name in ["refer_aggregate", "caption_filter", "caption_aggregate"] {
        let mut store = ParamStore::new();
        let m = Mhca::new(&mut store, name, d, 2, &mut rng)?;
        let rows = if name == "caption_filter" { 4 } else { 1 };
        let a = rand_tensor(&mut rng, &[rows, d], -1.0, 1.0);
        let (w, wv) = (rand_tensor(&mut rng, &[3, d], -1.0, 1.0), rand_tensor(&mut rng, &[3, d], -1.0, 1.0));
        cases.push(GradCase::params(name, store, move |t, b| {
            let (w, wv) = (t.constant(w.clone())?, t.constant(wv.clone())?);
            match name {
                "caption_filter" => caption_filter(t, b, &m, t.constant(a.clone())?, w, wv),
                "refer_aggregate" => refer_aggregate(t, b, &m, t.constant(a.reshape(&[d])?)?, w, wv),
                _ => caption_aggregate(t, b, &m, t.constant(a.reshape(&[d])?)?, w, wv),
            }
        }));
    }

    let mut store = ParamStore::new();
    let fuse = store.add_linear("fuse", d, d, &mut rng)?;
    let (ov, oc, op) = (
        rand_tensor(&mut rng, &[2, d], -1.0, 1.0),
        rand_tensor(&mut rng, &[2, d], -1.0, 1.0),
        rand_tensor(&mut rng, &[2, d], -1.0, 1.0),
    );
    cases.push(GradCase::params("holistic_project", store, move |t, b| {
        let oc = t.constant(oc.clone())?;
        holistic_project(t, b, &fuse, t.constant(ov.clone())?, Some(oc), t.constant(op.clone())?)
    }));

    let scores = away_from(&mut rng, &[6], -0.95, 0.95, &[], 0.0);
    let labels = [true, false, false, true, false, false];
    cases.push(GradCase::new("main_loss", move || {
        check_inputs(std::slice::from_ref(&scores), DEFAULT_STEP, |t, v| {
            let p = probabilities(t, v[0])?;
            main_loss(t, p, &labels)
        })
    }));
    let cf = away_from(&mut rng, &[3], -0.95, 0.95, &[], 0.0);
    cases.push(GradCase::new("cf_loss", move || {
        check_inputs(std::slice::from_ref(&cf), DEFAULT_STEP, |t, v| {
            let p = probabilities(t, v[0])?;
            cf_loss(t, p)
        })
    }));
    Ok(cases)
}

/// Model and frame of the end-to-end check: `dims.proposals` proposals
/// with captions, and a query of exactly `dims.tokens` words.
pub fn tiny_fixture(dims: &EndToEndDims) -> Result<(Hmsi, Sequence, SceneRecord, String)> {
    let grammar = AttributeGrammar::default();
    let params = SequenceParams {
        sequence_id: "gradcheck".into(),
        n_frames: 1,
        n_expressions: 2,
        counterfactuals_per_expression: 1,
        noise: NoiseParams {
            n_objects: dims.proposals.max(1),
            ..Default::default()
        },
    };
    let seq = generate_sequence(&grammar, &params, &mut ChaCha8Rng::seed_from_u64(3))?;
    let mut frame = seq.frames[0].clone();
    if frame.proposals.len() < dims.proposals {
        return Err(Error::Invalid(format!(
            "fixture frame has {} proposals, {} requested",
            frame.proposals.len(),
            dims.proposals
        )));
    }
    frame.proposals.truncate(dims.proposals);
    let words: Vec<&str> = ["red", "car", "moving", "on", "the", "left"].iter().copied().cycle().take(dims.tokens).collect();
    if words.is_empty() {
        return Err(Error::Invalid("query needs at least one token".into()));
    }
    let model = Hmsi::new(HmsiConfig {
        dim: dims.dim,
        heads: 2,
        levels: 2,
        points: 2,
        map_height: dims.map_side,
        map_width: dims.map_side,
        seed: 5,
        ..Default::default()
    })?;
    Ok((model, seq, frame, words.join(" ")))
}

fn end_to_end_cases(dims: &EndToEndDims) -> Result<Vec<GradCase>> {
    let (model, seq, frame, text) = tiny_fixture(dims)?;
    let visual = model.encode_frame(&frame)?;
    let model = Rc::new(model);
    let mut cases = Vec::new();

    let (m, v, f, q) = (model.clone(), visual.clone(), frame.clone(), text.clone());
    cases.push(GradCase::new("hmsi_end_to_end", move || {
        let errs = check_params(&m.params, DEFAULT_STEP, |t, b| {
            let ctx = m.frame_context(t, b, &v, &f.proposals)?;
            let qv = m.encode_query(t, b, &q)?;
            let s = m.score_query(t, b, &ctx, &qv, None)?;
            project(t, s.scores, 23)
        })?;
        Ok(errs.into_iter().map(|(_, e)| e).collect())
    }));

    cases.push(GradCase::new("hmsi_frame_loss", move || {
        let exprs: Vec<(&str, &crate::priors::Expression)> =
            seq.expressions.iter().map(|(k, e)| (k.as_str(), e)).collect();
        let cfs = exprs
            .iter()
            .map(|(k, _)| {
                seq.counterfactuals
                    .get(*k)
                    .and_then(|c| c.first())
                    .ok_or_else(|| Error::NotFound(format!("counterfactual of {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = frame_label_map(&frame, 0.5);
        let batch = build_query_batch(&frame, &exprs, &cfs, &labels)?;
        let errs = check_params(&model.params, DEFAULT_STEP, |t, b| {
            let ctx = model.frame_context(t, b, &visual, &frame.proposals)?;
            let out = frame_loss(&model, t, b, &ctx, &batch, true, CfPath::Subset)?
                .ok_or_else(|| Error::Invalid("fixture frame has no proposals".into()))?;
            Ok(out.loss)
        })?;
        Ok(errs.into_iter().map(|(_, e)| e).collect())
    }));
    Ok(cases)
}

/// Every registered check, end-to-end cases last.
pub fn registry(dims: &EndToEndDims) -> Result<Vec<GradCase>> {
    let mut cases = op_cases();
    cases.extend(layer_cases()?);
    cases.extend(end_to_end_cases(dims)?);
    Ok(cases)
}

/// A squaring op whose recorded VJP is off by a factor of 1.5.
pub fn corrupted_fixture() -> GradCase {
    GradCase::new("corrupted_square", || {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
        check_inputs(&[x], DEFAULT_STEP, |t, v| {
            let value = t.value(v[0]).map(|a| a * a);
            let sq = t.custom(
                "corrupted_square",
                &[v[0]],
                value,
                Rc::new(|ins, _out, g| {
                    let data = ins[0].data().iter().zip(g.data()).map(|(a, g)| 3.0 * a * g).collect();
                    vec![Tensor::new(ins[0].shape().to_vec(), data).expect("same shape")]
                }),
            )?;
            t.sum(sq)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_check_passes() {
        let report = run_default(&EndToEndDims::default()).unwrap();
        for r in &report.results {
            assert!(r.passed, "{}: {:e} {:?}", r.name, r.max_rel_error, r.error);
            assert!(r.checked > 0);
        }
        let names: Vec<&str> = report.results.iter().map(|r| r.name.as_str()).collect();
        for op in [
            "matmul", "bmm", "add", "sub", "mul", "add_row", "mul_row", "affine", "sum", "mean",
            "softmax_axis1", "transpose", "swap_axes01", "reshape", "slice_cols", "concat",
            "index_rows", "log", "clamp", "cosine_rows", "bilinear_sample", "deform_gather",
            "avg_pool2", "hmsi_end_to_end",
        ] {
            assert!(names.contains(&op), "{op} not registered");
        }
    }

    #[test]
    fn corrupted_rule_is_reported_by_name() {
        let mut cases = op_cases();
        cases.truncate(2);
        cases.push(corrupted_fixture());
        let report = run(&cases, DEFAULT_TOLERANCE);
        assert!(!report.all_passed());
        let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec!["corrupted_square"]);
        let text = report.to_text();
        let line = text.lines().find(|l| l.starts_with("corrupted_square")).unwrap();
        assert!(line.ends_with("FAIL"));
        assert!(report.failures().next().unwrap().max_rel_error > 0.1);
    }

    #[test]
    fn erroring_case_fails() {
        let report = run(&[GradCase::new("broken", || Err(Error::Invalid("boom".into())))], 1e-4);
        assert!(!report.all_passed());
        assert!(report.to_text().contains("ERROR"));
    }

    #[test]
    fn fixture_has_requested_sizes() {
        let dims = EndToEndDims::default();
        let (model, _, frame, text) = tiny_fixture(&dims).unwrap();
        assert_eq!(frame.proposals.len(), 2);
        assert_eq!(text.split_whitespace().count(), 3);
        assert_eq!(model.config.dim, 8);
        assert_eq!(model.encode_frame(&frame).unwrap().shape(), &[8, 8, 8]);
    }
}
