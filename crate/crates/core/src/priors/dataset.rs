use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::counterfactual::{parse_counterfactuals, CounterfactualQuery};
use super::grammar::Attributes;
use super::SceneRecord;
use crate::error::{Error, Result};

pub const FRAMES_FILE: &str = "frames.jsonl";
pub const EXPRESSIONS_FILE: &str = "expressions.json";
pub const COUNTERFACTUALS_FILE: &str = "counterfactuals.json";

const COORD_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub text: String,
    pub attributes: Attributes,
    /// frame id -> referred object ids.
    #[serde(default)]
    pub positives: BTreeMap<u32, Vec<u64>>,
}

impl Expression {
    pub fn positives_at(&self, frame_id: u32) -> &[u64] {
        self.positives
            .get(&frame_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<SceneRecord>,
    pub expressions: BTreeMap<String, Expression>,
    pub counterfactuals: BTreeMap<String, Vec<CounterfactualQuery>>,
}

impl Sequence {
    pub fn frame(&self, frame_id: u32) -> Option<&SceneRecord> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut lines = String::new();
        for f in &self.frames {
            let p = dir.join(FRAMES_FILE);
            lines.push_str(&serde_json::to_string(f).map_err(|e| Error::json(&p, e))?);
            lines.push('\n');
        }
        write_text(&dir.join(FRAMES_FILE), &lines)?;
        write_json(&dir.join(EXPRESSIONS_FILE), &self.expressions)?;
        write_json(&dir.join(COUNTERFACTUALS_FILE), &self.counterfactuals)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Invalid(format!("bad sequence directory {}", dir.display())))?
            .to_string();
        let frames_path = dir.join(FRAMES_FILE);
        let text = read_text(&frames_path)?;
        let mut frames = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            frames.push(serde_json::from_str(line).map_err(|e| Error::Record {
                index: i,
                msg: e.to_string(),
            })?);
        }
        let ex_path = dir.join(EXPRESSIONS_FILE);
        let expressions =
            serde_json::from_str(&read_text(&ex_path)?).map_err(|e| Error::json(&ex_path, e))?;
        let cf_path = dir.join(COUNTERFACTUALS_FILE);
        let counterfactuals = if cf_path.exists() {
            parse_counterfactuals(&read_text(&cf_path)?)?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            id,
            frames,
            expressions,
            counterfactuals,
        })
    }
}

/// A set of sequences stored one directory each under a root.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for s in &self.sequences {
            s.write(root.join(&s.id))?;
        }
        Ok(())
    }

    /// Reads every sequence directory under `root` in name order. No
    /// invariant checking beyond parsing; see [`validate_dir`].
    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let sequences = sequence_dirs(root.as_ref())?
            .iter()
            .map(Sequence::read)
            .collect::<Result<_>>()?;
        Ok(Self { sequences })
    }

    /// Validates first and refuses a dataset with errors.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let report = validate_dir(root.as_ref())?;
        if !report.is_ok() {
            for issue in &report.errors {
                log::error!("{issue}");
            }
            return Err(Error::Validation(report.errors.len()));
        }
        Self::read(root)
    }

    pub fn n_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(FRAMES_FILE).exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationIssue {
    pub file: String,
    /// 1-based line for JSONL files, 0-based record index otherwise.
    pub record: Option<usize>,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record {
            Some(r) => write!(f, "{}:{}: {}", self.file, r, self.message),
            None => write!(f, "{}: {}", self.file, self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<ValidationIssue>,
    pub sequences: usize,
    pub frames: usize,
    pub expressions: usize,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, file: &Path, record: Option<usize>, message: impl Into<String>) {
        self.errors.push(ValidationIssue {
            file: file.display().to_string(),
            record,
            message: message.into(),
        });
    }

    fn warn(&mut self, file: &Path, record: Option<usize>, message: impl Into<String>) {
        self.warnings.push(ValidationIssue {
            file: file.display().to_string(),
            record,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        write!(
            f,
            "{} sequences, {} frames, {} expressions: {} errors, {} warnings",
            self.sequences,
            self.frames,
            self.expressions,
            self.errors.len(),
            self.warnings.len()
        )
    }
}

fn box_problem(b: &crate::matching::BBox) -> Option<String> {
    let vals = [b.cx, b.cy, b.w, b.h];
    if vals.iter().any(|v| !v.is_finite()) {
        return Some("non-finite box".into());
    }
    if b.w < 0.0 || b.h < 0.0 {
        return Some("negative box size".into());
    }
    if [b.x1(), b.y1(), b.x2(), b.y2()]
        .iter()
        .any(|v| *v < -COORD_TOL || *v > 1.0 + COORD_TOL)
    {
        return Some("box outside the normalized image".into());
    }
    None
}

/// Schema and cross-reference checks over a dataset directory. I/O failure
/// on the root is an error; everything else lands in the report.
pub fn validate_dir(root: &Path) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    for dir in sequence_dirs(root)? {
        validate_sequence(&dir, &mut report);
    }
    if report.sequences == 0 {
        report.warn(root, None, "no sequence directories found");
    }
    Ok(report)
}

fn validate_sequence(dir: &Path, report: &mut ValidationReport) {
    report.sequences += 1;
    let seq_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let frames_path = dir.join(FRAMES_FILE);
    let mut frames: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
    let mut frame_positives: Vec<(usize, u32, BTreeMap<String, Vec<u64>>)> = Vec::new();
    match std::fs::read_to_string(&frames_path) {
        Err(e) => report.error(&frames_path, None, e.to_string()),
        Ok(text) => {
            for (i, line) in text.lines().enumerate() {
                let lineno = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SceneRecord = match serde_json::from_str(line) {
                    Ok(r) => r,
                    Err(e) => {
                        report.error(&frames_path, Some(lineno), e.to_string());
                        continue;
                    }
                };
                report.frames += 1;
                if rec.sequence_id != seq_id {
                    report.error(
                        &frames_path,
                        Some(lineno),
                        format!(
                            "sequence_id `{}` does not match directory `{seq_id}`",
                            rec.sequence_id
                        ),
                    );
                }
                if frames.contains_key(&rec.frame_id) {
                    report.error(
                        &frames_path,
                        Some(lineno),
                        format!("duplicate frame_id {}", rec.frame_id),
                    );
                }
                if let Some((&last, _)) = frames.iter().next_back() {
                    if rec.frame_id < last {
                        report.error(&frames_path, Some(lineno), "frames out of order");
                    }
                }
                for (k, p) in rec.proposals.iter().enumerate() {
                    if let Some(msg) = box_problem(&p.bbox) {
                        report.error(&frames_path, Some(lineno), format!("proposal {k}: {msg}"));
                    }
                    if p.caption.trim().is_empty() {
                        report.error(
                            &frames_path,
                            Some(lineno),
                            format!("proposal {k}: empty caption"),
                        );
                    }
                    if !(0.0..=1.0).contains(&p.detector_score) {
                        report.error(
                            &frames_path,
                            Some(lineno),
                            format!("proposal {k}: detector_score outside [0, 1]"),
                        );
                    }
                }
                let mut ids = BTreeSet::new();
                for o in &rec.gt_objects {
                    if !ids.insert(o.object_id) {
                        report.error(
                            &frames_path,
                            Some(lineno),
                            format!("duplicate object_id {}", o.object_id),
                        );
                    }
                    if let Some(msg) = box_problem(&o.bbox) {
                        report.error(
                            &frames_path,
                            Some(lineno),
                            format!("object {}: {msg}", o.object_id),
                        );
                    }
                }
                for (eid, pos) in &rec.positives {
                    for id in pos {
                        if !ids.contains(id) {
                            report.error(
                                &frames_path,
                                Some(lineno),
                                format!("positives for `{eid}` reference unknown object_id {id}"),
                            );
                        }
                    }
                }
                frame_positives.push((lineno, rec.frame_id, rec.positives));
                frames.insert(rec.frame_id, ids);
            }
        }
    }

    let ex_path = dir.join(EXPRESSIONS_FILE);
    let expressions: BTreeMap<String, Expression> = match std::fs::read_to_string(&ex_path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(m) => m,
        Err(msg) => {
            report.error(&ex_path, None, msg);
            BTreeMap::new()
        }
    };
    report.expressions += expressions.len();
    for (i, (eid, expr)) in expressions.iter().enumerate() {
        if expr.text.trim().is_empty() {
            report.error(&ex_path, Some(i), format!("`{eid}`: empty text"));
        }
        for (fid, ids) in &expr.positives {
            match frames.get(fid) {
                None => report.error(
                    &ex_path,
                    Some(i),
                    format!("`{eid}`: positives reference unknown frame {fid}"),
                ),
                Some(known) => {
                    for id in ids {
                        if !known.contains(id) {
                            report.error(
                                &ex_path,
                                Some(i),
                                format!("`{eid}`: frame {fid} references unknown object_id {id}"),
                            );
                        }
                    }
                }
            }
        }
    }
    for (lineno, fid, positives) in &frame_positives {
        for (eid, ids) in positives {
            match expressions.get(eid) {
                None => report.error(
                    &frames_path,
                    Some(*lineno),
                    format!("positives for unknown expression `{eid}`"),
                ),
                Some(e) if e.positives_at(*fid) != ids.as_slice() => report.warn(
                    &frames_path,
                    Some(*lineno),
                    format!("positives for `{eid}` disagree with {EXPRESSIONS_FILE}"),
                ),
                Some(_) => {}
            }
        }
    }

    let cf_path = dir.join(COUNTERFACTUALS_FILE);
    if !cf_path.exists() {
        report.warn(
            &cf_path,
            None,
            "missing; counterfactuals will be generated online",
        );
        return;
    }
    let parsed: serde_json::Result<serde_json::Value> = std::fs::read_to_string(&cf_path)
        .map_err(serde_json::Error::io)
        .and_then(|t| serde_json::from_str(&t));
    let records: Vec<CounterfactualQuery> = match parsed {
        Err(e) => {
            report.error(&cf_path, None, e.to_string());
            return;
        }
        Ok(serde_json::Value::Object(map)) => {
            let mut out = Vec::new();
            for (eid, list) in map {
                match serde_json::from_value::<Vec<CounterfactualQuery>>(list) {
                    Ok(l) => {
                        for q in &l {
                            if q.source_expression_id != eid {
                                report.error(
                                    &cf_path,
                                    Some(out.len()),
                                    format!(
                                        "record filed under `{eid}` names `{}`",
                                        q.source_expression_id
                                    ),
                                );
                            }
                        }
                        out.extend(l);
                    }
                    Err(e) => report.error(&cf_path, None, format!("`{eid}`: {e}")),
                }
            }
            out
        }
        Ok(v) => match serde_json::from_value(v) {
            Ok(l) => l,
            Err(e) => {
                report.error(&cf_path, None, e.to_string());
                return;
            }
        },
    };
    for (i, q) in records.iter().enumerate() {
        if let Err(msg) = q.check() {
            report.error(&cf_path, Some(i), msg);
            continue;
        }
        match expressions.get(&q.source_expression_id) {
            None => report.error(
                &cf_path,
                Some(i),
                format!("unknown source expression `{}`", q.source_expression_id),
            ),
            Some(e) => {
                if !q.is_single_edit_of(&e.text) {
                    report.error(
                        &cf_path,
                        Some(i),
                        format!("`{}` is not a single-slot edit of `{}`", q.text, e.text),
                    );
                }
                if e.attributes.get(&q.perturbed_slot) != Some(&q.original_value) {
                    report.error(
                        &cf_path,
                        Some(i),
                        format!(
                            "original_value `{}` is not the expression's `{}`",
                            q.original_value, q.perturbed_slot
                        ),
                    );
                }
            }
        }
    }
}
