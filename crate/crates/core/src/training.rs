//! Per-frame optimization loop, checkpoints and the loss log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmsi::{Hmsi, HmsiConfig};
use crate::losses::{
    build_query_batch, frame_label_map, frame_loss, CfPath, DEFAULT_IOU_THRESHOLD,
    DEFAULT_N_QUERIES,
};
use crate::priors::{perturb_expression, AttributeGrammar, CounterfactualQuery, Dataset, Expression};
use crate::tensor::container::TensorFile;
use crate::tensor::optim::{AdamState, AdamW, DEFAULT_LR};
use crate::tensor::{Precision, Tape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub n_queries: usize,
    pub seed: u64,
    pub precision: Precision,
    pub cf_enabled: bool,
    pub esi_enabled: bool,
    pub iou_threshold: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm bound; off when `None`.
    pub grad_clip: Option<f64>,
    pub model: HmsiConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamW::default();
        Self {
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            n_queries: DEFAULT_N_QUERIES,
            seed: DEFAULT_SEED,
            precision: Precision::F32,
            cf_enabled: true,
            esi_enabled: true,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            grad_clip: None,
            model: HmsiConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.n_queries == 0 {
            return Err(Error::Invalid("epochs and n_queries must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Invalid(format!(
                "iou_threshold {} must lie in (0, 1)",
                self.iou_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid("weight_decay must be non-negative".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0 && c.is_finite())) {
            return Err(Error::Invalid("grad_clip must be positive".into()));
        }
        self.model_config().validate()
    }

    /// Network configuration with the seed and caption switch applied.
    pub fn model_config(&self) -> HmsiConfig {
        HmsiConfig {
            seed: self.seed,
            esi: self.esi_enabled,
            ..self.model.clone()
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    fn echo(&self) -> Vec<(&'static str, f64)> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        vec![
            ("train.epochs", self.epochs as f64),
            ("train.lr", self.lr),
            ("train.n_queries", self.n_queries as f64),
            ("train.seed", self.seed as f64),
            ("train.precision", self.precision.dtype_code() as f64),
            ("train.cf_enabled", flag(self.cf_enabled)),
            ("train.esi_enabled", flag(self.esi_enabled)),
            ("train.iou_threshold", self.iou_threshold),
            ("train.weight_decay", self.weight_decay),
            ("train.beta1", self.beta1),
            ("train.beta2", self.beta2),
            ("train.grad_clip", self.grad_clip.unwrap_or(0.0)),
            ("train.threads", 1.0),
        ]
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub main: f64,
    pub counterfactual: f64,
    pub total: f64,
    /// Frames that contributed loss terms.
    pub frames: usize,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }
}

pub fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", entry.to_json_line()).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                index: i,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Model, optimizer moments and the number of completed epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Hmsi,
    pub adam: AdamState,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    epoch: usize,
    step: u64,
    init: String,
    threads: usize,
    config: TrainConfig,
}

const INIT_NOTE: &str = "linear weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0";

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model: Hmsi::new(config.model_config())?,
            adam: AdamState::default(),
            epoch: 0,
        })
    }

    /// Everything stored in 64-bit so a reload resumes bit-exactly.
    pub fn to_container(&self, config: &TrainConfig) -> TensorFile {
        let mut file = self.model.to_container(Precision::F64);
        for (name, m) in &self.adam.m {
            file.insert(format!("optim.m.{name}"), Precision::F64, m.clone());
        }
        for (name, v) in &self.adam.v {
            file.insert(format!("optim.v.{name}"), Precision::F64, v.clone());
        }
        let scalars = [
            ("checkpoint.version", CHECKPOINT_VERSION as f64),
            ("train.epoch", self.epoch as f64),
            ("train.step", self.adam.step as f64),
        ];
        for (k, v) in scalars.into_iter().chain(config.echo()) {
            file.insert(k, Precision::F64, Tensor::scalar(v));
        }
        file
    }

    pub fn from_container(file: &TensorFile) -> Result<Self> {
        let version = file.get("checkpoint.version")?.item() as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let model = Hmsi::from_container(file)?;
        let mut adam = AdamState {
            step: file.get("train.step")?.item() as u64,
            ..AdamState::default()
        };
        for p in model.params.iter().filter(|p| !p.frozen) {
            for (prefix, map) in [("optim.m", &mut adam.m), ("optim.v", &mut adam.v)] {
                let key = format!("{prefix}.{}", p.name);
                if file.contains(&key) {
                    map.insert(p.name.clone(), file.get(&key)?.clone());
                }
            }
        }
        Ok(Self {
            model,
            adam,
            epoch: file.get("train.epoch")?.item() as usize,
        })
    }

    /// Writes the container and a readable `<path>.json` config echo.
    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_container(config).write(path)?;
        let sidecar = Sidecar {
            format_version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            step: self.adam.step,
            init: INIT_NOTE.into(),
            threads: 1,
            config: config.clone(),
        };
        let side = sidecar_path(path);
        let mut text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&side, e))?;
        text.push('\n');
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorFile::read(path)?)
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Training configuration echoed next to a checkpoint.
pub fn load_sidecar_config(checkpoint: &Path) -> Result<TrainConfig> {
    let side = sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let s: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    Ok(s.config)
}

struct FrameData {
    visual: Tensor,
    label_map: BTreeMap<usize, u64>,
}

/// Trains from initialization.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<(TrainState, Vec<EpochLog>)> {
    resume(config, dataset, TrainState::init(config)?, on_epoch)
}

/// Continues `state` up to `config.epochs`. Epoch `e` draws all of its
/// randomness from stream `e` of the seeded generator, so a resumed run
/// matches an uninterrupted one.
pub fn resume(
    config: &TrainConfig,
    dataset: &Dataset,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<(TrainState, Vec<EpochLog>)> {
    config.validate()?;
    let grammar = AttributeGrammar::default();
    let frames: Vec<Vec<FrameData>> = dataset
        .sequences
        .iter()
        .map(|s| {
            s.frames
                .iter()
                .map(|f| {
                    Ok(FrameData {
                        visual: state.model.encode_frame(f)?,
                        label_map: frame_label_map(f, config.iou_threshold),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let optimizer = config.optimizer();
    let mut log = Vec::new();
    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let entry = run_epoch(config, dataset, &frames, &grammar, &optimizer, &mut state, epoch)?;
        state.epoch = epoch;
        log::info!(
            "epoch {epoch}: main {:.6} cf {:.6} total {:.6}",
            entry.main,
            entry.counterfactual,
            entry.total
        );
        on_epoch(&entry, &state)?;
        log.push(entry);
    }
    Ok((state, log))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One counterfactual per expression: drawn from the dataset's list when
/// present, generated from the grammar otherwise.
fn pick_counterfactual<R: Rng>(
    id: &str,
    e: &Expression,
    listed: Option<&Vec<CounterfactualQuery>>,
    grammar: &AttributeGrammar,
    rng: &mut R,
) -> Result<CounterfactualQuery> {
    match listed {
        Some(list) if !list.is_empty() => Ok(list[rng.gen_range(0..list.len())].clone()),
        _ => perturb_expression(id, &e.text, &e.attributes, grammar, rng),
    }
}

fn run_epoch(
    config: &TrainConfig,
    dataset: &Dataset,
    frames: &[Vec<FrameData>],
    grammar: &AttributeGrammar,
    optimizer: &AdamW,
    state: &mut TrainState,
    epoch: usize,
) -> Result<EpochLog> {
    let mut rng = epoch_rng(config.seed, epoch);
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(s, fs)| (0..fs.len()).map(move |f| (s, f)))
        .collect();
    order.shuffle(&mut rng);

    let mut chosen: Vec<BTreeMap<&str, CounterfactualQuery>> = Vec::new();
    for seq in &dataset.sequences {
        let mut m = BTreeMap::new();
        for (id, e) in &seq.expressions {
            let cf = if config.cf_enabled {
                pick_counterfactual(id, e, seq.counterfactuals.get(id), grammar, &mut rng)?
            } else {
                // Never scored; keeps the batch layout uniform.
                CounterfactualQuery {
                    text: e.text.clone(),
                    source_expression_id: id.clone(),
                    perturbed_slot: String::new(),
                    original_value: String::new(),
                    new_value: String::new(),
                }
            };
            m.insert(id.as_str(), cf);
        }
        chosen.push(m);
    }

    let precision = config.precision;
    let (mut sum_main, mut sum_cf, mut sum_total, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (s, f) in order {
        let seq = &dataset.sequences[s];
        let record = &seq.frames[f];
        let data = &frames[s][f];
        let all: Vec<(&str, &Expression)> =
            seq.expressions.iter().map(|(k, e)| (k.as_str(), e)).collect();
        let exprs: Vec<(&str, &Expression)> = if all.len() > config.n_queries {
            let mut idx = index::sample(&mut rng, all.len(), config.n_queries).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        } else {
            all
        };
        let cfs: Vec<&CounterfactualQuery> = exprs.iter().map(|(id, _)| &chosen[s][id]).collect();
        let batch = build_query_batch(record, &exprs, &cfs, &data.label_map)?;

        let tape = Tape::new(precision);
        let bound = state.model.params.bind(&tape)?;
        let ctx = state
            .model
            .frame_context(&tape, &bound, &data.visual, &record.proposals)?;
        let Some(out) = frame_loss(
            &state.model,
            &tape,
            &bound,
            &ctx,
            &batch,
            config.cf_enabled,
            CfPath::Subset,
        )?
        else {
            continue;
        };
        if !out.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                frame: format!("{}/{}", record.sequence_id, record.frame_id),
            });
        }
        let grads = tape.backward(out.loss)?;
        let mut grads = state.model.params.gradients(&bound, &grads);
        if let Some(max) = config.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        optimizer.step(&mut state.model.params, &grads, &mut state.adam, precision)?;
        sum_main += out.breakdown.main;
        sum_cf += out.breakdown.counterfactual;
        sum_total += out.breakdown.total;
        count += 1;
    }
    let mean = |x: f64| if count == 0 { 0.0 } else { x / count as f64 };
    Ok(EpochLog {
        epoch,
        main: mean(sum_main),
        counterfactual: mean(sum_cf),
        total: mean(sum_total),
        frames: count,
    })
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = max / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{generate_sequence, NoiseParams, SequenceParams};

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 1e-3,
            n_queries: 3,
            precision: Precision::F64,
            model: HmsiConfig {
                dim: 8,
                heads: 2,
                points: 2,
                map_height: 8,
                map_width: 8,
                ..HmsiConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        let params = SequenceParams {
            sequence_id: "s0".into(),
            n_frames: 3,
            n_expressions: 4,
            counterfactuals_per_expression: 2,
            noise: NoiseParams {
                n_objects: 3,
                ..NoiseParams::default()
            },
        };
        let seq = generate_sequence(
            &AttributeGrammar::default(),
            &params,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        Dataset {
            sequences: vec![seq],
        }
    }

    #[test]
    fn defaults_echo_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.lr, c.n_queries, c.seed), (30, 1e-4, 10, 42));
        assert_eq!((c.beta1, c.beta2, c.weight_decay), (0.9, 0.999, 0.01));
        assert!(c.grad_clip.is_none());
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { n_queries: 0, ..c }.validate().is_err());
    }

    #[test]
    fn empty_dataset_leaves_initialization() {
        let config = tiny_config(1);
        let init = TrainState::init(&config).unwrap();
        let (state, log) = train(&config, &Dataset { sequences: vec![] }, |_, _| Ok(())).unwrap();
        assert_eq!(state.model.params, init.model.params);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].frames, 0);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let config = tiny_config(1);
        let (state, _) = train(&config, &tiny_dataset(), |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.coal"), dir.path().join("b.coal"));
        state.save(&a, &config).unwrap();
        TrainState::load(&a).unwrap().save(&b, &config).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_sidecar_config(&a).unwrap(), config);

        let mut bytes = std::fs::read(&a).unwrap();
        bytes[0] = b'X';
        std::fs::write(&a, bytes).unwrap();
        assert!(matches!(TrainState::load(&a), Err(Error::Format(_))));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = tiny_dataset();
        let full = tiny_config(4);
        let (straight, log_a) = train(&full, &data, |_, _| Ok(())).unwrap();

        let (half, mut log_b) = train(&tiny_config(2), &data, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.coal");
        half.save(&path, &full).unwrap();
        let (resumed, rest) = resume(&full, &data, TrainState::load(&path).unwrap(), |_, _| Ok(())).unwrap();
        log_b.extend(rest);

        assert_eq!(log_a, log_b);
        assert_eq!(resumed.model.params, straight.model.params);
        assert_eq!(resumed.adam, straight.adam);
    }

    #[test]
    fn training_reduces_loss_and_logs_consistently() {
        let config = tiny_config(6);
        let mut seen = Vec::new();
        let (_, log) = train(&config, &tiny_dataset(), |e, s| {
            seen.push((e.epoch, s.epoch));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, (1..=6).map(|e| (e, e)).collect::<Vec<_>>());
        for e in &log {
            assert!((e.total - (e.main + e.counterfactual)).abs() < 1e-7);
            assert_eq!(e.frames, 3);
        }
        assert!(log[5].total < log[0].total);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.jsonl");
        for e in &log {
            append_log(&p, e).unwrap();
        }
        assert_eq!(read_log(&p).unwrap(), log);
    }

    #[test]
    fn disabling_counterfactuals_zeroes_the_push_term() {
        let config = TrainConfig {
            cf_enabled: false,
            ..tiny_config(1)
        };
        let (_, log) = train(&config, &tiny_dataset(), |_, _| Ok(())).unwrap();
        assert_eq!(log[0].counterfactual, 0.0);
        assert_eq!(log[0].total, log[0].main);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::vector(vec![3.0, 4.0]))]);
        clip_global_norm(&mut g, 1.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-12);
        clip_global_norm(&mut g, 10.0);
        assert!((g["a"].data()[1] - 0.8).abs() < 1e-12);
    }
}
