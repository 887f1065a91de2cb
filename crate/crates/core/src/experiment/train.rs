//! Training loop, evaluation and their CSV logs.

use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::schedule::{lr_schedule, ScheduleKind};
use super::{io_err, ExperimentError};
use crate::config::{ConfigDoc, ConfigError, ConfigReader};
use crate::data::{iterate_batches, load_prepared, sample_seed, PreparedSet, Regions};
use crate::geometry::angular_error_pitchyaw;
use crate::nn::{ArchKind, Binder, Mode, Model, ModelConfig, ModelInput};
use crate::scalar::Scalar;
use crate::tensor::Tape;

pub const EPOCH_LOG_HEADER: [&str; 5] = ["epoch", "lr", "train_loss", "train_err_deg", "val_err_deg"];
/// Batch size of every evaluation pass, so logged and re-evaluated errors agree.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Prepared data root holding `train/` and optionally `val/`.
    pub data: Option<PathBuf>,
    pub epochs: usize,
    pub base_lr: f64,
    pub schedule: ScheduleKind,
    pub batch_size: usize,
    pub seed: u64,
}

fn default_schedule(model: &ModelConfig) -> ScheduleKind {
    match model.kind() {
        ArchKind::PoolFormer => ScheduleKind::Transformer,
        _ => ScheduleKind::Cnn,
    }
}

impl TrainConfig {
    /// Defaults of the schedule matching the architecture family.
    pub fn new(model: ModelConfig) -> Self {
        let schedule = default_schedule(&model);
        Self::with_schedule(model, schedule)
    }

    pub fn with_schedule(model: ModelConfig, schedule: ScheduleKind) -> Self {
        Self {
            model,
            data: None,
            epochs: schedule.default_epochs(),
            base_lr: schedule.default_lr(),
            schedule,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn write_config(&self, doc: &mut ConfigDoc) {
        let s = doc.push_section("train");
        if let Some(d) = &self.data {
            s.set("data", d.display());
        }
        s.set("schedule", self.schedule)
            .set("epochs", self.epochs)
            .set("lr", self.base_lr)
            .set("batch_size", self.batch_size)
            .set("seed", self.seed);
        self.model.write_config(doc);
    }

    pub fn to_config_string(&self) -> String {
        let mut doc = ConfigDoc::default();
        self.write_config(&mut doc);
        doc.render()
    }

    /// Reads `[train]` and the model sections; epochs and lr default from the schedule.
    pub fn read_config(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        let model = ModelConfig::read_config(r)?;
        let schedule = r.get_or("train", "schedule", default_schedule(&model))?;
        Ok(Self {
            data: r.opt::<PathBuf>("train", "data")?,
            epochs: r.get_or("train", "epochs", schedule.default_epochs())?,
            base_lr: r.get_or("train", "lr", schedule.default_lr())?,
            batch_size: r.get_or("train", "batch_size", 32)?,
            seed: r.get_or("train", "seed", 0)?,
            schedule,
            model,
        })
    }

    pub fn from_config_str(text: &str) -> Result<Self, ConfigError> {
        let doc = ConfigDoc::parse(text)?;
        let mut r = doc.reader();
        let c = Self::read_config(&mut r)?;
        r.finish(None)?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err_deg: f64,
    pub val_err_deg: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model<f32>,
    pub log: Vec<EpochRecord>,
}

impl TrainRun {
    pub fn meta(&self, seed: u64) -> CheckpointMeta {
        let last = self.log.last();
        CheckpointMeta {
            epoch: last.map_or(0, |r| r.epoch as u32 + 1),
            seed,
            final_lr: last.map_or(0.0, |r| r.lr),
        }
    }
}

/// Checks that prepared inputs match what the model consumes.
pub fn check_compatible(model: &ModelConfig, set: &PreparedSet) -> Result<(), ExperimentError> {
    let bad = |m: String| Err(ExperimentError::Incompatible(m));
    let want = match model.is_multi_region() {
        true => Regions::Multi,
        false => Regions::Face,
    };
    if set.config.regions != want {
        return bad(format!("model needs {want} inputs, data was prepared as {}", set.config.regions));
    }
    if set.config.resolution != model.input_resolution() {
        return bad(format!(
            "model input is {0}x{0}, data was prepared at {1}x{1}",
            model.input_resolution(),
            set.config.resolution
        ));
    }
    if let Some(eye) = model.eye_resolution() {
        if eye != set.config.eye_resolution {
            return bad(format!(
                "eye branch input is {eye}x{eye}, eye patches were prepared at {0}x{0}",
                set.config.eye_resolution
            ));
        }
    }
    Ok(())
}

fn bind_inputs<T: Scalar>(tape: &mut Tape<T>, set: &PreparedSet, indices: &[usize]) -> (ModelInput, crate::Var) {
    let b = set.batch::<T>(indices);
    let face = tape.constant(b.face);
    let input = match b.eyes {
        Some((l, r)) => ModelInput::Regions {
            face,
            left: tape.constant(l),
            right: tape.constant(r),
        },
        None => ModelInput::Single(face),
    };
    (input, tape.constant(b.labels))
}

/// Shuffle seed of one training epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    sample_seed(seed, 0x5eed, epoch)
}

/// Trains from scratch on in-memory prepared sets. Every number in the log
/// is a pure function of the config and the data.
pub fn train_model(cfg: &TrainConfig, train: &PreparedSet, val: Option<&PreparedSet>) -> Result<TrainRun, ExperimentError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ExperimentError::Schedule("epochs and batch size must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(ExperimentError::Empty);
    }
    check_compatible(&cfg.model, train)?;
    if let Some(v) = val {
        check_compatible(&cfg.model, v)?;
    }
    let mut model = Model::<f32>::build(&cfg.model, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.schedule, epoch, cfg.base_lr, cfg.epochs)?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (batch, idx) in iterate_batches(train.len(), cfg.batch_size, epoch_seed(cfg.seed, epoch))
            .iter()
            .enumerate()
        {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let (input, labels) = bind_inputs(&mut tape, train, idx);
            let pass = model.forward(&mut tape, &mut binder, input, Mode::Train)?;
            let loss = tape.l1_loss(pass.output, labels)?;
            let value = tape.data(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(ExperimentError::NonFinite { epoch, batch });
            }
            tape.backward(loss)?;
            model.adam_update(&binder, &tape, lr)?;
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_err_deg: evaluate(&mut model, train)?.mean_deg,
            val_err_deg: val.map(|v| evaluate(&mut model, v).map(|e| e.mean_deg)).transpose()?,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.5} train {:.3} deg{}",
            record.train_loss,
            record.train_err_deg,
            record.val_err_deg.map(|v| format!(" val {v:.3} deg")).unwrap_or_default()
        );
        log.push(record);
    }
    Ok(TrainRun { model, log })
}

/// Trains on `<data>/train`, validating on a non-empty `<data>/val`, and
/// writes `epoch_log.csv`, `train.cfg` and `model.ckpt` into `out`.
pub fn train(cfg: &TrainConfig, out: &Path) -> Result<TrainRun, ExperimentError> {
    let root = cfg
        .data
        .as_ref()
        .ok_or_else(|| ExperimentError::Config(ConfigError::Missing {
            section: "train".into(),
            key: "data".into(),
        }))?;
    // Architecture problems surface before any data is read.
    Model::<f32>::build(&cfg.model, cfg.seed)?;
    let train_set = load_prepared(&root.join("train"))?;
    let val_dir = root.join("val");
    let val_set = match val_dir.join("manifest.csv").is_file() {
        true => Some(load_prepared(&val_dir)?).filter(|v| !v.is_empty()),
        false => None,
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let run = train_model(cfg, &train_set, val_set.as_ref())?;
    write_epoch_log(&out.join("epoch_log.csv"), &run.log)?;
    let cfg_path = out.join("train.cfg");
    fs::write(&cfg_path, cfg.to_config_string()).map_err(io_err(&cfg_path))?;
    save_checkpoint(&run.model, &run.meta(cfg.seed), &out.join("model.ckpt"))?;
    Ok(run)
}

fn table_err(path: &Path) -> impl Fn(String) -> ExperimentError + '_ {
    move |reason| ExperimentError::Table {
        path: path.display().to_string(),
        reason,
    }
}

/// Writes the per-epoch log; floats use the shortest exact representation.
pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<(), ExperimentError> {
    let fail = table_err(path);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| fail(e.to_string()))?;
    w.write_record(EPOCH_LOG_HEADER).map_err(|e| fail(e.to_string()))?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.train_err_deg.to_string(),
            r.val_err_deg.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| fail(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>, ExperimentError> {
    let fail = table_err(path);
    let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| fail(e.to_string()))?.iter().map(String::from).collect();
    if header != EPOCH_LOG_HEADER {
        return Err(fail(format!("unexpected header `{}`", header.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let num = |k: usize| -> Result<f64, ExperimentError> {
            rec[k].parse().map_err(|e| fail(format!("row {}: {}: {e}", i + 1, EPOCH_LOG_HEADER[k])))
        };
        out.push(EpochRecord {
            epoch: rec[0].parse().map_err(|e| fail(format!("row {}: epoch: {e}", i + 1)))?,
            lr: num(1)?,
            train_loss: num(2)?,
            train_err_deg: num(3)?,
            val_err_deg: if rec[4].is_empty() { None } else { Some(num(4)?) },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleError {
    pub name: String,
    pub label: (f64, f64),
    pub prediction: (f64, f64),
    pub err_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub samples: Vec<SampleError>,
}

/// Angular error of every sample with the model in eval mode.
pub fn evaluate(model: &mut Model<f32>, set: &PreparedSet) -> Result<Evaluation, ExperimentError> {
    if set.is_empty() {
        return Err(ExperimentError::Empty);
    }
    check_compatible(model.config(), set)?;
    let mut samples = Vec::with_capacity(set.len());
    let order: Vec<usize> = (0..set.len()).collect();
    for idx in order.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let (input, _) = bind_inputs(&mut tape, set, idx);
        let pass = model.forward(&mut tape, &mut binder, input, Mode::Eval)?;
        let out = tape.data(pass.output);
        for (k, &i) in idx.iter().enumerate() {
            let s = &set.samples[i];
            let prediction = (out[2 * k].as_f64(), out[2 * k + 1].as_f64());
            let label = (s.pitch, s.yaw);
            samples.push(SampleError {
                name: s.name.clone(),
                label,
                prediction,
                err_deg: angular_error_pitchyaw(prediction, label),
            });
        }
    }
    let mut errs: Vec<f64> = samples.iter().map(|s| s.err_deg).collect();
    let mean_deg = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(f64::total_cmp);
    let mid = errs.len() / 2;
    let median_deg = if errs.len() % 2 == 1 {
        errs[mid]
    } else {
        (errs[mid - 1] + errs[mid]) / 2.0
    };
    Ok(Evaluation {
        mean_deg,
        median_deg,
        samples,
    })
}

/// Per-sample CSV: `name,pitch,yaw,pred_pitch,pred_yaw,err_deg` (radians, degrees).
pub fn write_sample_errors(path: &Path, eval: &Evaluation) -> Result<(), ExperimentError> {
    let fail = table_err(path);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| fail(e.to_string()))?;
    w.write_record(["name", "pitch", "yaw", "pred_pitch", "pred_yaw", "err_deg"])
        .map_err(|e| fail(e.to_string()))?;
    for s in &eval.samples {
        w.write_record([
            s.name.clone(),
            s.label.0.to_string(),
            s.label.1.to_string(),
            s.prediction.0.to_string(),
            s.prediction.1.to_string(),
            s.err_deg.to_string(),
        ])
        .map_err(|e| fail(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}
