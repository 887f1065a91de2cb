//! Synthetic gaze datasets: rendering, on-disk layout, normalization into
//! model inputs, and seeded batching.
//!
//! A dataset root holds `images/*.pgm`, `manifest.csv` with header
//! `filename,pitch,yaw,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz`
//! (radians, millimeters) and `split.txt` naming the split.

mod prepare;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use prepare::{
    load_prepared, prepare_dataset, prepare_inputs, prepare_sample, write_prepared, PrepareConfig, PreparedSample,
    PreparedSet, Regions,
};
pub use synth::{
    frontal_pose, iris_shift, oracle_gaze, synth_render, PoseJitter, Render, SynthConfig,
};

use crate::config::{ConfigDoc, ConfigError};
use crate::geometry::{HeadPose, Mat3, Vec3};
use crate::raster::RasterError;

pub const MANIFEST_HEADER: [&str; 15] = [
    "filename", "pitch", "yaw", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "tx", "ty", "tz",
];
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const SYNTH_CONFIG_FILE: &str = "synth.cfg";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("oracle failed: {0}")]
    Oracle(String),
    #[error("{path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("missing image file {0}")]
    MissingImage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error("dataset is empty")]
    Empty,
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeSample {
    pub filename: String,
    pub pitch: f64,
    pub yaw: f64,
    pub pose: HeadPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: String,
    pub samples: Vec<GazeSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_path(&self, sample: &GazeSample) -> PathBuf {
        self.root.join("images").join(&sample.filename)
    }
}

pub fn write_manifest(path: &Path, samples: &[GazeSample]) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| DataError::Manifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let fail = |e: csv::Error| DataError::Manifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    w.write_record(MANIFEST_HEADER).map_err(fail)?;
    for s in samples {
        let r = &s.pose.rotation;
        let t = &s.pose.face_center;
        let mut row = vec![s.filename.clone(), s.pitch.to_string(), s.yaw.to_string()];
        for i in 0..3 {
            for j in 0..3 {
                row.push(r[(i, j)].to_string());
            }
        }
        row.extend([t.x, t.y, t.z].iter().map(f64::to_string));
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<GazeSample>, DataError> {
    let shown = path.display().to_string();
    let bad = |reason: String| DataError::Manifest {
        path: shown.clone(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new().from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(bad(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |k: usize| -> Result<f64, DataError> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: column {}: {e}", i + 1, MANIFEST_HEADER[k])))
        };
        let mut m = Mat3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                m[(a, b)] = num(3 + a * 3 + b)?;
            }
        }
        out.push(GazeSample {
            filename: rec[0].to_string(),
            pitch: num(1)?,
            yaw: num(2)?,
            pose: HeadPose {
                rotation: m,
                face_center: Vec3::new(num(12)?, num(13)?, num(14)?),
            },
        });
    }
    Ok(out)
}

/// Reads a dataset root, checking that every listed image exists once.
pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let samples = read_manifest(&root.join("manifest.csv"))?;
    let split_path = root.join("split.txt");
    let split = fs::read_to_string(&split_path).map_err(io_err(&split_path))?.trim().to_string();
    let mut seen = HashSet::new();
    for s in &samples {
        if !seen.insert(s.filename.as_str()) {
            return Err(DataError::Manifest {
                path: root.join("manifest.csv").display().to_string(),
                reason: format!("duplicate file name {}", s.filename),
            });
        }
        let p = root.join("images").join(&s.filename);
        if !p.is_file() {
            return Err(DataError::MissingImage(p.display().to_string()));
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        split,
        samples,
    })
}

/// Seeded permutation of `0..n` cut into batches; the last partial batch is kept.
pub fn iterate_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Independent stream seed for sample `index` of split `split`.
pub fn sample_seed(seed: u64, split: usize, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add((split as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((index as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Label, pose and render seed of one sample; labels are uniform on the range.
pub fn sample_plan(cfg: &SynthConfig, split: usize, index: usize) -> (f64, f64, HeadPose, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, index));
    let r = cfg.label_range;
    let pitch = rng.gen_range(-r..=r);
    let yaw = rng.gen_range(-r..=r);
    let pose = cfg.sample_pose(&mut rng);
    (pitch, yaw, pose, rng.gen())
}

/// Renders sample `index` of split `split`.
pub fn render_sample(cfg: &SynthConfig, split: usize, index: usize) -> Result<Render, DataError> {
    let (pitch, yaw, pose, seed) = sample_plan(cfg, split, index);
    synth_render(cfg, pitch, yaw, &pose, seed)
}

pub fn sample_name(split: usize, index: usize) -> String {
    format!("{}_{index:06}.pgm", SPLITS[split])
}

fn write_synth_config(cfg: &SynthConfig, path: &Path) -> Result<(), DataError> {
    let mut doc = ConfigDoc::default();
    cfg.write(doc.push_section("synth"));
    fs::write(path, doc.render()).map_err(io_err(path))
}

pub fn read_synth_config(path: &Path) -> Result<SynthConfig, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc = ConfigDoc::parse(&text)?;
    let mut r = doc.reader();
    let cfg = SynthConfig::read(&mut r, "synth")?;
    r.finish(None)?;
    Ok(cfg)
}

/// Writes `out/{train,val,test}` dataset roots plus `out/synth.cfg`.
pub fn generate_dataset(cfg: &SynthConfig, counts: [usize; 3], out: &Path) -> Result<Vec<Dataset>, DataError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_synth_config(cfg, &out.join(SYNTH_CONFIG_FILE))?;
    let mut sets = Vec::new();
    for (split, &n) in counts.iter().enumerate() {
        let root = out.join(SPLITS[split]);
        let images = root.join("images");
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let r = render_sample(cfg, split, i)?;
            let filename = sample_name(split, i);
            r.image.write_pnm(&images.join(&filename))?;
            samples.push(GazeSample {
                filename,
                pitch: r.pitch,
                yaw: r.yaw,
                pose: r.pose,
            });
        }
        write_manifest(&root.join("manifest.csv"), &samples)?;
        let split_path = root.join("split.txt");
        fs::write(&split_path, format!("{}\n", SPLITS[split])).map_err(io_err(&split_path))?;
        write_synth_config(cfg, &root.join(SYNTH_CONFIG_FILE))?;
        log::info!("wrote {n} {} samples to {}", SPLITS[split], root.display());
        sets.push(Dataset {
            root,
            split: SPLITS[split].to_string(),
            samples,
        });
    }
    Ok(sets)
}
