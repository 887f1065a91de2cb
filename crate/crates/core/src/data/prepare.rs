//! Normalization of raw renders into face (and eye) model inputs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{io_err, load_dataset, read_synth_config, write_manifest, DataError, Dataset, GazeSample, SynthConfig};
use crate::config::{ConfigDoc, Section};
use crate::geometry::{
    normalization_transform, normalize_gaze, pitchyaw_to_vector, vector_to_pitchyaw, warp_image, HeadPose, Mat3,
    NormalizationSpec, Vec3, DEFAULT_FACE_DISTANCE,
};
use crate::raster::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PREPARE_CONFIG_FILE: &str = "prepare.cfg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regions {
    Face,
    Multi,
}

impl fmt::Display for Regions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regions::Face => "face",
            Regions::Multi => "multi",
        })
    }
}

impl FromStr for Regions {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "face" => Ok(Regions::Face),
            "multi" | "multi-region" => Ok(Regions::Multi),
            other => Err(format!("unknown regions `{other}` (face|multi)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareConfig {
    pub regions: Regions,
    pub resolution: usize,
    pub face_distance: f64,
    pub eye_resolution: usize,
    pub eye_distance: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            regions: Regions::Face,
            resolution: 224,
            face_distance: DEFAULT_FACE_DISTANCE,
            eye_resolution: 128,
            eye_distance: DEFAULT_FACE_DISTANCE,
        }
    }
}

impl PrepareConfig {
    pub fn face_spec(&self) -> NormalizationSpec {
        NormalizationSpec::scaled(self.resolution, self.face_distance)
    }

    pub fn eye_spec(&self) -> NormalizationSpec {
        NormalizationSpec::scaled(self.eye_resolution, self.eye_distance)
    }

    pub fn write(&self, s: &mut Section) {
        s.set("regions", self.regions)
            .set("resolution", self.resolution)
            .set("face_distance", self.face_distance)
            .set("eye_resolution", self.eye_resolution)
            .set("eye_distance", self.eye_distance);
    }

    pub fn read(r: &mut crate::config::ConfigReader<'_>, section: &str) -> Result<Self, crate::config::ConfigError> {
        let d = Self::default();
        Ok(Self {
            regions: r.get_or(section, "regions", d.regions)?,
            resolution: r.get_or(section, "resolution", d.resolution)?,
            face_distance: r.get_or(section, "face_distance", d.face_distance)?,
            eye_resolution: r.get_or(section, "eye_resolution", d.eye_resolution)?,
            eye_distance: r.get_or(section, "eye_distance", d.eye_distance)?,
        })
    }
}

/// One normalized sample: face patch, optional (left, right) eye patches and
/// the gaze label in the face's normalized camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub name: String,
    pub face: Image,
    pub eyes: Option<(Image, Image)>,
    pub pitch: f64,
    pub yaw: f64,
    /// Face normalization rotation applied to the label.
    pub rotation: Mat3,
    /// Head pose in the normalized face camera.
    pub pose: HeadPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub config: PrepareConfig,
    pub samples: Vec<PreparedSample>,
    pub skipped: usize,
}

/// Warps one raw image into the normalized face (and eye) cameras and
/// rotates its label into the face frame.
pub fn prepare_sample(
    name: &str,
    raw: &Image,
    label: (f64, f64),
    pose: &HeadPose,
    synth: &SynthConfig,
    cfg: &PrepareConfig,
) -> Result<PreparedSample, DataError> {
    let geo = |e: crate::geometry::GeometryError| DataError::Geometry(format!("{name}: {e}"));
    let camera = synth.raw_camera();
    let face_spec = cfg.face_spec();
    let face_norm = normalization_transform(&camera, pose, &face_spec).map_err(geo)?;
    let face = warp_image(raw, &face_norm.warp, face_spec.width, face_spec.height).map_err(geo)?;
    let eyes = match cfg.regions {
        Regions::Face => None,
        Regions::Multi => {
            let spec = cfg.eye_spec();
            let (left, right) = synth.eye_centers(pose);
            let patch = |center: Vec3| -> Result<Image, DataError> {
                let n = normalization_transform(&camera, &pose.centered_at(center), &spec).map_err(geo)?;
                warp_image(raw, &n.warp, spec.width, spec.height).map_err(geo)
            };
            Some((patch(left)?, patch(right)?))
        }
    };
    let g = pitchyaw_to_vector(label.0, label.1).map_err(geo)?;
    let (pitch, yaw) = vector_to_pitchyaw(&normalize_gaze(&g, &face_norm.rotation));
    let normalized_pose = HeadPose {
        rotation: face_norm.rotation * pose.rotation,
        face_center: face_norm.scale * face_norm.rotation * pose.face_center,
    };
    Ok(PreparedSample {
        name: name.to_string(),
        face,
        eyes,
        pitch,
        yaw,
        rotation: face_norm.rotation,
        pose: normalized_pose,
    })
}

/// Prepares every sample of an on-disk dataset. Samples with degenerate
/// poses are skipped with a warning and counted.
pub fn prepare_inputs(dataset: &Dataset, synth: &SynthConfig, cfg: &PrepareConfig) -> Result<PreparedSet, DataError> {
    let mut samples = Vec::with_capacity(dataset.len());
    let mut skipped = 0;
    for s in &dataset.samples {
        let raw = Image::read_pnm(&dataset.image_path(s))?;
        match prepare_sample(&s.filename, &raw, (s.pitch, s.yaw), &s.pose, synth, cfg) {
            Ok(p) => samples.push(p),
            Err(DataError::Geometry(reason)) => {
                log::warn!("skipping sample: {reason}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PreparedSet {
        config: *cfg,
        samples,
        skipped,
    })
}

fn stem(name: &str) -> &str {
    name.strip_suffix(".pgm").unwrap_or(name)
}

pub fn eye_file_names(name: &str) -> (String, String) {
    let s = stem(name);
    (format!("{s}_leye.pgm"), format!("{s}_reye.pgm"))
}

/// Writes a prepared set in the dataset layout plus `prepare.cfg`.
pub fn write_prepared(set: &PreparedSet, split: &str, out: &Path) -> Result<(), DataError> {
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut rows = Vec::with_capacity(set.samples.len());
    for s in &set.samples {
        let name = format!("{}.pgm", stem(&s.name));
        s.face.write_pnm(&images.join(&name))?;
        if let Some((l, r)) = &s.eyes {
            let (ln, rn) = eye_file_names(&name);
            l.write_pnm(&images.join(ln))?;
            r.write_pnm(&images.join(rn))?;
        }
        rows.push(GazeSample {
            filename: name,
            pitch: s.pitch,
            yaw: s.yaw,
            pose: s.pose,
        });
    }
    write_manifest(&out.join("manifest.csv"), &rows)?;
    let split_path = out.join("split.txt");
    fs::write(&split_path, format!("{split}\n")).map_err(io_err(&split_path))?;
    let mut doc = ConfigDoc::default();
    set.config.write(doc.push_section("prepare"));
    let cfg_path = out.join(PREPARE_CONFIG_FILE);
    fs::write(&cfg_path, doc.render()).map_err(io_err(&cfg_path))
}

/// Loads a prepared dataset root written by [`write_prepared`].
pub fn load_prepared(root: &Path) -> Result<PreparedSet, DataError> {
    let cfg_path = root.join(PREPARE_CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let doc = ConfigDoc::parse(&text)?;
    let mut r = doc.reader();
    let config = PrepareConfig::read(&mut r, "prepare")?;
    r.finish(None)?;
    let dataset = load_dataset(root)?;
    let mut samples = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let face = Image::read_pnm(&dataset.image_path(s))?;
        let eyes = match config.regions {
            Regions::Face => None,
            Regions::Multi => {
                let (ln, rn) = eye_file_names(&s.filename);
                let read = |n: &str| {
                    let p = root.join("images").join(n);
                    if !p.is_file() {
                        return Err(DataError::MissingImage(p.display().to_string()));
                    }
                    Ok(Image::read_pnm(&p)?)
                };
                Some((read(&ln)?, read(&rn)?))
            }
        };
        samples.push(PreparedSample {
            name: s.filename.clone(),
            face,
            eyes,
            pitch: s.pitch,
            yaw: s.yaw,
            rotation: Mat3::identity(),
            pose: s.pose,
        });
    }
    Ok(PreparedSet {
        config,
        samples,
        skipped: 0,
    })
}

/// Prepares `src` (a dataset root with `synth.cfg`) into `out`.
pub fn prepare_dataset(src: &Path, out: &Path, cfg: &PrepareConfig) -> Result<PreparedSet, DataError> {
    let dataset = load_dataset(src)?;
    let synth = read_synth_config(&src.join(super::SYNTH_CONFIG_FILE))?;
    let set = prepare_inputs(&dataset, &synth, cfg)?;
    if set.skipped > 0 {
        log::warn!("{}: skipped {} of {} samples", src.display(), set.skipped, dataset.len());
    }
    write_prepared(&set, &dataset.split, out)?;
    Ok(set)
}

fn stack<T: Scalar>(images: impl Iterator<Item = Vec<f32>>, n: usize, size: (usize, usize)) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * size.0 * size.1);
    for img in images {
        data.extend(img.into_iter().map(|v| T::from_f64_lossy(v as f64)));
    }
    Tensor::from_vec(&[n, 1, size.1, size.0], data).expect("consistent image sizes")
}

/// Model-ready tensors for a batch: grayscale in `[0, 1]`, labels `N x 2`.
#[derive(Debug, Clone)]
pub struct BatchTensors<T> {
    pub face: Tensor<T>,
    pub eyes: Option<(Tensor<T>, Tensor<T>)>,
    pub labels: Tensor<T>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (s.pitch, s.yaw)).collect()
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> BatchTensors<T> {
        let n = indices.len();
        let pick = |i: &usize| &self.samples[*i];
        let face_size = {
            let f = &pick(&indices[0]).face;
            (f.width, f.height)
        };
        let face = stack(indices.iter().map(|i| pick(i).face.to_unit_gray()), n, face_size);
        let eyes = pick(&indices[0]).eyes.as_ref().map(|(l, _)| {
            let size = (l.width, l.height);
            let left = stack(
                indices.iter().map(|i| pick(i).eyes.as_ref().expect("uniform regions").0.to_unit_gray()),
                n,
                size,
            );
            let right = stack(
                indices.iter().map(|i| pick(i).eyes.as_ref().expect("uniform regions").1.to_unit_gray()),
                n,
                size,
            );
            (left, right)
        });
        let labels = indices
            .iter()
            .flat_map(|i| [T::from_f64_lossy(pick(i).pitch), T::from_f64_lossy(pick(i).yaw)])
            .collect();
        BatchTensors {
            face,
            eyes,
            labels: Tensor::from_vec(&[n, 2], labels).expect("two labels per sample"),
        }
    }
}
