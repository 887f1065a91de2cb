//! Cartesian ablation grid over stride x resolution x architecture variant.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use super::checkpoint::save_checkpoint;
use super::train::{evaluate, train_model, write_epoch_log, write_sample_errors, TrainConfig};
use super::{io_err, ExperimentError};
use crate::config::{join_list, ConfigDoc, ConfigError, ConfigReader};
use crate::data::{load_dataset, prepare_inputs, read_synth_config, write_prepared, PrepareConfig, PreparedSet, Regions};
use crate::geometry::DEFAULT_FACE_DISTANCE;
use crate::nn::{MiniResConfig, Model, ModelConfig, MultiRegionConfig, PoolFormerConfig};

pub const RESULTS_HEADER: [&str; 11] = [
    "config_id",
    "arch",
    "stride",
    "resolution",
    "regions",
    "shared_eyes",
    "mean_err_deg",
    "median_err_deg",
    "params",
    "epochs",
    "wall_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    MiniRes,
    PoolFormer,
    PoolFormerAttention,
    MultiRegion,
    MultiRegionShared,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::MiniRes => "minires",
            Variant::PoolFormer => "poolformer",
            Variant::PoolFormerAttention => "poolformer-attention",
            Variant::MultiRegion => "multiregion",
            Variant::MultiRegionShared => "multiregion-shared",
        }
    }

    pub fn regions(self) -> Regions {
        match self {
            Variant::MultiRegion | Variant::MultiRegionShared => Regions::Multi,
            _ => Regions::Face,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [
            Variant::MiniRes,
            Variant::PoolFormer,
            Variant::PoolFormerAttention,
            Variant::MultiRegion,
            Variant::MultiRegionShared,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| {
            format!("unknown variant `{s}` (minires|poolformer|poolformer-attention|multiregion|multiregion-shared)")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub variant: Variant,
    pub stride: usize,
    pub resolution: usize,
}

impl GridCell {
    pub fn config_id(&self) -> String {
        format!("{}_s{}_r{}", self.variant, self.stride, self.resolution)
    }
}

/// Virtual distance of the 32 px grid eye patches: the eye appears at the
/// scale a 128 px patch gives at the face distance.
pub const GRID_EYE_DISTANCE: f64 = 150.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Raw dataset root with `train/`, `val/`, `test/` and `synth.cfg`.
    pub data: PathBuf,
    pub variants: Vec<Variant>,
    pub strides: Vec<usize>,
    pub resolutions: Vec<usize>,
    /// Overrides the schedule defaults when set.
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub width: usize,
    pub face_distance: f64,
    pub eye_resolution: usize,
    pub eye_distance: f64,
}

impl GridSpec {
    pub fn new(data: PathBuf) -> Self {
        Self {
            data,
            variants: vec![Variant::MiniRes],
            strides: vec![2, 1],
            resolutions: vec![64],
            epochs: None,
            lr: None,
            batch_size: 32,
            seed: 0,
            width: MiniResConfig::default().width,
            face_distance: DEFAULT_FACE_DISTANCE,
            eye_resolution: 32,
            eye_distance: GRID_EYE_DISTANCE,
        }
    }

    /// Cells in row order: variant, then resolution, then stride.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &resolution in &self.resolutions {
                for &stride in &self.strides {
                    out.push(GridCell {
                        variant,
                        stride,
                        resolution,
                    });
                }
            }
        }
        out
    }

    pub fn model_config(&self, cell: &GridCell) -> ModelConfig {
        let minires = |resolution| MiniResConfig {
            first_stride: cell.stride,
            input_resolution: resolution,
            width: self.width,
            ..MiniResConfig::default()
        };
        match cell.variant {
            Variant::MiniRes => ModelConfig::MiniRes(minires(cell.resolution)),
            Variant::PoolFormer | Variant::PoolFormerAttention => ModelConfig::PoolFormer(PoolFormerConfig {
                patch_stride: cell.stride,
                input_resolution: cell.resolution,
                width: self.width,
                attention_stages: if cell.variant == Variant::PoolFormerAttention { vec![0, 1] } else { Vec::new() },
                ..PoolFormerConfig::default()
            }),
            Variant::MultiRegion | Variant::MultiRegionShared => ModelConfig::MultiRegion(MultiRegionConfig {
                face: minires(cell.resolution),
                eye: minires(self.eye_resolution),
                share_eye_weights: cell.variant == Variant::MultiRegionShared,
            }),
        }
    }

    pub fn train_config(&self, cell: &GridCell) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.model_config(cell));
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.base_lr = lr;
        }
        cfg.batch_size = self.batch_size;
        cfg.seed = self.seed;
        cfg
    }

    pub fn prepare_config(&self, regions: Regions, resolution: usize) -> PrepareConfig {
        PrepareConfig {
            regions,
            resolution,
            face_distance: self.face_distance,
            eye_resolution: self.eye_resolution,
            eye_distance: self.eye_distance,
        }
    }

    /// Rejects empty axes and cells whose model cannot be built.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.variants.is_empty() || self.strides.is_empty() || self.resolutions.is_empty() {
            return Err(ExperimentError::Grid("variants, strides and resolutions must be non-empty".into()));
        }
        for cell in self.cells() {
            Model::<f32>::build(&self.model_config(&cell), 0).map_err(|e| {
                ExperimentError::Grid(format!("cell {}: {e}", cell.config_id()))
            })?;
        }
        Ok(())
    }

    pub fn write_config(&self, doc: &mut ConfigDoc) {
        let s = doc.push_section("grid");
        s.set("data", self.data.display())
            .set("variants", join_list(&self.variants))
            .set("strides", join_list(&self.strides))
            .set("resolutions", join_list(&self.resolutions));
        if let Some(e) = self.epochs {
            s.set("epochs", e);
        }
        if let Some(lr) = self.lr {
            s.set("lr", lr);
        }
        s.set("batch_size", self.batch_size)
            .set("seed", self.seed)
            .set("width", self.width)
            .set("face_distance", self.face_distance)
            .set("eye_resolution", self.eye_resolution)
            .set("eye_distance", self.eye_distance);
    }

    pub fn read_config(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        if !r.has_section("grid") {
            return Err(ConfigError::MissingSection("grid".into()));
        }
        let d = Self::new(r.require("grid", "data")?);
        Ok(Self {
            variants: r.list("grid", "variants")?.unwrap_or(d.variants.clone()),
            strides: r.list("grid", "strides")?.unwrap_or(d.strides.clone()),
            resolutions: r.list("grid", "resolutions")?.unwrap_or(d.resolutions.clone()),
            epochs: r.opt("grid", "epochs")?,
            lr: r.opt("grid", "lr")?,
            batch_size: r.get_or("grid", "batch_size", d.batch_size)?,
            seed: r.get_or("grid", "seed", d.seed)?,
            width: r.get_or("grid", "width", d.width)?,
            face_distance: r.get_or("grid", "face_distance", d.face_distance)?,
            eye_resolution: r.get_or("grid", "eye_resolution", d.eye_resolution)?,
            eye_distance: r.get_or("grid", "eye_distance", d.eye_distance)?,
            ..d
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

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config_id: String,
    pub arch: String,
    pub stride: usize,
    pub resolution: usize,
    pub regions: String,
    pub shared_eyes: bool,
    pub mean_err_deg: f64,
    pub median_err_deg: f64,
    pub params: usize,
    pub epochs: usize,
    pub wall_s: f64,
}

/// Published ETH-XGaze error for the matching configuration. `tier` 0 is
/// the grid's base input resolution (224 px there), tier 1 its double.
pub fn reference_error(variant: Variant, stride: usize, tier: usize) -> Option<(f64, &'static str)> {
    let v = match (variant, stride, tier) {
        (Variant::MiniRes, 2, 0) => (4.50, "ResNet-50 stride 2, 224px"),
        (Variant::MiniRes, 1, 0) => (4.00, "ResNet-50 stride 1, 224px"),
        (Variant::MiniRes, 2, 1) => (3.95, "ResNet-50 stride 2, 448px"),
        (Variant::MiniRes, 1, 1) => (3.76, "ResNet-50 stride 1, 448px"),
        (Variant::PoolFormerAttention, 4, 0) => (4.73, "PoolFormer-24 stride 4 + attention, 224px"),
        (Variant::PoolFormer, 4, 0) => (4.56, "PoolFormer-24 stride 4, 224px"),
        (Variant::PoolFormer, 2, 0) => (3.98, "PoolFormer-24 stride 2, 224px"),
        (Variant::PoolFormer, 1, 0) => (3.67, "PoolFormer-24 stride 1, 224px"),
        (Variant::MultiRegion, 2, 0) => (3.88, "multi-region unshared stride 2, 224px"),
        (Variant::MultiRegion, 1, 0) => (3.64, "multi-region unshared stride 1, 224px"),
        (Variant::MultiRegionShared, 2, 0) => (3.70, "multi-region shared stride 2, 224px"),
        (Variant::MultiRegionShared, 1, 0) => (3.69, "multi-region shared stride 1, 224px"),
        _ => return None,
    };
    Some(v)
}

fn resolution_tier(resolutions: &[usize], resolution: usize) -> Option<usize> {
    let base = *resolutions.iter().min()?;
    match resolution {
        r if r == base => Some(0),
        r if r == 2 * base => Some(1),
        _ => None,
    }
}

/// Aligned markdown table of `rows` with a published-reference column.
pub fn results_markdown(rows: &[ResultRow]) -> String {
    let resolutions: Vec<usize> = rows.iter().map(|r| r.resolution).collect();
    let header = [
        "config_id",
        "arch",
        "stride",
        "resolution",
        "regions",
        "shared_eyes",
        "mean_err_deg",
        "median_err_deg",
        "params",
        "epochs",
        "wall_s",
        "ETH-XGaze reference",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let reference = r
                .arch
                .parse::<Variant>()
                .ok()
                .zip(resolution_tier(&resolutions, r.resolution))
                .and_then(|(v, t)| reference_error(v, r.stride, t))
                .map_or_else(|| "-".to_string(), |(e, what)| format!("{e:.2} ({what})"));
            vec![
                r.config_id.clone(),
                r.arch.clone(),
                r.stride.to_string(),
                r.resolution.to_string(),
                r.regions.clone(),
                r.shared_eyes.to_string(),
                format!("{:.3}", r.mean_err_deg),
                format!("{:.3}", r.median_err_deg),
                r.params.to_string(),
                r.epochs.to_string(),
                format!("{:.1}", r.wall_s),
                reference,
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<String>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out += &line(widths.iter().map(|&w| "-".repeat(w)).collect());
    for row in body {
        out += &line(row);
    }
    out
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<(), ExperimentError> {
    let fail = |reason: String| ExperimentError::Table {
        path: path.display().to_string(),
        reason,
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| fail(e.to_string()))?;
    w.write_record(RESULTS_HEADER).map_err(|e| fail(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.config_id.clone(),
            r.arch.clone(),
            r.stride.to_string(),
            r.resolution.to_string(),
            r.regions.clone(),
            r.shared_eyes.to_string(),
            r.mean_err_deg.to_string(),
            r.median_err_deg.to_string(),
            r.params.to_string(),
            r.epochs.to_string(),
            format!("{:.3}", r.wall_s),
        ])
        .map_err(|e| fail(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, ExperimentError> {
    let fail = |reason: String| ExperimentError::Table {
        path: path.display().to_string(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| fail(e.to_string()))?.iter().map(String::from).collect();
    if header != RESULTS_HEADER {
        return Err(fail(format!("unexpected header `{}`", header.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let field = |k: usize| -> Result<&str, ExperimentError> {
            rec.get(k).ok_or_else(|| fail(format!("row {}: missing {}", i + 1, RESULTS_HEADER[k])))
        };
        macro_rules! parse {
            ($k:expr) => {
                field($k)?
                    .parse()
                    .map_err(|e| fail(format!("row {}: {}: {e}", i + 1, RESULTS_HEADER[$k])))?
            };
        }
        rows.push(ResultRow {
            config_id: field(0)?.to_string(),
            arch: field(1)?.to_string(),
            stride: parse!(2),
            resolution: parse!(3),
            regions: field(4)?.to_string(),
            shared_eyes: parse!(5),
            mean_err_deg: parse!(6),
            median_err_deg: parse!(7),
            params: parse!(8),
            epochs: parse!(9),
            wall_s: parse!(10),
        });
    }
    Ok(rows)
}

/// Runs every cell on the same data and seeds. Writes per-cell logs under
/// `out/cells/<config_id>/`, prepared inputs under `out/prepared/`, and
/// `results.csv` plus `results.md` (rewritten after every cell).
pub fn run_grid(spec: &GridSpec, out: &Path) -> Result<Vec<ResultRow>, ExperimentError> {
    spec.validate()?;
    let synth = read_synth_config(&spec.data.join(crate::data::SYNTH_CONFIG_FILE))?;
    let raw: Vec<_> = ["train", "val", "test"]
        .iter()
        .map(|s| load_dataset(&spec.data.join(s)))
        .collect::<Result<_, _>>()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let spec_path = out.join("grid.cfg");
    let mut doc = ConfigDoc::default();
    spec.write_config(&mut doc);
    fs::write(&spec_path, doc.render()).map_err(io_err(&spec_path))?;

    let mut prepared: BTreeMap<(String, usize), Vec<PreparedSet>> = BTreeMap::new();
    let mut rows = Vec::new();
    for cell in spec.cells() {
        let regions = cell.variant.regions();
        let key = (regions.to_string(), cell.resolution);
        if !prepared.contains_key(&key) {
            let pc = spec.prepare_config(regions, cell.resolution);
            let dir = out.join("prepared").join(format!("{regions}_r{}", cell.resolution));
            let mut sets = Vec::new();
            for ds in &raw {
                let set = prepare_inputs(ds, &synth, &pc)?;
                write_prepared(&set, &ds.split, &dir.join(&ds.split))?;
                sets.push(set);
            }
            prepared.insert(key.clone(), sets);
        }
        let sets = &prepared[&key];
        let cfg = spec.train_config(&cell);
        let id = cell.config_id();
        log::info!("grid cell {id}");
        let started = Instant::now();
        let mut run = train_model(&cfg, &sets[0], Some(&sets[1]))?;
        let test = evaluate(&mut run.model, &sets[2])?;
        let wall_s = started.elapsed().as_secs_f64();
        let cell_dir = out.join("cells").join(&id);
        fs::create_dir_all(&cell_dir).map_err(io_err(&cell_dir))?;
        write_epoch_log(&cell_dir.join("epoch_log.csv"), &run.log)?;
        write_sample_errors(&cell_dir.join("test_errors.csv"), &test)?;
        save_checkpoint(&run.model, &run.meta(cfg.seed), &cell_dir.join("model.ckpt"))?;
        if !(test.mean_deg.is_finite() && test.mean_deg >= 0.0) {
            return Err(ExperimentError::Grid(format!("cell {id}: mean error {} is not finite", test.mean_deg)));
        }
        rows.push(ResultRow {
            config_id: id,
            arch: cell.variant.to_string(),
            stride: cell.stride,
            resolution: cell.resolution,
            regions: regions.to_string(),
            shared_eyes: cell.variant == Variant::MultiRegionShared,
            mean_err_deg: test.mean_deg,
            median_err_deg: test.median_deg,
            params: run.model.parameter_count(),
            epochs: cfg.epochs,
            wall_s,
        });
        write_results_csv(&out.join("results.csv"), &rows)?;
        let md = out.join("results.md");
        fs::write(&md, results_markdown(&rows)).map_err(io_err(&md))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_cover_the_product() {
        let mut g = GridSpec::new("data".into());
        g.strides = vec![1, 2];
        g.resolutions = vec![64, 128];
        assert_eq!(g.cells().len(), 4);
        g.validate().unwrap();
        assert_eq!(g.cells()[0].config_id(), "minires_s1_r64");
    }

    #[test]
    fn spec_round_trip() {
        let mut g = GridSpec::new("raw".into());
        g.variants = vec![Variant::MultiRegion, Variant::MultiRegionShared];
        g.epochs = Some(3);
        let mut doc = ConfigDoc::default();
        g.write_config(&mut doc);
        assert_eq!(GridSpec::from_config_str(&doc.render()).unwrap(), g);
    }

    #[test]
    fn bad_cell_rejected_up_front() {
        let mut g = GridSpec::new("data".into());
        g.strides = vec![4];
        assert!(matches!(g.validate(), Err(ExperimentError::Grid(_))));
    }

    #[test]
    fn reference_column_quotes_published_numbers() {
        let t1: Vec<f64> = [(2, 0), (1, 0), (2, 1), (1, 1)]
            .iter()
            .map(|&(s, t)| reference_error(Variant::MiniRes, s, t).unwrap().0)
            .collect();
        assert_eq!(t1, [4.50, 4.00, 3.95, 3.76]);
        let t3: Vec<f64> = [(Variant::MultiRegion, 2), (Variant::MultiRegion, 1), (Variant::MultiRegionShared, 2), (Variant::MultiRegionShared, 1)]
            .iter()
            .map(|&(v, s)| reference_error(v, s, 0).unwrap().0)
            .collect();
        assert_eq!(t3, [3.88, 3.64, 3.70, 3.69]);
    }
}
