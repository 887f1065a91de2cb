//! Procedural face renderer whose gaze signal is a sub-pixel iris shift.
//!
//! Geometry lives in millimeters in a head frame (x right, y down, z away
//! from the camera, face plane at z = 0). The raw camera focal length is
//! `focal_ratio * R`, so at the nominal distance every feature covers a
//! fixed fraction of the raw image regardless of `R`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DataError;
use crate::config::{ConfigError, ConfigReader, Section};
use crate::geometry::{
    normalization_transform, pitchyaw_to_vector, rotation_from_euler, vector_to_pitchyaw, CameraIntrinsics, HeadPose,
    Mat3, NormalizationSpec, Vec3,
};
use crate::raster::Image;

/// Ranges of the random head placement around the nominal frontal pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseJitter {
    /// Max lateral offset of the face center, mm (x and y independently).
    pub translation: f64,
    /// Max deviation from the nominal distance, mm.
    pub distance: f64,
    /// Max head roll, degrees.
    pub roll_deg: f64,
    /// Max head pitch and yaw, degrees.
    pub rotation_deg: f64,
}

impl PoseJitter {
    pub const NONE: PoseJitter = PoseJitter {
        translation: 0.0,
        distance: 0.0,
        roll_deg: 0.0,
        rotation_deg: 0.0,
    };
}

impl Default for PoseJitter {
    fn default() -> Self {
        Self {
            translation: 30.0,
            distance: 50.0,
            roll_deg: 10.0,
            rotation_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Side of the square raw image, pixels.
    pub raw_resolution: usize,
    /// Raw focal length divided by `raw_resolution`.
    pub focal_ratio: f64,
    /// Nominal face distance, mm.
    pub distance: f64,
    /// Face ellipse semi-axes (x, y), mm.
    pub face_axes: (f64, f64),
    /// Left eye center (x, y) in the head frame, mm; the right eye mirrors x.
    pub eye_offset: (f64, f64),
    pub eye_radius: f64,
    /// Iris radius as a fraction of the eye radius.
    pub iris_fraction: f64,
    /// Iris shift per unit sine of gaze angle, in eye radii.
    pub gain: f64,
    pub noise_sigma: f64,
    /// Illumination gain range.
    pub illumination: (f64, f64),
    pub jitter: PoseJitter,
    /// Labels are drawn from `[-label_range, label_range]` radians.
    pub label_range: f64,
    pub background: f64,
    pub skin: f64,
    pub sclera: f64,
    pub iris: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            raw_resolution: 512,
            focal_ratio: 2.54,
            distance: 600.0,
            face_axes: (65.0, 85.0),
            eye_offset: (32.0, -15.0),
            eye_radius: 12.0,
            iris_fraction: 0.3,
            gain: 0.75,
            noise_sigma: 0.02,
            illumination: (0.9, 1.1),
            jitter: PoseJitter::default(),
            label_range: 30f64.to_radians(),
            background: 0.25,
            skin: 0.6,
            sclera: 0.95,
            iris: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Frontal, noise-free, unit-gain renders at resolution `r`.
    pub fn clean(r: usize) -> Self {
        Self {
            raw_resolution: r,
            noise_sigma: 0.0,
            illumination: (1.0, 1.0),
            jitter: PoseJitter::NONE,
            ..Self::default()
        }
    }

    pub fn raw_camera(&self) -> CameraIntrinsics {
        let r = self.raw_resolution;
        CameraIntrinsics::centered(self.focal_ratio * r as f64, r, r)
    }

    pub fn iris_radius(&self) -> f64 {
        self.eye_radius * self.iris_fraction
    }

    /// Largest normalized gaze angle per axis, including pose jitter, in radians.
    fn max_normalized_angle(&self) -> f64 {
        let roll = self.jitter.roll_deg.to_radians();
        let lateral = (self.jitter.translation * std::f64::consts::SQRT_2 / (self.distance - self.jitter.distance)).atan();
        self.label_range * (roll.cos() + roll.sin()) + lateral
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: String| Err(DataError::Config(reason));
        if self.raw_resolution < 16 {
            return bad(format!("raw resolution {} below 16", self.raw_resolution));
        }
        if !(self.label_range > 0.0 && self.label_range < 1.2) {
            return bad(format!("label range {} rad outside (0, 1.2)", self.label_range));
        }
        if self.jitter.distance >= self.distance || self.distance <= 0.0 {
            return bad("distance jitter must stay below the nominal distance".into());
        }
        if self.illumination.0 > self.illumination.1 || self.illumination.0 <= 0.0 || self.noise_sigma < 0.0 {
            return bad("illumination range must be positive and ordered, noise non-negative".into());
        }
        let theta = self.max_normalized_angle().min(std::f64::consts::FRAC_PI_2);
        let reach = self.gain * self.eye_radius * std::f64::consts::SQRT_2 * theta.sin() + self.iris_radius();
        if reach >= self.eye_radius {
            return bad(format!(
                "iris can leave the eye disk: reach {reach:.2} mm >= eye radius {} mm",
                self.eye_radius
            ));
        }
        if !(self.iris < self.sclera) {
            return bad("iris must be darker than the sclera".into());
        }
        Ok(())
    }

    pub fn write(&self, s: &mut Section) {
        s.set("raw_resolution", self.raw_resolution)
            .set("focal_ratio", self.focal_ratio)
            .set("distance", self.distance)
            .set("face_axes", format!("{},{}", self.face_axes.0, self.face_axes.1))
            .set("eye_offset", format!("{},{}", self.eye_offset.0, self.eye_offset.1))
            .set("eye_radius", self.eye_radius)
            .set("iris_fraction", self.iris_fraction)
            .set("gain", self.gain)
            .set("noise_sigma", self.noise_sigma)
            .set("illumination", format!("{},{}", self.illumination.0, self.illumination.1))
            .set("jitter_translation", self.jitter.translation)
            .set("jitter_distance", self.jitter.distance)
            .set("jitter_roll_deg", self.jitter.roll_deg)
            .set("jitter_rotation_deg", self.jitter.rotation_deg)
            .set("label_range", self.label_range)
            .set("seed", self.seed);
    }

    pub fn read(r: &mut ConfigReader<'_>, section: &str) -> Result<Self, ConfigError> {
        let d = Self::default();
        let pair = |r: &mut ConfigReader<'_>, key: &str, default: (f64, f64)| -> Result<(f64, f64), ConfigError> {
            match r.list::<f64>(section, key)? {
                None => Ok(default),
                Some(v) if v.len() == 2 => Ok((v[0], v[1])),
                Some(v) => Err(ConfigError::Value {
                    section: section.into(),
                    key: key.into(),
                    value: format!("{v:?}"),
                    reason: "expected two comma-separated numbers".into(),
                }),
            }
        };
        Ok(Self {
            raw_resolution: r.get_or(section, "raw_resolution", d.raw_resolution)?,
            focal_ratio: r.get_or(section, "focal_ratio", d.focal_ratio)?,
            distance: r.get_or(section, "distance", d.distance)?,
            face_axes: pair(r, "face_axes", d.face_axes)?,
            eye_offset: pair(r, "eye_offset", d.eye_offset)?,
            eye_radius: r.get_or(section, "eye_radius", d.eye_radius)?,
            iris_fraction: r.get_or(section, "iris_fraction", d.iris_fraction)?,
            gain: r.get_or(section, "gain", d.gain)?,
            noise_sigma: r.get_or(section, "noise_sigma", d.noise_sigma)?,
            illumination: pair(r, "illumination", d.illumination)?,
            jitter: PoseJitter {
                translation: r.get_or(section, "jitter_translation", d.jitter.translation)?,
                distance: r.get_or(section, "jitter_distance", d.jitter.distance)?,
                roll_deg: r.get_or(section, "jitter_roll_deg", d.jitter.roll_deg)?,
                rotation_deg: r.get_or(section, "jitter_rotation_deg", d.jitter.rotation_deg)?,
            },
            label_range: r.get_or(section, "label_range", d.label_range)?,
            seed: r.get_or(section, "seed", d.seed)?,
            ..d
        })
    }

    /// Eye centers (left, right) in camera coordinates for a pose.
    pub fn eye_centers(&self, pose: &HeadPose) -> (Vec3, Vec3) {
        let (x, y) = self.eye_offset;
        let place = |p: Vec3| pose.rotation * p + pose.face_center;
        (place(Vec3::new(x, y, 0.0)), place(Vec3::new(-x, y, 0.0)))
    }

    /// Head pose drawn from the jitter ranges.
    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> HeadPose {
        let j = &self.jitter;
        let mut sym = |range: f64| if range > 0.0 { rng.gen_range(-range..=range) } else { 0.0 };
        let tx = sym(j.translation);
        let ty = sym(j.translation);
        let tz = self.distance + sym(j.distance);
        let pitch = sym(j.rotation_deg).to_radians();
        let yaw = sym(j.rotation_deg).to_radians();
        let roll = sym(j.roll_deg).to_radians();
        HeadPose {
            rotation: rotation_from_euler(pitch, yaw, roll),
            face_center: Vec3::new(tx, ty, tz),
        }
    }
}

/// A rendered raw image with the ground truth used to draw it.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub image: Image,
    pub pitch: f64,
    pub yaw: f64,
    pub pose: HeadPose,
}

const SUBSAMPLES: [f64; 4] = [-0.375, -0.125, 0.125, 0.375];

/// Disk in image space with an anti-aliased coverage function.
#[derive(Debug, Clone, Copy)]
struct Disk {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Disk {
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let d = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt() - self.r;
        if d > 0.75 {
            return 0.0;
        }
        if d < -0.75 {
            return 1.0;
        }
        let r2 = self.r * self.r;
        let mut hit = 0;
        for oy in SUBSAMPLES {
            for ox in SUBSAMPLES {
                if (x + ox - self.cx).powi(2) + (y + oy - self.cy).powi(2) <= r2 {
                    hit += 1;
                }
            }
        }
        hit as f64 / 16.0
    }

    fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let lo = |c: f64| (c - self.r - 1.0).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + self.r + 1.0).ceil().max(0.0) as usize).min(size - 1);
        (lo(self.cx), hi(self.cx), lo(self.cy), hi(self.cy))
    }
}

fn face_inside(cfg: &SynthConfig, cam_inv: &Mat3, pose: &HeadPose, normal: &Vec3, plane_d: f64, x: f64, y: f64) -> bool {
    let ray = cam_inv * Vec3::new(x, y, 1.0);
    let denom = normal.dot(&ray);
    if denom.abs() < 1e-12 {
        return false;
    }
    let s = plane_d / denom;
    let q = pose.rotation.transpose() * (ray * s - pose.face_center);
    (q.x / cfg.face_axes.0).powi(2) + (q.y / cfg.face_axes.1).powi(2) <= 1.0
}

/// Iris shift in camera coordinates (mm) for a camera-frame gaze label: the
/// gaze is expressed in the normalized frame of `pose`, and the iris moves by
/// `gain * eye_radius * (sin yaw_n, -sin pitch_n)` along that frame's image axes.
pub fn iris_shift(cfg: &SynthConfig, pitch: f64, yaw: f64, pose: &HeadPose) -> Result<Vec3, DataError> {
    let g = pitchyaw_to_vector(pitch, yaw).map_err(|e| DataError::Label(e.to_string()))?;
    let m = normalization_transform(&cfg.raw_camera(), pose, &NormalizationSpec::face(64))
        .map_err(|e| DataError::Geometry(e.to_string()))?
        .rotation;
    let (pn, yn) = vector_to_pitchyaw(&(m * g));
    let xn = m.row(0).transpose();
    let yv = m.row(1).transpose();
    Ok((xn * yn.sin() - yv * pn.sin()) * (cfg.gain * cfg.eye_radius))
}

/// Renders one raw image. Deterministic in `(cfg, label, pose, seed)`; the
/// seed only drives illumination gain and noise.
pub fn synth_render(cfg: &SynthConfig, pitch: f64, yaw: f64, pose: &HeadPose, seed: u64) -> Result<Render, DataError> {
    if !(pitch.abs() <= cfg.label_range + 1e-12 && yaw.abs() <= cfg.label_range + 1e-12) {
        return Err(DataError::Label(format!(
            "label ({pitch:.4}, {yaw:.4}) rad outside +/-{:.4}",
            cfg.label_range
        )));
    }
    pose.validate().map_err(|e| DataError::Geometry(e.to_string()))?;
    let size = cfg.raw_resolution;
    let cam = cfg.raw_camera();
    let cam_inv = cam.inverse();
    let shift = iris_shift(cfg, pitch, yaw, pose)?;
    let (left, right) = cfg.eye_centers(pose);
    let mut eyes = Vec::with_capacity(2);
    for center in [left, right] {
        let (ex, ey) = cam.project(&center);
        let iris_center = center + shift;
        let (ix, iy) = cam.project(&iris_center);
        let eye = Disk {
            cx: ex,
            cy: ey,
            r: cam.fx * cfg.eye_radius / center.z,
        };
        let iris = Disk {
            cx: ix,
            cy: iy,
            r: cam.fx * cfg.iris_radius() / iris_center.z,
        };
        let gap = ((ix - ex).powi(2) + (iy - ey).powi(2)).sqrt() + iris.r;
        if gap >= eye.r {
            return Err(DataError::Label(format!(
                "iris leaves the eye disk for label ({pitch:.4}, {yaw:.4})"
            )));
        }
        eyes.push((eye, iris));
    }

    let normal = pose.rotation * Vec3::new(0.0, 0.0, 1.0);
    let plane_d = normal.dot(&pose.face_center);
    let mut img = vec![cfg.background; size * size];
    // Face: whole-pixel classification by corners, supersampling only on the boundary.
    let corner = |x: f64, y: f64| face_inside(cfg, &cam_inv, pose, &normal, plane_d, x, y);
    let mut row_above: Vec<bool> = (0..=size).map(|i| corner(i as f64 - 0.5, -0.5)).collect();
    for y in 0..size {
        let row_below: Vec<bool> = (0..=size).map(|i| corner(i as f64 - 0.5, y as f64 + 0.5)).collect();
        for x in 0..size {
            let c = [row_above[x], row_above[x + 1], row_below[x], row_below[x + 1]];
            let cov = if c.iter().all(|&v| v) {
                1.0
            } else if c.iter().all(|&v| !v) {
                0.0
            } else {
                let mut hit = 0;
                for oy in SUBSAMPLES {
                    for ox in SUBSAMPLES {
                        if corner(x as f64 + ox, y as f64 + oy) {
                            hit += 1;
                        }
                    }
                }
                hit as f64 / 16.0
            };
            let p = &mut img[y * size + x];
            *p += (cfg.skin - *p) * cov;
        }
        row_above = row_below;
    }
    for (eye, iris) in &eyes {
        let (x0, x1, y0, y1) = eye.bounds(size);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (fx, fy) = (x as f64, y as f64);
                let ce = eye.coverage(fx, fy);
                if ce == 0.0 {
                    continue;
                }
                let p = &mut img[y * size + x];
                *p += (cfg.sclera - *p) * ce;
                let ci = iris.coverage(fx, fy);
                *p += (cfg.iris - *p) * ci;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.illumination;
    let gain = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    if gain != 1.0 || cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        for p in &mut img {
            *p = *p * gain + if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
    }
    Ok(Render {
        image: Image::from_unit_gray(size, size, &img),
        pitch,
        yaw,
        pose: *pose,
    })
}

/// Frontal pose at the nominal distance.
pub fn frontal_pose(cfg: &SynthConfig) -> HeadPose {
    HeadPose {
        rotation: Mat3::identity(),
        face_center: Vec3::new(0.0, 0.0, cfg.distance),
    }
}

/// Recovers (pitch, yaw) from a frontal clean render by locating each iris
/// as the centroid of its coverage inside the known eye disk.
pub fn oracle_gaze(image: &Image, cfg: &SynthConfig) -> Result<(f64, f64), DataError> {
    let pose = frontal_pose(cfg);
    let cam = cfg.raw_camera();
    let (left, right) = cfg.eye_centers(&pose);
    let px_per_mm = cam.fx / cfg.distance;
    let eye_r = cfg.eye_radius * px_per_mm;
    let iris_r = cfg.iris_radius() * px_per_mm;
    let scale = 255.0 * (cfg.sclera - cfg.iris);
    let white = 255.0 * cfg.sclera;
    let weight = |x: usize, y: usize| (white - image.get(x, y, 0) as f64) / scale;
    let (mut sx, mut sy) = (0.0, 0.0);
    for center in [left, right] {
        let (ex, ey) = cam.project(&center);
        let inner = eye_r - 1.0;
        let in_eye = |x: usize, y: usize| ((x as f64 - ex).powi(2) + (y as f64 - ey).powi(2)).sqrt() <= inner;
        let x0 = (ex - inner).floor().max(0.0) as usize;
        let x1 = ((ex + inner).ceil() as usize).min(image.width - 1);
        let y0 = (ey - inner).floor().max(0.0) as usize;
        let y1 = ((ey + inner).ceil() as usize).min(image.height - 1);
        // Threshold pass finds the dark blob, then an unclamped coverage
        // centroid over a window around it gives the sub-pixel center.
        let (mut w, mut mx, mut my) = (0.0, 0.0, 0.0);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if in_eye(x, y) && weight(x, y) > 0.5 {
                    w += 1.0;
                    mx += x as f64;
                    my += y as f64;
                }
            }
        }
        if w == 0.0 {
            return Err(DataError::Oracle("no dark pixels inside the eye window".into()));
        }
        let (bx, by) = (mx / w, my / w);
        let reach = iris_r + 1.5;
        let (mut w, mut mx, mut my) = (0.0, 0.0, 0.0);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let near = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)).sqrt() <= reach;
                if in_eye(x, y) && near {
                    let c = weight(x, y);
                    w += c;
                    mx += c * x as f64;
                    my += c * y as f64;
                }
            }
        }
        if w <= 0.0 {
            return Err(DataError::Oracle("iris window has no coverage".into()));
        }
        sx += (mx / w - ex) / px_per_mm;
        sy += (my / w - ey) / px_per_mm;
    }
    let amp = cfg.gain * cfg.eye_radius;
    let (dx, dy) = (sx / 2.0, sy / 2.0);
    let yaw = (dx / amp).clamp(-1.0, 1.0).asin();
    let pitch = (-dy / amp).clamp(-1.0, 1.0).asin();
    Ok((pitch, yaw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SynthConfig::default().validate().unwrap();
        let bad = SynthConfig {
            iris_fraction: 0.6,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn centered_label_is_symmetric() {
        let cfg = SynthConfig::clean(128);
        let r = synth_render(&cfg, 0.0, 0.0, &frontal_pose(&cfg), 1).unwrap();
        let img = &r.image;
        // cx = (R - 1) / 2, so column x mirrors to R - 1 - x.
        for y in 0..img.height {
            for x in 0..img.width / 2 {
                let a = img.get(x, y, 0) as i32;
                let b = img.get(img.width - 1 - x, y, 0) as i32;
                assert!((a - b).abs() <= 1, "({x},{y}) {a} vs {b}");
            }
        }
        let cfg = SynthConfig::clean(512);
        let r = synth_render(&cfg, 0.0, 0.0, &frontal_pose(&cfg), 1).unwrap();
        let (p, yw) = oracle_gaze(&r.image, &cfg).unwrap();
        assert!(p.abs().to_degrees() < 0.1 && yw.abs().to_degrees() < 0.1, "{p} {yw}");
    }

    #[test]
    fn out_of_range_label_rejected() {
        let cfg = SynthConfig::clean(64);
        assert!(matches!(
            synth_render(&cfg, 0.6, 0.0, &frontal_pose(&cfg), 0),
            Err(DataError::Label(_))
        ));
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = SynthConfig {
            raw_resolution: 96,
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = cfg.sample_pose(&mut rng);
        let a = synth_render(&cfg, 0.2, -0.3, &pose, 9).unwrap();
        let b = synth_render(&cfg, 0.2, -0.3, &pose, 9).unwrap();
        assert_eq!(a, b);
    }
}
