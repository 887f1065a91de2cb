//! Camera-geometry normalization, gaze conversions and the angular metric.
//!
//! Pixel centers sit at integer coordinates: a camera with principal point
//! `(cx, cy)` projects the optical axis onto pixel `(cx, cy)`.

use nalgebra::{Matrix3, Vector3};

use crate::raster::{to_u8, Image};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Face focal length at 224 px output; scaled linearly with resolution.
pub const BASE_FOCAL: f64 = 960.0;
pub const BASE_RESOLUTION: f64 = 224.0;
pub const DEFAULT_FACE_DISTANCE: f64 = 600.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("warp matrix is not invertible")]
    Singular,
    #[error("pitch {0} rad outside (-pi/2, pi/2)")]
    Pitch(f64),
    #[error("invalid normalization spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::Intrinsics(format!("fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Square-pixel camera centered on a `width x height` image.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Head-to-camera rotation and face center (millimeters, camera frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadPose {
    pub rotation: Mat3,
    pub face_center: Vec3,
}

impl HeadPose {
    pub fn new(rotation: Mat3, face_center: Vec3) -> Result<Self, GeometryError> {
        let pose = Self { rotation, face_center };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ortho = (self.rotation * self.rotation.transpose() - Mat3::identity()).abs().max();
        if ortho > 1e-6 || (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::DegeneratePose(format!(
                "rotation is not orthonormal (deviation {ortho:.2e}, det {:.6})",
                self.rotation.determinant()
            )));
        }
        if !(self.face_center.z > 0.0) {
            return Err(GeometryError::DegeneratePose(format!(
                "face center z = {} is not in front of the camera",
                self.face_center.z
            )));
        }
        Ok(())
    }

    /// Same rotation, normalization centered on another point (an eye).
    pub fn centered_at(&self, center: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            face_center: center,
        }
    }
}

/// Target virtual camera of the normalization warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationSpec {
    pub camera: CameraIntrinsics,
    pub distance: f64,
    pub width: usize,
    pub height: usize,
}

impl NormalizationSpec {
    pub fn new(camera: CameraIntrinsics, distance: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        if !(distance > 0.0) || width == 0 || height == 0 {
            return Err(GeometryError::Spec(format!(
                "distance {distance} mm, output {width}x{height}"
            )));
        }
        Ok(Self {
            camera,
            distance,
            width,
            height,
        })
    }

    /// Square output with focal `BASE_FOCAL * size / 224`, so the face covers
    /// the same fraction of the image at every resolution.
    pub fn scaled(size: usize, distance: f64) -> Self {
        Self {
            camera: CameraIntrinsics::centered(BASE_FOCAL * size as f64 / BASE_RESOLUTION, size, size),
            distance,
            width: size,
            height: size,
        }
    }

    pub fn face(size: usize) -> Self {
        Self::scaled(size, DEFAULT_FACE_DISTANCE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationResult {
    pub rotation: Mat3,
    pub scale: Mat3,
    pub warp: Mat3,
}

/// Rotation `M`, scaling `S = diag(1, 1, d_n / |e|)` and image warp
/// `W = C_n S M C_r^-1` for the virtual camera looking at the face center
/// from distance `d_n` with the head's x-axis kept horizontal.
pub fn normalization_transform(
    raw: &CameraIntrinsics,
    pose: &HeadPose,
    spec: &NormalizationSpec,
) -> Result<NormalizationResult, GeometryError> {
    pose.validate()?;
    let e = pose.face_center;
    let dist = e.norm();
    if dist < 1e-9 {
        return Err(GeometryError::DegeneratePose("face center at the camera origin".into()));
    }
    let z = e / dist;
    let hx = pose.rotation.column(0).into_owned();
    let y = z.cross(&hx);
    if y.norm() < 1e-6 {
        return Err(GeometryError::DegeneratePose("head x-axis parallel to the viewing direction".into()));
    }
    let y = y.normalize();
    let x = y.cross(&z).normalize();
    let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let scale = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, spec.distance / dist));
    let warp = spec.camera.matrix() * scale * rotation * raw.inverse();
    Ok(NormalizationResult { rotation, scale, warp })
}

/// Applies a homography to pixel `(x, y)`.
pub fn apply_homography(h: &Mat3, x: f64, y: f64) -> (f64, f64) {
    let p = h * Vec3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

/// Inverse-mapped perspective warp with bilinear sampling. Output pixel `p`
/// samples the source at `W^-1 p`, clamped to the image border.
pub fn warp_image(image: &Image, warp: &Mat3, out_width: usize, out_height: usize) -> Result<Image, GeometryError> {
    let inv = warp.try_inverse().ok_or(GeometryError::Singular)?;
    if !inv.iter().all(|v| v.is_finite()) || warp.determinant().abs() < 1e-300 {
        return Err(GeometryError::Singular);
    }
    let (w, h, c) = (image.width, image.height, image.channels);
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let mut data = Vec::with_capacity(out_width * out_height * c);
    for v in 0..out_height {
        for u in 0..out_width {
            let (sx, sy) = apply_homography(&inv, u as f64, v as f64);
            let sx = if sx.is_finite() { sx.clamp(0.0, max_x) } else { 0.0 };
            let sy = if sy.is_finite() { sy.clamp(0.0, max_y) } else { 0.0 };
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = |x: usize, y: usize| image.get(x, y, ch) as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                data.push(to_u8(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Ok(Image::new(out_width, out_height, c, data).expect("sizes consistent"))
}

pub fn normalize_gaze(g: &Vec3, rotation: &Mat3) -> Vec3 {
    rotation * g
}

pub fn denormalize_gaze(g_n: &Vec3, rotation: &Mat3) -> Vec3 {
    rotation.transpose() * g_n
}

/// Unit gaze vector; `(0, 0)` looks straight at the camera along `-z`.
pub fn pitchyaw_to_vector(pitch: f64, yaw: f64) -> Result<Vec3, GeometryError> {
    if !(pitch.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(GeometryError::Pitch(pitch));
    }
    Ok(Vec3::new(-pitch.cos() * yaw.sin(), -pitch.sin(), -pitch.cos() * yaw.cos()))
}

pub fn vector_to_pitchyaw(v: &Vec3) -> (f64, f64) {
    let v = v.normalize();
    ((-v.y).clamp(-1.0, 1.0).asin(), (-v.x).atan2(-v.z))
}

/// Angle between two directions in degrees.
pub fn angular_error(a: &Vec3, b: &Vec3) -> f64 {
    let c = a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// [`angular_error`] between two (pitch, yaw) labels. Pitch is not range
/// checked here so that unconstrained network outputs can be scored.
pub fn angular_error_pitchyaw(a: (f64, f64), b: (f64, f64)) -> f64 {
    let v = |(p, y): (f64, f64)| Vec3::new(-p.cos() * y.sin(), -p.sin(), -p.cos() * y.cos());
    angular_error(&v(a), &v(b))
}

/// Rotation angle of an orthonormal matrix, in degrees.
pub fn rotation_angle(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Rotation from Euler angles applied as `R_y(yaw) R_x(pitch) R_z(roll)`.
pub fn rotation_from_euler(pitch: f64, yaw: f64, roll: f64) -> Mat3 {
    let rx = nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), pitch);
    let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), yaw);
    let rz = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), roll);
    (ry * rx * rz).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn raw_camera() -> CameraIntrinsics {
        CameraIntrinsics::centered(650.0, 256, 256)
    }

    #[test]
    fn identity_configuration() {
        let spec = NormalizationSpec::face(224);
        let pose = HeadPose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 600.0)).unwrap();
        let r = normalization_transform(&raw_camera(), &pose, &spec).unwrap();
        assert_eq!(r.rotation, Mat3::identity());
        assert_eq!(r.scale, Mat3::identity());
        assert_relative_eq!(r.warp, spec.camera.matrix() * raw_camera().inverse(), epsilon = 1e-12);
        let far = HeadPose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 1200.0)).unwrap();
        let r = normalization_transform(&raw_camera(), &far, &spec).unwrap();
        assert_relative_eq!(r.scale, Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.5)), epsilon = 1e-15);
    }

    #[test]
    fn degenerate_poses_rejected() {
        let spec = NormalizationSpec::face(64);
        let bad = HeadPose {
            rotation: Mat3::identity(),
            face_center: Vec3::new(600.0, 0.0, 1e-4),
        };
        assert!(matches!(
            normalization_transform(&raw_camera(), &bad, &spec),
            Err(GeometryError::DegeneratePose(_))
        ));
        assert!(HeadPose::new(Mat3::identity() * 2.0, Vec3::new(0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn pitchyaw_anchor_and_limits() {
        assert_eq!(pitchyaw_to_vector(0.0, 0.0).unwrap(), Vec3::new(-0.0, -0.0, -1.0));
        let v = pitchyaw_to_vector(std::f64::consts::FRAC_PI_2 - 1e-9, 0.0).unwrap();
        assert_relative_eq!(v, Vec3::new(0.0, -1.0, 0.0), epsilon = 1e-8);
        assert!(pitchyaw_to_vector(std::f64::consts::FRAC_PI_2, 0.0).is_err());
    }

    #[test]
    fn angular_error_anchors() {
        let a = Vec3::new(0.0, 0.0, -1.0);
        assert_eq!(angular_error(&a, &a), 0.0);
        assert_relative_eq!(angular_error(&a, &Vec3::new(0.0, -1.0, 0.0)), 90.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_warp_is_exact() {
        let data: Vec<u8> = (0..35u32).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::new(7, 5, 1, data).unwrap();
        assert_eq!(warp_image(&img, &Mat3::identity(), 7, 5).unwrap(), img);
        let singular = Mat3::zeros();
        assert_eq!(warp_image(&img, &singular, 7, 5), Err(GeometryError::Singular));
    }

    #[test]
    fn scaling_constant_image_stays_constant() {
        let img = Image::filled(8, 8, 3, 77);
        let w = Mat3::from_diagonal(&Vec3::new(2.0, 2.0, 1.0));
        let out = warp_image(&img, &w, 16, 16).unwrap();
        assert!(out.data.iter().all(|&v| v == 77));
    }
}
