//! Pinhole camera model.
//!
//! Camera frame: +Z is the optical axis, +Y is the camera "up" and +X points
//! to the camera's left, which keeps the frame right-handed. A pose with yaw 0
//! and pitch pi/2 at the origin has the identity world-to-camera rotation.
//! Image coordinates are `u = cx + f*X/Z`, `v = cy + f*Y/Z` with the principal
//! point at the image centre; the image spans `[0, W] x [0, H]`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Matrix3x4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{yaw_rotation, CanonicalPose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    /// Horizontal field of view, radians.
    pub hfov: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            width: 200,
            height: 200,
            hfov: FRAC_PI_2,
            near: 1.0,
            far: 100.0,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 1
            && self.height >= 1
            && self.hfov > 0.0
            && self.hfov < std::f64::consts::PI
            && self.near > 0.0
            && self.near < self.far;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * f64::from(self.width) / (0.5 * self.hfov).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * f64::from(self.width), 0.5 * f64::from(self.height))
    }

    pub fn pixel_count(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

pub fn intrinsic_matrix(intr: &Intrinsics) -> Matrix3<f64> {
    let f = intr.focal();
    let (cx, cy) = intr.principal_point();
    Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
}

fn pitch_rotation(pitch: f64) -> Matrix3<f64> {
    // Tilt about the camera X axis by (pi/2 - pitch).
    let (s, c) = (FRAC_PI_2 - pitch).sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Camera-to-world rotation: pitch about the camera X axis, then yaw about
/// world vertical.
pub fn camera_to_world(yaw: f64, pitch: f64) -> Matrix3<f64> {
    yaw_rotation(yaw) * pitch_rotation(pitch)
}

/// Derivative of [`camera_to_world`] with respect to yaw.
pub fn camera_to_world_d_yaw(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    let d_yaw = Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s);
    d_yaw * pitch_rotation(pitch)
}

/// Derivative of [`camera_to_world`] with respect to pitch.
pub fn camera_to_world_d_pitch(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let (s, c) = (FRAC_PI_2 - pitch).sin_cos();
    // d/da of the X rotation, times da/dpitch = -1.
    let d_tilt = Matrix3::new(0.0, 0.0, 0.0, 0.0, s, c, 0.0, -c, s);
    yaw_rotation(yaw) * d_tilt
}

pub fn extrinsic_matrix(pose: &CanonicalPose) -> Matrix3x4<f64> {
    let r = camera_to_world(pose.yaw, pose.pitch).transpose();
    let t = -(r * pose.position);
    let mut m = Matrix3x4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.set_column(3, &t);
    m
}

/// Pixel coordinates and camera-axis depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

/// Projection below this depth magnitude is degenerate.
pub const DEGENERATE_DEPTH: f64 = 1e-12;

/// Intrinsic and extrinsic matrices of one sensor, plus the decomposed pose
/// used by the hot paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraMatrices {
    pub intrinsic: Matrix3<f64>,
    pub extrinsic: Matrix3x4<f64>,
    /// World-to-camera rotation (the rotation block of `extrinsic`).
    #[serde(skip)]
    rotation: Matrix3<f64>,
    #[serde(skip)]
    position: Vec3,
    #[serde(skip)]
    projection: Matrix3x4<f64>,
}

impl CameraMatrices {
    pub fn new(intr: &Intrinsics, pose: &CanonicalPose) -> Self {
        let intrinsic = intrinsic_matrix(intr);
        let extrinsic = extrinsic_matrix(pose);
        Self {
            intrinsic,
            extrinsic,
            rotation: extrinsic.fixed_view::<3, 3>(0, 0).into_owned(),
            position: pose.position,
            projection: intrinsic * extrinsic,
        }
    }

    pub fn focal(&self) -> f64 {
        self.intrinsic[(0, 0)]
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.intrinsic[(0, 2)], self.intrinsic[(1, 2)])
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    pub fn world_to_camera_rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// World point in camera coordinates.
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.position)
    }

    pub fn to_world(&self, q: &Vec3) -> Vec3 {
        self.rotation.transpose() * q + self.position
    }

    /// `None` when the point lies (numerically) in the camera plane.
    pub fn project(&self, p: &Vec3) -> Option<ImagePoint> {
        let h = self.projection * Vector4::new(p.x, p.y, p.z, 1.0);
        if h.z.abs() < DEGENERATE_DEPTH {
            return None;
        }
        Some(ImagePoint {
            u: h.x / h.z,
            v: h.y / h.z,
            d: h.z,
        })
    }

    pub fn unproject(&self, ip: &ImagePoint) -> Result<Vec3> {
        if !(ip.d > 0.0) {
            return Err(Error::InvalidInput(format!(
                "cannot unproject non-positive depth {}",
                ip.d
            )));
        }
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        let q = Vec3::new((ip.u - cx) * ip.d / f, (ip.v - cy) * ip.d / f, ip.d);
        Ok(self.to_world(&q))
    }
}

pub fn project(p: &Vec3, cams: &CameraMatrices) -> Option<ImagePoint> {
    cams.project(p)
}

pub fn unproject(ip: &ImagePoint, cams: &CameraMatrices) -> Result<Vec3> {
    cams.unproject(ip)
}

/// Inclusive frustum test.
pub fn in_frustum(ip: &ImagePoint, intr: &Intrinsics) -> bool {
    (0.0..=f64::from(intr.width)).contains(&ip.u)
        && (0.0..=f64::from(intr.height)).contains(&ip.v)
        && (intr.near..=intr.far).contains(&ip.d)
}
