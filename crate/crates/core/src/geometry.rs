//! Rigid-body poses, body-frame twists, the pinhole camera and pose sampling.
//!
//! A [`Pose`] maps camera-frame coordinates into the world frame
//! (`p_world = R * p_cam + t`). Twists are expressed in the camera frame,
//! the usual eye-in-hand convention, and are applied by right-multiplying
//! the SE(3) exponential.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Rigid transform stored as a unit quaternion and a translation in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::new(x, y, z))
    }

    /// Pure rotation about `axis` by `angle` radians.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(axis.normalize() * angle), Vec3::zeros())
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        let q = self.rotation.quaternion();
        write!(
            f,
            "Pose(t: [{:.4}, {:.4}, {:.4}], q: [w {:.4}, x {:.4}, y {:.4}, z {:.4}])",
            t.x, t.y, t.z, q.w, q.i, q.j, q.k
        )
    }
}

/// Group composition `a ∘ b`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// 6-DOF velocity: linear part in m/s, angular part in rad/s, camera frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vec3,
    pub angular: Vec3,
}

impl Twist {
    pub fn new(linear: Vec3, angular: Vec3) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            linear: Vec3::new(v[0], v[1], v[2]),
            angular: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        ]
    }

    pub fn scale(&self, s: f64) -> Twist {
        Twist::new(self.linear * s, self.angular * s)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Rescales each part independently so its norm does not exceed the limit.
    pub fn clamp_norms(&self, max_linear: f64, max_angular: f64) -> Twist {
        fn clamp(v: Vec3, max: f64) -> Vec3 {
            let n = v.norm();
            if n > max && n > 0.0 {
                v * (max / n)
            } else {
                v
            }
        }
        Twist::new(clamp(self.linear, max_linear), clamp(self.angular, max_angular))
    }
}

/// SE(3) exponential of a body twist `(rho, phi)` (translation part first).
pub fn se3_exp(rho: &Vec3, phi: &Vec3) -> Pose {
    let theta = phi.norm();
    let rotation = UnitQuaternion::from_scaled_axis(*phi);
    let k = phi.cross_matrix();
    let (a, b) = if theta < 1e-6 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let v = Matrix3::identity() + k * a + k * k * b;
    Pose::new(rotation, v * rho)
}

/// Advances `pose` by the body-frame twist `v` held constant for `dt` seconds.
pub fn integrate_twist(pose: &Pose, v: &Twist, dt: f64) -> Pose {
    let step = se3_exp(&(v.linear * dt), &(v.angular * dt));
    let mut next = pose.compose(&step);
    next.rotation = UnitQuaternion::new_normalize(next.rotation.into_inner());
    next
}

/// Translation error (meters) and geodesic rotation error (degrees, in `[0, 180]`).
pub fn pose_error(current: &Pose, target: &Pose) -> (f64, f64) {
    let te = (current.translation - target.translation).norm();
    let q_rel = current.rotation.inverse() * target.rotation;
    let q = q_rel.quaternion();
    // atan2 form of 2·acos(|w|): same angle, no precision loss near zero
    let re = (2.0 * q.imag().norm().atan2(q.w.abs())).to_degrees();
    (te, re)
}

/// Translation error expressed in the current camera frame and the
/// rotation-log of the relative orientation `R_cᵀ R_t`.
pub fn decoupled_log(current: &Pose, target: &Pose) -> (Vec3, Vec3) {
    let inv = current.rotation.inverse();
    let t_err = inv * (target.translation - current.translation);
    // q⁻¹·q rounds to a few ulps off identity; the goal must map to exact zero
    let phi = if current.rotation == target.rotation {
        Vec3::zeros()
    } else {
        (inv * target.rotation).scaled_axis()
    };
    (t_err, phi)
}

/// Pinhole intrinsics. Pixel `(u, v)` with `u` to the right and `v` down;
/// the optical axis is `+z` in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub z_near: f64,
    pub z_far: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
            z_near: 0.05,
            z_far: 5.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(self.z_near > 0.0 && self.z_near < self.z_far) {
            return Err(Error::InvalidArgument("require 0 < z_near < z_far".into()));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        Ok(())
    }

    /// Pixel coordinates of a camera-frame point, ignoring frustum bounds.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    pub fn in_frustum(&self, p: &Vec3) -> bool {
        if !(p.z >= self.z_near && p.z <= self.z_far) {
            return false;
        }
        let (u, v) = self.project(p);
        (0.0..=self.width).contains(&u) && (0.0..=self.height).contains(&v)
    }
}

/// Upright cylinder `S(r, h)` centred at `center`, axis along world `z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderRegion {
    pub radius: f64,
    pub height: f64,
    pub center: Vec3,
}

impl Default for CylinderRegion {
    fn default() -> Self {
        Self {
            radius: 0.15,
            height: 0.25,
            center: Vec3::zeros(),
        }
    }
}

impl CylinderRegion {
    pub fn validate(&self) -> Result<()> {
        if self.radius > 0.0 && self.height > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument("cylinder radius and height must be positive".into()))
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let d = p - self.center;
        (d.x * d.x + d.y * d.y).sqrt() <= self.radius + 1e-12 && d.z.abs() <= self.height / 2.0 + 1e-12
    }

    /// Uniform sample from the solid cylinder.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let rad = self.radius * rng.random::<f64>().sqrt();
        let ang = rng.random_range(0.0..2.0 * PI);
        let z = rng.random_range(-0.5..0.5) * self.height;
        self.center + Vec3::new(rad * ang.cos(), rad * ang.sin(), z)
    }
}

/// Benchmark difficulty: upper bound on the rotational deviation between
/// the initial and target camera orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    S,
    M,
    L,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::S, Level::M, Level::L];

    pub fn max_deviation_deg(self) -> f64 {
        match self {
            Level::S => 24.06,
            Level::M => 67.38,
            Level::L => 136.46,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::S => "S",
            Level::M => "M",
            Level::L => "L",
        };
        f.write_str(s)
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "S" | "s" => Ok(Level::S),
            "M" | "m" => Ok(Level::M),
            "L" | "l" => Ok(Level::L),
            other => Err(Error::InvalidArgument(format!("unknown level {other:?}"))),
        }
    }
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

/// Camera orientation at `eye` whose optical axis passes through `target`,
/// with the given roll about that axis.
pub fn look_at(eye: &Vec3, target: &Vec3, roll: f64) -> Pose {
    let z = (target - eye).normalize();
    let mut up = Vec3::z();
    if z.cross(&up).norm() < 1e-6 {
        up = Vec3::x();
    }
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_columns(&[x, y, z]);
    let base = UnitQuaternion::from_matrix(&m);
    let rolled = base * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll);
    Pose::new(rolled, *eye)
}

/// Minimum elevation of the target camera above the region's horizontal plane.
const MIN_ELEVATION_DEG: f64 = 30.0;
const MAX_ELEVATION_DEG: f64 = 85.0;

/// Samples a target pose looking at the region and an initial pose whose
/// orientation deviates from it by `[0.5, 1) × level` degrees.
///
/// The deviation is applied as a rotation about the region centre so the
/// scene stays in view, followed by a translation offset of `[0.1, 0.4] × r`.
pub fn sample_pose_pair<R: Rng + ?Sized>(region: &CylinderRegion, level: Level, rng: &mut R) -> (Pose, Pose) {
    let h = region.height;
    let dist = rng.random_range(1.2 * h..=2.0 * h);
    let (s_lo, s_hi) = (MIN_ELEVATION_DEG.to_radians().sin(), MAX_ELEVATION_DEG.to_radians().sin());
    let sz = rng.random_range(s_lo..=s_hi);
    let az = rng.random_range(0.0..2.0 * PI);
    let c = (1.0 - sz * sz).sqrt();
    let dir = Vec3::new(c * az.cos(), c * az.sin(), sz);
    let eye = region.center + dir * dist;
    let roll = rng.random_range(0.0..2.0 * PI);
    let target = look_at(&eye, &region.center, roll);

    let max_dev = level.max_deviation_deg().to_radians();
    let angle = rng.random_range(0.5 * max_dev..max_dev);
    let axis = random_unit_vector(rng);
    let q = UnitQuaternion::from_scaled_axis(axis * angle);
    let offset_dir = random_unit_vector(rng);
    let offset = offset_dir * rng.random_range(0.1..=0.4) * region.radius;
    let initial = Pose::new(
        q * target.rotation,
        region.center + q * (target.translation - region.center) + offset,
    );
    (initial, target)
}
