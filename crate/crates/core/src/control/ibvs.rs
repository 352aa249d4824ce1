//! Classical point-feature image-based visual servoing.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Twist, Vec3};
use crate::observation::ObservationPair;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum IbvsDepth {
    /// Per-feature depth reported with the current observation.
    Measured,
    /// One constant depth for every feature.
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IbvsConfig {
    /// Gain λ, 1/s.
    pub gain: f64,
    /// Damping μ of the least-squares solve.
    pub damping: f64,
    pub depth: IbvsDepth,
}

impl Default for IbvsConfig {
    fn default() -> Self {
        Self {
            gain: 2.5,
            damping: 1e-6,
            depth: IbvsDepth::Measured,
        }
    }
}

impl IbvsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gain > 0.0 && self.damping >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument("IBVS needs gain > 0 and damping >= 0".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IbvsOutput {
    pub twist: Twist,
    /// Set when `LᵀL` is numerically rank deficient.
    pub low_rank: bool,
}

/// Relative eigenvalue below which `LᵀL` counts as rank deficient.
const RANK_TOL: f64 = 1e-9;

/// `v = −λ (LᵀL + μI)⁻¹ Lᵀ e` with `L` the stacked point interaction
/// matrices at the current features and `e = s − s*` in normalized camera
/// coordinates.
pub fn ibvs_velocity(pair: &ObservationPair, intr: &CameraIntrinsics, cfg: &IbvsConfig) -> Result<IbvsOutput> {
    if pair.matches.len() < 3 {
        return Err(Error::Unservoable);
    }
    let to_camera = |xy: [f64; 2]| {
        let u = (xy[0] + 1.0) * 0.5 * intr.width;
        let v = (xy[1] + 1.0) * 0.5 * intr.height;
        ((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy)
    };
    let m = pair.matches.len();
    let mut l = DMatrix::<f64>::zeros(2 * m, 6);
    let mut e = DVector::<f64>::zeros(2 * m);
    for (k, &(i, j)) in pair.matches.iter().enumerate() {
        let (x, y) = to_camera(pair.current[i].xy);
        let (xs, ys) = to_camera(pair.target[j].xy);
        let z = match cfg.depth {
            IbvsDepth::Measured => pair.current[i].depth,
            IbvsDepth::Constant(z) => z,
        };
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::Numerical(format!("IBVS needs positive depth, got {z}")));
        }
        let iz = 1.0 / z;
        let rows = [
            [-iz, 0.0, x * iz, x * y, -(1.0 + x * x), y],
            [0.0, -iz, y * iz, 1.0 + y * y, -x * y, -x],
        ];
        for (r, row) in rows.iter().enumerate() {
            for (c, &val) in row.iter().enumerate() {
                l[(2 * k + r, c)] = val;
            }
        }
        e[2 * k] = x - xs;
        e[2 * k + 1] = y - ys;
    }
    let ltl: Matrix6<f64> = (l.transpose() * &l).fixed_view::<6, 6>(0, 0).into_owned();
    let lte: Vector6<f64> = (l.transpose() * &e).fixed_rows::<6>(0).into_owned();
    let eig = ltl.symmetric_eigenvalues();
    let max_eig = eig.max();
    let low_rank = eig.min() <= RANK_TOL * max_eig.max(f64::MIN_POSITIVE);
    let damped = ltl + Matrix6::identity() * cfg.damping;
    let sol = damped
        .cholesky()
        .map(|c| c.solve(&lte))
        .or_else(|| damped.pseudo_inverse(1e-12).ok().map(|p| p * lte))
        .ok_or_else(|| Error::Numerical("IBVS solve failed".into()))?;
    let v = -cfg.gain * sol;
    let twist = Twist::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]));
    if !twist.is_finite() {
        return Err(Error::Numerical("IBVS produced a non-finite twist".into()));
    }
    Ok(IbvsOutput { twist, low_rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::Keypoint;

    /// Keypoints from normalized camera coordinates at depth `z`.
    fn frame(pts: &[(f64, f64)], z: f64, intr: &CameraIntrinsics) -> Vec<Keypoint> {
        pts.iter()
            .enumerate()
            .map(|(i, &(x, y))| Keypoint {
                point_id: i as u32,
                cluster_id: 0,
                xy: [
                    2.0 * (x * intr.fx + intr.cx) / intr.width - 1.0,
                    2.0 * (y * intr.fy + intr.cy) / intr.height - 1.0,
                ],
                z_norm: 0.5,
                depth: z,
            })
            .collect()
    }

    fn square(h: f64) -> Vec<(f64, f64)> {
        vec![(-h, -h), (h, -h), (h, h), (-h, h)]
    }

    #[test]
    fn zero_error_gives_zero_twist() {
        let intr = CameraIntrinsics::default();
        let f = frame(&square(0.1), 0.8, &intr);
        let pair = ObservationPair::from_frames(f.clone(), f);
        let out = ibvs_velocity(&pair, &intr, &IbvsConfig::default()).unwrap();
        assert_eq!(out.twist.to_array(), [0.0; 6]);
        assert!(!out.low_rank);
    }

    #[test]
    fn scaled_square_moves_along_optical_axis() {
        // target features spread wider: the camera must approach
        let intr = CameraIntrinsics::default();
        let pair = ObservationPair::from_frames(frame(&square(0.1), 1.0, &intr), frame(&square(0.125), 0.8, &intr));
        let v = ibvs_velocity(&pair, &intr, &IbvsConfig::default()).unwrap().twist.to_array();
        assert!(v[2] > 0.0);
        for (k, c) in v.iter().enumerate() {
            if k != 2 {
                assert!(c.abs() < 1e-9 * v[2].abs(), "component {k} = {c}");
            }
        }
    }

    #[test]
    fn lateral_shift_gives_lateral_velocity() {
        let intr = CameraIntrinsics::default();
        let target: Vec<(f64, f64)> = square(0.1);
        let current: Vec<(f64, f64)> = target.iter().map(|&(x, y)| (x + 0.05, y)).collect();
        let pair = ObservationPair::from_frames(frame(&current, 1.0, &intr), frame(&target, 1.0, &intr));
        let v = ibvs_velocity(&pair, &intr, &IbvsConfig::default()).unwrap().twist.to_array();
        // features right of target: move the camera right (positive x) and/or yaw
        let lateral = v[0].abs();
        assert!(v[0] > 0.0);
        assert!(lateral > v[1].abs() && lateral > v[2].abs());
    }

    #[test]
    fn linear_in_gain() {
        let intr = CameraIntrinsics::default();
        let cur = frame(&[(0.05, 0.02), (-0.1, 0.07), (0.12, -0.09), (0.0, 0.11)], 0.9, &intr);
        let mut tgt = frame(&[(0.02, 0.0), (-0.08, 0.05), (0.1, -0.1), (0.01, 0.1)], 0.8, &intr);
        tgt.iter_mut().for_each(|k| k.depth = 0.8);
        let pair = ObservationPair::from_frames(cur, tgt);
        let one = ibvs_velocity(&pair, &intr, &IbvsConfig { gain: 1.0, ..Default::default() }).unwrap().twist;
        let three = ibvs_velocity(&pair, &intr, &IbvsConfig { gain: 3.0, ..Default::default() }).unwrap().twist;
        for (a, b) in one.to_array().iter().zip(three.to_array()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let intr = CameraIntrinsics::default();
        let two = frame(&[(0.0, 0.0), (0.1, 0.0)], 1.0, &intr);
        assert!(ibvs_velocity(&ObservationPair::from_frames(two.clone(), two), &intr, &IbvsConfig::default()).is_err());
        // three collinear points: rank deficient, still finite
        let line = frame(&[(0.0, 0.0), (0.1, 0.0), (0.2, 0.0)], 1.0, &intr);
        let shifted = frame(&[(0.01, 0.0), (0.11, 0.0), (0.21, 0.0)], 1.0, &intr);
        let out = ibvs_velocity(&ObservationPair::from_frames(shifted, line), &intr, &IbvsConfig::default()).unwrap();
        assert!(out.low_rank);
        assert!(out.twist.is_finite());
    }
}
