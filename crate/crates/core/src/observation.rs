//! Keypoint observations: projection of visible scene points, depth
//! providers, per-frame normalization and training-time augmentation.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};
use crate::scene::Scene;
use crate::visibility::{hidden_points_removal, HprParams};

/// A projected scene point: pixel coordinates and metric depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawKeypoint {
    pub point_id: u32,
    pub cluster_id: u32,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// A keypoint in normalized image coordinates (`[-1, 1]²`) with
/// min-max normalized relative depth (`[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub point_id: u32,
    pub cluster_id: u32,
    pub xy: [f64; 2],
    pub z_norm: f64,
    /// Depth as reported by the provider; metric only for true depth.
    pub depth: f64,
}

/// Projects the scene into the camera at `camera`: frustum culling, hidden
/// point removal, then the pinhole model. Output is ordered by point id.
pub fn project(scene: &Scene, camera: &Pose, intr: &CameraIntrinsics, hpr: &HprParams) -> Vec<RawKeypoint> {
    let mut ids = Vec::new();
    let mut cam_pts: Vec<Vec3> = Vec::new();
    for sp in scene.points() {
        let p = camera.inverse_transform_point(&sp.position);
        if intr.in_frustum(&p) {
            ids.push((sp.id, sp.cluster));
            cam_pts.push(p);
        }
    }
    hidden_points_removal(&cam_pts, hpr)
        .into_iter()
        .map(|i| {
            let (u, v) = intr.project(&cam_pts[i]);
            RawKeypoint {
                point_id: ids[i].0,
                cluster_id: ids[i].1,
                u,
                v,
                depth: cam_pts[i].z,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthMode {
    /// Exact metric depth.
    True,
    /// `a·Z + b` plus bounded uniform noise, as a relative-depth estimator would report.
    AffineRelative,
    /// Metric depth with uniform noise, invalid beyond the sensor range.
    CameraNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthProvider {
    pub mode: DepthMode,
    pub scale: f64,
    pub offset: f64,
    pub noise_amp: f64,
    /// Sensor range for [`DepthMode::CameraNoise`], meters. Unlimited ranges
    /// are left out of serialized configs since JSON has no infinity.
    #[serde(default = "unlimited", skip_serializing_if = "is_unlimited")]
    pub max_range: f64,
}

fn unlimited() -> f64 {
    f64::INFINITY
}

fn is_unlimited(v: &f64) -> bool {
    *v == f64::INFINITY
}

impl Default for DepthProvider {
    fn default() -> Self {
        Self::true_depth()
    }
}

impl DepthProvider {
    pub fn true_depth() -> Self {
        Self {
            mode: DepthMode::True,
            scale: 1.0,
            offset: 0.0,
            noise_amp: 0.0,
            max_range: f64::INFINITY,
        }
    }

    pub fn affine(scale: f64, offset: f64, noise_amp: f64) -> Self {
        Self {
            mode: DepthMode::AffineRelative,
            scale,
            offset,
            noise_amp,
            max_range: f64::INFINITY,
        }
    }

    pub fn camera(noise_amp: f64, max_range: f64) -> Self {
        Self {
            mode: DepthMode::CameraNoise,
            scale: 1.0,
            offset: 0.0,
            noise_amp,
            max_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale > 0.0 && self.noise_amp >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument("depth provider needs scale > 0 and noise >= 0".into()))
        }
    }

    /// Reported depth for a point at metric depth `z`; `None` marks an
    /// invalid reading and drops the keypoint.
    pub fn report<R: Rng + ?Sized>(&self, z: f64, rng: &mut R) -> Option<f64> {
        let noise = |rng: &mut R| {
            if self.noise_amp > 0.0 {
                rng.random_range(-self.noise_amp..=self.noise_amp)
            } else {
                0.0
            }
        };
        match self.mode {
            DepthMode::True => Some(z),
            DepthMode::AffineRelative => Some(self.scale * z + self.offset + noise(rng)),
            DepthMode::CameraNoise => {
                if z > self.max_range {
                    None
                } else {
                    Some(z + noise(rng))
                }
            }
        }
    }
}

/// See [`DepthProvider::report`].
pub fn provider_depth<R: Rng + ?Sized>(provider: &DepthProvider, true_z: f64, rng: &mut R) -> Option<f64> {
    provider.report(true_z, rng)
}

/// Min-max normalization of depths over one frame; all 0.5 when the
/// frame has fewer than two distinct values.
pub fn normalize_depths(depths: &[f64]) -> Vec<f64> {
    let lo = depths.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if depths.len() < 2 || !(hi > lo) {
        return vec![0.5; depths.len()];
    }
    let range = hi - lo;
    depths.iter().map(|d| (d - lo) / range).collect()
}

/// Maps pixels to `[-1, 1]²` and provider depths to per-frame `[0, 1]`.
pub fn normalize<R: Rng + ?Sized>(
    raw: &[RawKeypoint],
    intr: &CameraIntrinsics,
    provider: &DepthProvider,
    rng: &mut R,
) -> Vec<Keypoint> {
    let reported: Vec<(RawKeypoint, f64)> = raw
        .iter()
        .filter_map(|k| provider.report(k.depth, rng).map(|d| (*k, d)))
        .collect();
    let depths: Vec<f64> = reported.iter().map(|(_, d)| *d).collect();
    let z = normalize_depths(&depths);
    reported
        .iter()
        .zip(z)
        .map(|((k, d), z_norm)| Keypoint {
            point_id: k.point_id,
            cluster_id: k.cluster_id,
            xy: [
                (2.0 * k.u / intr.width - 1.0).clamp(-1.0, 1.0),
                (2.0 * k.v / intr.height - 1.0).clamp(-1.0, 1.0),
            ],
            z_norm,
            depth: *d,
        })
        .collect()
}

/// Projection followed by normalization: the full per-frame observation.
pub fn observe<R: Rng + ?Sized>(
    scene: &Scene,
    camera: &Pose,
    intr: &CameraIntrinsics,
    hpr: &HprParams,
    provider: &DepthProvider,
    rng: &mut R,
) -> Vec<Keypoint> {
    normalize(&project(scene, camera, intr, hpr), intr, provider, rng)
}

/// Matched current/target keypoints. `matches` holds `(current, target)`
/// index pairs ordered by the current keypoint's `(cluster_id, point_id)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationPair {
    pub current: Vec<Keypoint>,
    pub target: Vec<Keypoint>,
    pub matches: Vec<(usize, usize)>,
}

impl ObservationPair {
    /// Pairs keypoints that share a point id.
    pub fn from_frames(current: Vec<Keypoint>, target: Vec<Keypoint>) -> Self {
        let by_id: BTreeMap<u32, usize> = target.iter().enumerate().map(|(i, k)| (k.point_id, i)).collect();
        let mut matches: Vec<(usize, usize)> = current
            .iter()
            .enumerate()
            .filter_map(|(i, k)| by_id.get(&k.point_id).map(|&j| (i, j)))
            .collect();
        matches.sort_by_key(|&(i, _)| (current[i].cluster_id, current[i].point_id));
        Self {
            current,
            target,
            matches,
        }
    }

    /// Match indices grouped by the current keypoint's cluster id.
    pub fn clusters(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (m, &(i, _)) in self.matches.iter().enumerate() {
            out.entry(self.current[i].cluster_id).or_default().push(m);
        }
        out
    }

    /// Mean distance between matched keypoints in normalized image units.
    pub fn mean_feature_error(&self) -> f64 {
        if self.matches.is_empty() {
            return f64::INFINITY;
        }
        let sum: f64 = self
            .matches
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (self.current[i].xy, self.target[j].xy);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            })
            .sum();
        sum / self.matches.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub mismatch_ratio: f64,
    pub dropout_ratio: f64,
    pub noise_amplitude: f64,
}

impl AugmentationParams {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| (0.0..1.0).contains(&x);
        if frac(self.mismatch_ratio) && frac(self.dropout_ratio) && (0.0..=0.1).contains(&self.noise_amplitude) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("augmentation parameters out of range: {self:?}")))
        }
    }
}

/// Minimum number of matches kept by dropout.
pub const MIN_MATCHES: usize = 4;

/// Applies, in order: rewiring `⌊mismatch·n⌋` matches to wrong target
/// keypoints, dropping `⌊dropout·n⌋` current keypoints with their matches
/// (never below [`MIN_MATCHES`]), and uniform coordinate noise.
pub fn augment<R: Rng + ?Sized>(pair: &ObservationPair, params: &AugmentationParams, rng: &mut R) -> ObservationPair {
    let mut out = pair.clone();
    let n = out.matches.len();

    let n_mis = (params.mismatch_ratio * n as f64).floor() as usize;
    if n_mis > 0 && out.target.len() >= 2 {
        for m in index::sample(rng, n, n_mis.min(n)).into_vec() {
            let (i, j) = out.matches[m];
            let pid = out.current[i].point_id;
            let candidates: Vec<usize> = (0..out.target.len()).filter(|&t| t != j && out.target[t].point_id != pid).collect();
            if !candidates.is_empty() {
                out.matches[m].1 = candidates[rng.random_range(0..candidates.len())];
            }
        }
    }

    let n_drop = ((params.dropout_ratio * n as f64).floor() as usize).min(n.saturating_sub(MIN_MATCHES));
    if n_drop > 0 {
        let mut dropped = index::sample(rng, n, n_drop).into_vec();
        dropped.sort_unstable();
        let drop_current: std::collections::BTreeSet<usize> = dropped.iter().map(|&m| out.matches[m].0).collect();
        let mut remap = vec![usize::MAX; out.current.len()];
        let mut kept = Vec::with_capacity(out.current.len());
        for (i, k) in out.current.iter().enumerate() {
            if !drop_current.contains(&i) {
                remap[i] = kept.len();
                kept.push(*k);
            }
        }
        out.current = kept;
        out.matches = out
            .matches
            .iter()
            .filter(|(i, _)| remap[*i] != usize::MAX)
            .map(|&(i, j)| (remap[i], j))
            .collect();
    }

    let a = params.noise_amplitude;
    if a > 0.0 {
        for k in out.current.iter_mut().chain(out.target.iter_mut()) {
            for c in k.xy.iter_mut() {
                *c = (*c + rng.random_range(-a..=a)).clamp(-1.0, 1.0);
            }
        }
    }
    out
}
