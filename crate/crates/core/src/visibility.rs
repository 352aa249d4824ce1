//! Hidden-point removal: spherical flipping about the viewpoint followed by
//! a convex hull of the flipped cloud together with the viewpoint itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::hull::convex_hull_3d;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HprParams {
    /// Flip radius as a multiple of the farthest point distance; must exceed 1.
    pub gamma: f64,
}

impl Default for HprParams {
    fn default() -> Self {
        Self { gamma: 100.0 }
    }
}

impl HprParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma > 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("HPR gamma must exceed 1, got {}", self.gamma)))
        }
    }
}

/// Maps each camera-frame point `p` to `p + 2(R - |p|) p / |p|`.
pub fn spherical_flip(points: &[Vec3], radius: f64) -> Result<Vec<Vec3>> {
    points
        .iter()
        .map(|p| {
            let n = p.norm();
            if n == 0.0 {
                return Err(Error::DegenerateDirection);
            }
            Ok(p + p * (2.0 * (radius - n) / n))
        })
        .collect()
}

/// Indices of camera-frame points judged visible from the origin.
///
/// Points at or behind the image plane (`z <= 0`) are never visible.
pub fn hidden_points_removal(points: &[Vec3], params: &HprParams) -> Vec<usize> {
    let front: Vec<usize> = (0..points.len()).filter(|&i| points[i].z > 0.0).collect();
    if front.is_empty() {
        return Vec::new();
    }
    let subset: Vec<Vec3> = front.iter().map(|&i| points[i]).collect();
    let max_norm = subset.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let radius = params.gamma * max_norm;
    let mut flipped = spherical_flip(&subset, radius).expect("points with z > 0 have nonzero norm");
    flipped.push(Vec3::zeros());
    let hull = convex_hull_3d(&flipped);
    hull.vertices
        .into_iter()
        .filter(|&v| v < subset.len())
        .map(|v| front[v])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_unit_vector;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flip_examples() {
        let p = Vec3::new(0.0, 0.6, 0.8);
        assert_relative_eq!(spherical_flip(&[p], 1.0).unwrap()[0], p, epsilon = 1e-15);
        let q = spherical_flip(&[Vec3::new(0.0, 0.0, 1.0)], 2.0).unwrap();
        assert_relative_eq!(q[0], Vec3::new(0.0, 0.0, 3.0), epsilon = 1e-15);
        assert!(matches!(spherical_flip(&[Vec3::zeros()], 1.0), Err(Error::DegenerateDirection)));
    }

    #[test]
    fn flip_preserves_rays_and_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..50)
            .map(|_| random_unit_vector(&mut rng) * rng.random_range(0.1..2.0))
            .collect();
        let out = spherical_flip(&pts, 200.0).unwrap();
        for (p, q) in pts.iter().zip(&out) {
            assert!(p.normalize().cross(&q.normalize()).norm() < 1e-12);
            assert!(p.dot(q) > 0.0);
        }
        for i in 0..10 {
            let j = i + 10;
            assert_relative_eq!(pts[i].angle(&pts[j]), out[i].angle(&out[j]), epsilon = 1e-9);
        }
    }

    #[test]
    fn single_point_visible() {
        assert_eq!(hidden_points_removal(&[Vec3::new(0.1, 0.0, 1.0)], &HprParams::default()), vec![0]);
    }

    #[test]
    fn behind_camera_is_empty() {
        let pts = vec![Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.3, 0.1, -2.0)];
        assert!(hidden_points_removal(&pts, &HprParams::default()).is_empty());
    }

    #[test]
    fn occluded_point_on_same_ray_is_hidden() {
        // A small patch of surface with one point directly behind its centre.
        let mut pts = Vec::new();
        for i in -2..=2 {
            for j in -2..=2 {
                pts.push(Vec3::new(i as f64 * 0.05, j as f64 * 0.05, 0.5));
            }
        }
        let occluder = pts.iter().position(|p| p.x == 0.0 && p.y == 0.0).unwrap();
        pts.push(pts[occluder] * 2.0);
        let vis = hidden_points_removal(&pts, &HprParams { gamma: 100.0 });
        assert!(vis.contains(&occluder));
        assert!(!vis.contains(&(pts.len() - 1)));
    }

    #[test]
    fn camera_facing_hemisphere_fully_visible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let center = Vec3::new(0.0, 0.0, 1.0);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| {
                let mut d = random_unit_vector(&mut rng);
                if d.z > 0.0 {
                    d.z = -d.z;
                }
                // keep strictly inside the front-facing cap seen from the origin
                d.z = d.z.min(-0.3);
                center + d.normalize() * 0.2
            })
            .collect();
        let vis = hidden_points_removal(&pts, &HprParams { gamma: 100.0 });
        assert_eq!(vis.len(), pts.len());
    }
}
