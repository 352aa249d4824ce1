//! Object point clouds, voxel downsampling and randomized cluster scenes.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::UnitQuaternion;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{random_unit_vector, CylinderRegion, Pose, Vec3};

/// A rigid object given as a point set in its own frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub id: String,
    pub points: Vec<Vec3>,
}

impl ObjectModel {
    pub fn new(id: impl Into<String>, points: Vec<Vec3>) -> Result<Self> {
        let id = id.into();
        if points.is_empty() {
            return Err(Error::Format(format!("model {id} has no points")));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Format(format!("model {id} has non-finite coordinates")));
        }
        Ok(Self { id, points })
    }

    /// Reads a model from disk: `.bin` files hold little-endian f32
    /// triplets, anything else is parsed as one `x y z` triple per line.
    pub fn load(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let points = if path.extension().is_some_and(|e| e == "bin") {
            read_binary_points(file).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
                other => other,
            })?
        } else {
            read_text_points(BufReader::new(file), &path.display().to_string())?
        };
        Self::new(id, points)
    }

    /// Loads every regular file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Format(format!("no model files in {}", dir.display())));
        }
        paths.iter().map(|p| Self::load(p)).collect()
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.points {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.points {
            for v in p.iter() {
                w.write_f32::<LittleEndian>(*v as f32)?;
            }
        }
        Ok(())
    }
}

fn read_text_points<R: BufRead>(r: R, name: &str) -> Result<Vec<Vec3>> {
    let mut points = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{name}:{}: {e}", lineno + 1)))?;
        if vals.len() != 3 {
            return Err(Error::Format(format!("{name}:{}: expected 3 values, got {}", lineno + 1, vals.len())));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
    }
    Ok(points)
}

fn read_binary_points<R: Read>(mut r: R) -> Result<Vec<Vec3>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<binary model>", e))?;
    if bytes.len() % 12 != 0 {
        return Err(Error::Format(format!("binary model length {} is not a multiple of 12", bytes.len())));
    }
    let mut cur = std::io::Cursor::new(bytes);
    let mut points = Vec::new();
    while (cur.position() as usize) < cur.get_ref().len() {
        let x = cur.read_f32::<LittleEndian>().unwrap() as f64;
        let y = cur.read_f32::<LittleEndian>().unwrap() as f64;
        let z = cur.read_f32::<LittleEndian>().unwrap() as f64;
        points.push(Vec3::new(x, y, z));
    }
    Ok(points)
}

/// Replaces the points falling in each occupied voxel by their centroid.
///
/// Output is ordered by voxel index, so the result is independent of the
/// input order up to floating-point summation.
pub fn voxel_downsample(points: &[Vec3], voxel_size: f64) -> Vec<Vec3> {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    let mut cells: BTreeMap<(i64, i64, i64), (Vec3, usize)> = BTreeMap::new();
    for p in points {
        let key = (
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    cells.into_values().map(|(s, n)| s / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub object_id: String,
    pub pose: Pose,
    pub points: Vec<Vec3>,
    pub centroid: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Inclusive range for the number of clusters `N_c`.
    pub clusters: (usize, usize),
    /// Inclusive range for the points drawn per cluster `n_i`.
    pub points_per_cluster: (usize, usize),
    /// Total point budget `N`; the scene always holds strictly fewer points.
    pub budget: usize,
    pub voxel_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            clusters: (2, 6),
            points_per_cluster: (8, 64),
            budget: 512,
            voxel_size: 0.01,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clusters.0 >= 1
            && self.clusters.0 <= self.clusters.1
            && self.points_per_cluster.0 >= 1
            && self.points_per_cluster.0 <= self.points_per_cluster.1
            && self.budget >= 2
            && self.voxel_size > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent scene config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub region: CylinderRegion,
    pub clusters: Vec<Cluster>,
    pub budget: usize,
}

/// A world point tagged with its scene-wide id and owning cluster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenePoint {
    pub id: u32,
    pub cluster: u32,
    pub position: Vec3,
}

impl Scene {
    pub fn total_points(&self) -> usize {
        self.clusters.iter().map(|c| c.points.len()).sum()
    }

    /// All points with ids assigned consecutively in cluster order.
    pub fn points(&self) -> Vec<ScenePoint> {
        let mut out = Vec::with_capacity(self.total_points());
        let mut id = 0u32;
        for (ci, c) in self.clusters.iter().enumerate() {
            for p in &c.points {
                out.push(ScenePoint {
                    id,
                    cluster: ci as u32,
                    position: *p,
                });
                id += 1;
            }
        }
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.total_points() >= self.budget {
            return Err(Error::Format(format!(
                "scene holds {} points, budget {}",
                self.total_points(),
                self.budget
            )));
        }
        for c in &self.clusters {
            if c.points.is_empty() || !self.region.contains(&c.centroid) {
                return Err(Error::Format(format!("cluster {} violates region/size invariant", c.object_id)));
            }
        }
        Ok(())
    }
}

fn mean(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Scene factory holding the object library and its downsampled clouds.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    models: Vec<ObjectModel>,
    downsampled: Vec<Vec<Vec3>>,
    pub region: CylinderRegion,
    pub config: SceneConfig,
}

impl SceneGenerator {
    pub fn new(models: Vec<ObjectModel>, region: CylinderRegion, config: SceneConfig) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("at least one object model is required".into()));
        }
        config.validate()?;
        region.validate()?;
        let downsampled = models.iter().map(|m| voxel_downsample(&m.points, config.voxel_size)).collect();
        Ok(Self {
            models,
            downsampled,
            region,
            config,
        })
    }

    pub fn models(&self) -> &[ObjectModel] {
        &self.models
    }

    /// Draws `N_c` clusters; each is a randomly rotated object whose
    /// centroid is placed uniformly inside the region, populated with `n_i`
    /// points drawn without replacement from the downsampled model.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Scene {
        let config = &self.config;
        let n_clusters = rng.random_range(config.clusters.0..=config.clusters.1);
        let mut clusters = Vec::with_capacity(n_clusters);
        let mut used = 0usize;
        for _ in 0..n_clusters {
            let remaining = config.budget - 1 - used;
            if remaining == 0 {
                break;
            }
            let m = rng.random_range(0..self.models.len());
            let cloud = &self.downsampled[m];
            let requested = rng.random_range(config.points_per_cluster.0..=config.points_per_cluster.1);
            let n = requested.min(cloud.len()).min(remaining);
            let mut picked = index::sample(rng, cloud.len(), n).into_vec();
            picked.sort_unstable();
            let local: Vec<Vec3> = picked.iter().map(|&i| cloud[i]).collect();

            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let rotation = UnitQuaternion::from_scaled_axis(random_unit_vector(rng) * angle);
            let centroid_target = self.region.sample_point(rng);
            let pose = Pose::new(rotation, centroid_target - rotation * mean(&local));
            let points: Vec<Vec3> = local.iter().map(|p| pose.transform_point(p)).collect();
            let centroid = mean(&points);
            used += points.len();
            clusters.push(Cluster {
                object_id: self.models[m].id.clone(),
                pose,
                points,
                centroid,
            });
        }
        Scene {
            region: self.region,
            clusters,
            budget: config.budget,
        }
    }
}

/// One-shot scene construction; see [`SceneGenerator::generate`].
pub fn build_scene<R: Rng + ?Sized>(
    models: &[ObjectModel],
    region: &CylinderRegion,
    config: &SceneConfig,
    rng: &mut R,
) -> Result<Scene> {
    Ok(SceneGenerator::new(models.to_vec(), *region, config.clone())?.generate(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::builtin_models;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn voxel_examples() {
        let p = Vec3::new(0.3, -0.2, 1.7);
        assert_eq!(voxel_downsample(&[p], 0.05), vec![p]);
        let out = voxel_downsample(&[Vec3::zeros(), Vec3::new(0.01, 0.0, 0.0)], 0.05);
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out[0], Vec3::new(0.005, 0.0, 0.0), epsilon = 1e-15);
        let spread: Vec<Vec3> = (0..10).map(|i| Vec3::repeat(i as f64 * 0.2)).collect();
        assert_eq!(voxel_downsample(&spread, 0.05).len(), 10);
        assert!(voxel_downsample(&[], 0.05).is_empty());
    }

    proptest! {
        #[test]
        fn voxel_downsample_idempotent(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..200),
            voxel in 0.01f64..0.5,
        ) {
            let pts: Vec<Vec3> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let once = voxel_downsample(&pts, voxel);
            prop_assert!(once.len() <= pts.len());
            let twice = voxel_downsample(&once, voxel);
            prop_assert_eq!(once.len(), twice.len());
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }
    }


    #[test]
    fn single_cluster_of_five() {
        let models = builtin_models();
        let cfg = SceneConfig {
            clusters: (1, 1),
            points_per_cluster: (5, 5),
            ..SceneConfig::default()
        };
        let scene = build_scene(&models[..1], &CylinderRegion::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(scene.clusters.len(), 1);
        assert_eq!(scene.clusters[0].points.len(), 5);
        scene.check_invariants().unwrap();
        assert_relative_eq!(scene.clusters[0].centroid, mean(&scene.clusters[0].points), epsilon = 1e-15);
    }

    #[test]
    fn scenes_are_deterministic_and_use_all_models() {
        let models = builtin_models();
        assert_eq!(models.len(), 21);
        let gen = SceneGenerator::new(models, CylinderRegion::default(), SceneConfig::default()).unwrap();
        let a = gen.generate(&mut ChaCha8Rng::seed_from_u64(7));
        let b = gen.generate(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..200 {
            let s = gen.generate(&mut ChaCha8Rng::seed_from_u64(seed));
            seen.extend(s.clusters.iter().map(|c| c.object_id.clone()));
        }
        assert_eq!(seen.len(), 21);
    }

    #[test]
    fn budget_strict_over_many_seeds() {
        let models = builtin_models();
        let tight = SceneConfig {
            clusters: (2, 8),
            points_per_cluster: (8, 64),
            budget: 200,
            voxel_size: 0.01,
        };
        for cfg in [SceneConfig::default(), tight] {
            let gen = SceneGenerator::new(models.clone(), CylinderRegion::default(), cfg).unwrap();
            for seed in 0..1000 {
                let s = gen.generate(&mut ChaCha8Rng::seed_from_u64(seed));
                s.check_invariants().unwrap();
            }
        }
    }

    #[test]
    fn oversized_request_is_clamped() {
        let tiny = ObjectModel::new("tiny", vec![Vec3::zeros(), Vec3::x() * 0.05, Vec3::y() * 0.05]).unwrap();
        let cfg = SceneConfig {
            clusters: (1, 1),
            points_per_cluster: (10, 10),
            ..SceneConfig::default()
        };
        let s = build_scene(&[tiny], &CylinderRegion::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.clusters[0].points.len(), 3);
    }

    #[test]
    fn text_and_binary_model_io() {
        let dir = std::env::temp_dir().join(format!("servo-core-models-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let m = ObjectModel::new("m", vec![Vec3::new(0.5, -0.25, 1.0), Vec3::new(0.125, 2.0, -3.5)]).unwrap();
        m.write_text(std::fs::File::create(dir.join("a.xyz")).unwrap()).unwrap();
        m.write_binary(std::fs::File::create(dir.join("b.bin")).unwrap()).unwrap();
        let loaded = ObjectModel::load_dir(&dir).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].points, m.points);
        assert_eq!(loaded[1].points, m.points);
        std::fs::write(dir.join("c.xyz"), "1 2\n").unwrap();
        assert!(matches!(ObjectModel::load(&dir.join("c.xyz")), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
