//! Training data: teacher rollouts recorded as short windows of matched
//! observations with their velocity labels, and the on-disk format.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container};
use crate::control::teacher_velocity;
use crate::error::{Error, Result};
use crate::graph::build_graph;
use crate::nn::ServoNet;
use crate::geometry::{integrate_twist, sample_pose_pair, CameraIntrinsics, CylinderRegion, Level, Pose, Twist, Vec3};
use crate::observation::{observe, DepthProvider, Keypoint, ObservationPair};
use crate::scene::{Cluster, ObjectModel, Scene, SceneConfig, SceneGenerator};
use crate::seeding::{stream_rng, tag};
use crate::visibility::HprParams;

pub const DATASET_MAGIC: &str = "SERVO-DATASET 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scenes: usize,
    pub region: CylinderRegion,
    pub scene: SceneConfig,
    pub intrinsics: CameraIntrinsics,
    pub hpr: HprParams,
    pub depth: DepthProvider,
    /// Episode `i` uses `levels[i % levels.len()]`.
    pub levels: Vec<Level>,
    /// Recorded steps per episode.
    pub window: usize,
    /// The window starts after `U{0..=max_start}` unrecorded rollout steps.
    pub max_start: usize,
    pub dt: f64,
    pub teacher_gain: f64,
    /// Label speed limits (m/s, rad/s).
    pub max_linear: f64,
    pub max_angular: f64,
    /// Uniform per-component perturbation of the executed twist, so the
    /// rollouts visit states off the teacher's own path.
    pub exec_noise_linear: f64,
    pub exec_noise_angular: f64,
    pub min_matches: usize,
    pub retries: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            region: CylinderRegion::default(),
            scene: SceneConfig::default(),
            intrinsics: CameraIntrinsics::default(),
            hpr: HprParams::default(),
            depth: DepthProvider::true_depth(),
            levels: vec![Level::S, Level::M],
            window: 8,
            max_start: 60,
            dt: 0.04,
            teacher_gain: 2.5,
            max_linear: 0.5,
            max_angular: 1.0,
            exec_noise_linear: 0.05,
            exec_noise_angular: 0.1,
            min_matches: 8,
            retries: 10,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        self.scene.validate()?;
        self.intrinsics.validate()?;
        self.hpr.validate()?;
        self.depth.validate()?;
        if self.levels.is_empty() || self.window == 0 || !(self.dt > 0.0) || !(self.teacher_gain > 0.0) {
            return Err(Error::InvalidArgument("data config needs levels, window > 0, dt > 0 and gain > 0".into()));
        }
        if self.min_matches < 4 {
            return Err(Error::InvalidArgument("min_matches must be at least 4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingStep {
    pub current: Vec<Keypoint>,
    /// Teacher velocity at this state, clamped to the speed limits.
    pub teacher: Twist,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scene: u32,
    pub level: Level,
    pub start_step: u32,
    pub target: Vec<Keypoint>,
    pub steps: Vec<TrainingStep>,
}

impl Episode {
    pub fn pair(&self, step: usize) -> ObservationPair {
        ObservationPair::from_frames(self.steps[step].current.clone(), self.target.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DataConfig,
    pub scenes: Vec<Scene>,
    pub episodes: Vec<Episode>,
    /// Scene indices given up after the retry budget.
    pub skipped: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub scenes: usize,
    pub episodes: usize,
    pub steps: usize,
    pub skipped: usize,
    pub max_scene_points: usize,
    pub budget: usize,
    pub mean_matches: f64,
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_keypoints(kps: &mut [Keypoint]) {
    for k in kps {
        k.xy = [q32(k.xy[0]), q32(k.xy[1])];
        k.z_norm = q32(k.z_norm);
        k.depth = q32(k.depth);
    }
}

fn quantize_twist(t: Twist) -> Twist {
    let a = t.to_array().map(q32);
    Twist::from_array(a)
}

fn quantize_scene(scene: &mut Scene) {
    for c in &mut scene.clusters {
        for p in c.points.iter_mut() {
            *p = p.map(q32);
        }
        c.centroid = c.centroid.map(q32);
        c.pose = quantize_pose(&c.pose);
    }
}

fn quantize_pose(p: &Pose) -> Pose {
    let q = p.rotation.into_inner();
    let coords = q.coords.map(q32);
    Pose::new(
        nalgebra::UnitQuaternion::new_unchecked(nalgebra::Quaternion::from(coords)),
        p.translation.map(q32),
    )
}

fn count_matches(a: &[Keypoint], b: &[Keypoint]) -> usize {
    ObservationPair::from_frames(a.to_vec(), b.to_vec()).matches.len()
}

/// Generates one episode for scene index `index`, or `None` when no
/// usable pose pair was found within the retry budget.
///
/// With a `driver` the camera follows that network (plus execution noise)
/// instead of the teacher; labels are always the teacher's.
fn generate_episode(
    scene: &Scene,
    mut rng: rand_chacha::ChaCha8Rng,
    cfg: &DataConfig,
    index: usize,
    driver: Option<&ServoNet>,
) -> Result<Option<Episode>> {
    let level = cfg.levels[index % cfg.levels.len()];
    let obs = |pose: &Pose, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut k = observe(scene, pose, &cfg.intrinsics, &cfg.hpr, &cfg.depth, rng);
        quantize_keypoints(&mut k);
        k
    };
    for _ in 0..=cfg.retries {
        let (mut pose, target_pose) = sample_pose_pair(&cfg.region, level, &mut rng);
        let target = obs(&target_pose, &mut rng);
        if target.len() < cfg.min_matches || count_matches(&obs(&pose, &mut rng), &target) < cfg.min_matches {
            continue;
        }
        let start = rng.random_range(0..=cfg.max_start);
        let noisy = |label: Twist, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut n = label;
            for k in 0..3 {
                if cfg.exec_noise_linear > 0.0 {
                    n.linear[k] += rng.random_range(-cfg.exec_noise_linear..=cfg.exec_noise_linear);
                }
                if cfg.exec_noise_angular > 0.0 {
                    n.angular[k] += rng.random_range(-cfg.exec_noise_angular..=cfg.exec_noise_angular);
                }
            }
            n.clamp_norms(cfg.max_linear, cfg.max_angular)
        };
        let label_at = |pose: &Pose| {
            teacher_velocity(pose, &target_pose, cfg.teacher_gain).clamp_norms(cfg.max_linear, cfg.max_angular)
        };
        let mut hidden = driver.map(|net| net.zero_hidden());
        // the twist to execute from `pose`; `None` once the features are lost
        let mut act = |pose: &Pose, current: &[Keypoint], rng: &mut rand_chacha::ChaCha8Rng| -> Result<Option<Twist>> {
            let label = label_at(pose);
            let Some(net) = driver else {
                return Ok(Some(noisy(label, rng)));
            };
            let pair = ObservationPair::from_frames(current.to_vec(), target.clone());
            if pair.matches.len() < cfg.min_matches {
                return Ok(None);
            }
            let h = hidden.as_mut().expect("driver has a hidden state");
            let (twist, next) = net.step(&build_graph(&pair)?, h)?;
            *h = next;
            Ok(Some(noisy(twist, rng)))
        };
        let mut lost = false;
        for _ in 0..start {
            let current = if driver.is_some() { obs(&pose, &mut rng) } else { Vec::new() };
            match act(&pose, &current, &mut rng)? {
                Some(exec) => pose = integrate_twist(&pose, &exec, cfg.dt),
                None => {
                    lost = true;
                    break;
                }
            }
        }
        if lost {
            continue;
        }
        let mut steps = Vec::with_capacity(cfg.window);
        for _ in 0..cfg.window {
            let current = obs(&pose, &mut rng);
            if count_matches(&current, &target) < cfg.min_matches {
                break;
            }
            let label = label_at(&pose);
            let Some(exec) = act(&pose, &current, &mut rng)? else {
                break;
            };
            steps.push(TrainingStep {
                current,
                teacher: quantize_twist(label),
            });
            pose = integrate_twist(&pose, &exec, cfg.dt);
        }
        if steps.is_empty() {
            continue;
        }
        let episode = Episode {
            scene: index as u32,
            level,
            start_step: start as u32,
            target,
            steps,
        };
        return Ok(Some(episode));
    }
    Ok(None)
}

/// Generates `cfg.scenes` scenes with one teacher episode each.
pub fn generate_dataset(models: Vec<ObjectModel>, cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let gen = SceneGenerator::new(models, cfg.region, cfg.scene.clone())?;
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut episodes = Vec::with_capacity(cfg.scenes);
    let mut skipped = Vec::new();
    for i in 0..cfg.scenes {
        let mut rng = stream_rng(seed, &[tag::SCENE, i as u64]);
        let mut scene = gen.generate(&mut rng);
        quantize_scene(&mut scene);
        let episode = generate_episode(&scene, rng, cfg, i, None)?;
        scenes.push(scene);
        match episode {
            Some(e) => episodes.push(e),
            None => skipped.push(i as u32),
        }
    }
    Ok(Dataset {
        seed,
        config: cfg.clone(),
        scenes,
        episodes,
        skipped,
    })
}

/// Adds one episode per scene of `data` with `driver` in control: the
/// camera follows the network while the recorded labels stay the teacher's,
/// so the states the network actually reaches get supervised. Each `round`
/// draws fresh pose pairs. Returns the number of episodes added.
pub fn aggregate_on_policy(data: &mut Dataset, driver: &ServoNet, round: u64) -> Result<usize> {
    let mut added = Vec::new();
    for (i, scene) in data.scenes.iter().enumerate() {
        let rng = stream_rng(data.seed, &[tag::ON_POLICY, round, i as u64]);
        if let Some(e) = generate_episode(scene, rng, &data.config, i, Some(driver))? {
            added.push(e);
        }
    }
    let n = added.len();
    data.episodes.extend(added);
    Ok(n)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    scenes: usize,
    episodes: usize,
    skipped: Vec<u32>,
    summary: DatasetSummary,
    config: DataConfig,
}

fn level_code(l: Level) -> u8 {
    match l {
        Level::S => 0,
        Level::M => 1,
        Level::L => 2,
    }
}

fn level_from_code(c: u8) -> Result<Level> {
    match c {
        0 => Ok(Level::S),
        1 => Ok(Level::M),
        2 => Ok(Level::L),
        _ => Err(Error::Format(format!("bad level code {c}"))),
    }
}

fn write_f32s<W: Write>(w: &mut W, vals: &[f64]) -> std::io::Result<()> {
    vals.iter().try_for_each(|&v| w.write_f32::<LittleEndian>(v as f32))
}

fn read_f32s<R: Read, const N: usize>(r: &mut R) -> std::io::Result<[f64; N]> {
    let mut out = [0.0; N];
    for v in out.iter_mut() {
        *v = r.read_f32::<LittleEndian>()? as f64;
    }
    Ok(out)
}

fn write_frame<W: Write>(w: &mut W, kps: &[Keypoint]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(kps.len() as u32)?;
    for k in kps {
        w.write_u32::<LittleEndian>(k.point_id)?;
        w.write_u32::<LittleEndian>(k.cluster_id)?;
        write_f32s(w, &[k.xy[0], k.xy[1], k.z_norm, k.depth])?;
    }
    Ok(())
}

fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Vec<Keypoint>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let point_id = r.read_u32::<LittleEndian>()?;
        let cluster_id = r.read_u32::<LittleEndian>()?;
        let [x, y, z_norm, depth] = read_f32s::<_, 4>(r)?;
        out.push(Keypoint {
            point_id,
            cluster_id,
            xy: [x, y],
            z_norm,
            depth,
        });
    }
    Ok(out)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 4096 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "string too long"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "not UTF-8"))
}

impl Dataset {
    pub fn summary(&self) -> DatasetSummary {
        let steps: usize = self.episodes.iter().map(|e| e.steps.len()).sum();
        let matches: usize = self
            .episodes
            .iter()
            .flat_map(|e| (0..e.steps.len()).map(move |s| e.pair(s).matches.len()))
            .sum();
        DatasetSummary {
            scenes: self.scenes.len(),
            episodes: self.episodes.len(),
            steps,
            skipped: self.skipped.len(),
            max_scene_points: self.scenes.iter().map(Scene::total_points).max().unwrap_or(0),
            budget: self.config.scene.budget,
            mean_matches: if steps > 0 { matches as f64 / steps as f64 } else { 0.0 },
        }
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = Manifest {
            format: "servo-dataset".into(),
            seed: self.seed,
            scenes: self.scenes.len(),
            episodes: self.episodes.len(),
            skipped: self.skipped.clone(),
            summary: self.summary(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut bin = Vec::new();
        self.write_payload(&mut bin).expect("writing to memory");
        write_container(w, DATASET_MAGIC, &text, &bin).map_err(|e| Error::Format(e.to_string()))
    }

    fn write_payload(&self, w: &mut Vec<u8>) -> std::io::Result<()> {
        for s in &self.scenes {
            w.write_u32::<LittleEndian>(s.clusters.len() as u32)?;
            for c in &s.clusters {
                write_str(w, &c.object_id)?;
                let q = c.pose.rotation.into_inner();
                write_f32s(w, &[q.w, q.i, q.j, q.k])?;
                write_f32s(w, c.pose.translation.as_slice())?;
                write_f32s(w, c.centroid.as_slice())?;
                w.write_u32::<LittleEndian>(c.points.len() as u32)?;
                for p in &c.points {
                    write_f32s(w, p.as_slice())?;
                }
            }
        }
        for e in &self.episodes {
            w.write_u32::<LittleEndian>(e.scene)?;
            w.write_u8(level_code(e.level))?;
            w.write_u32::<LittleEndian>(e.start_step)?;
            write_frame(w, &e.target)?;
            w.write_u32::<LittleEndian>(e.steps.len() as u32)?;
            for s in &e.steps {
                write_f32s(w, &s.teacher.to_array())?;
                write_frame(w, &s.current)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: std::io::BufRead>(r: &mut R) -> Result<Self> {
        let (text, bin) = read_container(r, DATASET_MAGIC)?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
        let trunc = |e: std::io::Error| Error::Format(format!("dataset payload: {e}"));
        let mut cur = bin.as_slice();
        let r = &mut cur;
        let mut scenes = Vec::with_capacity(m.scenes);
        for _ in 0..m.scenes {
            let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let mut clusters = Vec::with_capacity(n.min(64));
            for _ in 0..n {
                let object_id = read_str(r).map_err(trunc)?;
                let [w, i, j, k] = read_f32s::<_, 4>(r).map_err(trunc)?;
                let t = read_f32s::<_, 3>(r).map_err(trunc)?;
                let c = read_f32s::<_, 3>(r).map_err(trunc)?;
                let np = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
                let mut points = Vec::with_capacity(np.min(1 << 16));
                for _ in 0..np {
                    let p = read_f32s::<_, 3>(r).map_err(trunc)?;
                    points.push(Vec3::from(p));
                }
                clusters.push(Cluster {
                    object_id,
                    pose: Pose::new(
                        nalgebra::UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(w, i, j, k)),
                        Vec3::from(t),
                    ),
                    points,
                    centroid: Vec3::from(c),
                });
            }
            scenes.push(Scene {
                region: m.config.region,
                clusters,
                budget: m.config.scene.budget,
            });
        }
        let mut episodes = Vec::with_capacity(m.episodes);
        for _ in 0..m.episodes {
            let scene = r.read_u32::<LittleEndian>().map_err(trunc)?;
            let level = level_from_code(r.read_u8().map_err(trunc)?)?;
            let start_step = r.read_u32::<LittleEndian>().map_err(trunc)?;
            let target = read_frame(r).map_err(trunc)?;
            let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let mut steps = Vec::with_capacity(n.min(1 << 12));
            for _ in 0..n {
                let teacher = Twist::from_array(read_f32s::<_, 6>(r).map_err(trunc)?);
                let current = read_frame(r).map_err(trunc)?;
                steps.push(TrainingStep { current, teacher });
            }
            episodes.push(Episode {
                scene,
                level,
                start_step,
                target,
                steps,
            });
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in dataset", r.len())));
        }
        Ok(Dataset {
            seed: m.seed,
            config: m.config,
            scenes,
            episodes,
            skipped: m.skipped,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}
