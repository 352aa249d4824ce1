//! Closed-loop servo episodes on a kinematic camera and the benchmark
//! protocol built on them.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::{Controller, ControllerSpec, StepContext};
use crate::error::{Error, Result};
use crate::geometry::{integrate_twist, pose_error, sample_pose_pair, CameraIntrinsics, CylinderRegion, Level, Pose, Twist};
use crate::graph::build_graph;
use crate::nn::{FusionMode, ServoNet};
use crate::observation::{augment, observe, AugmentationParams, DepthProvider, ObservationPair, MIN_MATCHES};
use crate::scene::{ObjectModel, Scene, SceneConfig, SceneGenerator};
use crate::seeding::{stream_id, stream_rng, tag};
use crate::visibility::HprParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessCriteria {
    pub rotation_deg: f64,
    pub translation_m: f64,
    pub hold_steps: usize,
    /// Mean matched-feature distance in normalized image units.
    pub feature_threshold: f64,
}

impl Default for SuccessCriteria {
    fn default() -> Self {
        Self {
            rotation_deg: 3.0,
            translation_m: 0.03,
            hold_steps: 20,
            feature_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub success: SuccessCriteria,
    pub level: Level,
    pub region: CylinderRegion,
    pub intrinsics: CameraIntrinsics,
    pub hpr: HprParams,
    pub depth: DepthProvider,
    /// Corruption applied to what the controller sees each step.
    pub noise: AugmentationParams,
    /// Commanded speeds are clamped to these limits (m/s, rad/s).
    pub max_linear: f64,
    pub max_angular: f64,
    /// Matches both poses must show for a pose pair to be accepted.
    pub setup_min_matches: usize,
    pub retries: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dt: 0.04,
            max_steps: 600,
            success: SuccessCriteria::default(),
            level: Level::S,
            region: CylinderRegion::default(),
            intrinsics: CameraIntrinsics::default(),
            hpr: HprParams::default(),
            depth: DepthProvider::true_depth(),
            noise: AugmentationParams::none(),
            max_linear: 0.5,
            max_angular: 1.0,
            setup_min_matches: 8,
            retries: 10,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.success;
        if !(self.dt > 0.0 && s.rotation_deg > 0.0 && s.translation_m > 0.0 && s.feature_threshold > 0.0) {
            return Err(Error::InvalidArgument("dt and success thresholds must be positive".into()));
        }
        if s.hold_steps == 0 || self.max_steps < s.hold_steps {
            return Err(Error::InvalidArgument("need 0 < hold_steps <= max_steps".into()));
        }
        if !(self.max_linear > 0.0 && self.max_angular > 0.0) {
            return Err(Error::InvalidArgument("speed limits must be positive".into()));
        }
        self.region.validate()?;
        self.intrinsics.validate()?;
        self.hpr.validate()?;
        self.depth.validate()?;
        self.noise.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureCause {
    Timeout,
    /// Fewer than the minimum number of matches remained in view.
    LostFeatures,
    ControllerError,
    /// Features stayed within threshold to the end but the pose never
    /// passed the terminal check.
    TerminalPose,
    NonFinite,
}

impl FailureCause {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureCause::Timeout => "timeout",
            FailureCause::LostFeatures => "lost-features",
            FailureCause::ControllerError => "controller-error",
            FailureCause::TerminalPose => "terminal-pose",
            FailureCause::NonFinite => "non-finite",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub pose: Pose,
    pub twist: Twist,
    /// Noise-free mean feature error at `pose`.
    pub feature_error: f64,
    pub matches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub cause: Option<FailureCause>,
    /// Translation error at termination, meters.
    pub te: f64,
    /// Rotation error at termination, degrees.
    pub re: f64,
    /// Steps to the start of the satisfied hold window, or `max_steps`.
    pub ts: usize,
    pub wall_time: f64,
    pub trajectory: Vec<TrajectoryStep>,
}

fn count_matches(cur: &ObservationPair) -> usize {
    cur.matches.len()
}

/// Samples a pose pair from which the scene is visible in both views, up
/// to `cfg.retries` extra attempts.
pub fn sample_setup<R: Rng + ?Sized>(scene: &Scene, cfg: &EpisodeConfig, rng: &mut R) -> Option<(Pose, Pose)> {
    for _ in 0..=cfg.retries {
        let (init, target) = sample_pose_pair(&cfg.region, cfg.level, rng);
        let t = observe(scene, &target, &cfg.intrinsics, &cfg.hpr, &DepthProvider::true_depth(), rng);
        if t.len() < cfg.setup_min_matches {
            continue;
        }
        let c = observe(scene, &init, &cfg.intrinsics, &cfg.hpr, &DepthProvider::true_depth(), rng);
        if count_matches(&ObservationPair::from_frames(c, t)) >= cfg.setup_min_matches {
            return Some((init, target));
        }
    }
    None
}

/// Runs the loop from a fixed pose pair. `rng` drives depth-provider and
/// observation noise only.
pub fn run_from<R: Rng + ?Sized>(
    scene: &Scene,
    controller: &mut dyn Controller,
    cfg: &EpisodeConfig,
    init: &Pose,
    target: &Pose,
    rng: &mut R,
) -> EpisodeResult {
    let started = Instant::now();
    controller.reset();
    let target_obs = observe(scene, target, &cfg.intrinsics, &cfg.hpr, &cfg.depth, rng);
    let mut pose = *init;
    let mut trajectory = Vec::new();
    let mut held = 0usize;
    let finish = |pose: &Pose, success: bool, cause: Option<FailureCause>, ts: usize, trajectory: Vec<TrajectoryStep>| {
        let (te, re) = pose_error(pose, target);
        EpisodeResult {
            success,
            cause,
            te,
            re,
            ts,
            wall_time: started.elapsed().as_secs_f64(),
            trajectory,
        }
    };
    for step in 0..cfg.max_steps {
        let current = observe(scene, &pose, &cfg.intrinsics, &cfg.hpr, &cfg.depth, rng);
        let pair = ObservationPair::from_frames(current, target_obs.clone());
        let error = pair.mean_feature_error();
        if pair.matches.len() < MIN_MATCHES {
            return finish(&pose, false, Some(FailureCause::LostFeatures), cfg.max_steps, trajectory);
        }
        held = if error < cfg.success.feature_threshold { held + 1 } else { 0 };
        if held >= cfg.success.hold_steps {
            let (te, re) = pose_error(&pose, target);
            if te <= cfg.success.translation_m && re <= cfg.success.rotation_deg {
                return finish(&pose, true, None, step + 1 - cfg.success.hold_steps, trajectory);
            }
        }
        let seen = augment(&pair, &cfg.noise, rng);
        let ctx = StepContext {
            pair: &seen,
            intrinsics: &cfg.intrinsics,
            current: &pose,
            target,
        };
        let twist = match controller.velocity(&ctx) {
            Ok(t) if t.is_finite() => t.clamp_norms(cfg.max_linear, cfg.max_angular),
            Ok(_) => return finish(&pose, false, Some(FailureCause::NonFinite), cfg.max_steps, trajectory),
            Err(_) => return finish(&pose, false, Some(FailureCause::ControllerError), cfg.max_steps, trajectory),
        };
        trajectory.push(TrajectoryStep {
            pose,
            twist,
            feature_error: error,
            matches: pair.matches.len(),
        });
        pose = integrate_twist(&pose, &twist, cfg.dt);
    }
    let cause = if held >= cfg.success.hold_steps { FailureCause::TerminalPose } else { FailureCause::Timeout };
    finish(&pose, false, Some(cause), cfg.max_steps, trajectory)
}

/// Samples a visible pose pair and runs the loop; errors when no pair
/// passes the visibility check.
pub fn run_episode<R: Rng + ?Sized>(
    scene: &Scene,
    controller: &mut dyn Controller,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let (init, target) = sample_setup(scene, cfg, rng)
        .ok_or_else(|| Error::Unservoable)?;
    Ok(run_from(scene, controller, cfg, &init, &target, rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub levels: Vec<Level>,
    pub runs_per_level: usize,
    /// Episode worker threads; 0 means one per available core.
    pub workers: usize,
    pub scene: SceneConfig,
    /// `level` is overridden per battery.
    pub episode: EpisodeConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            levels: Level::ALL.to_vec(),
            runs_per_level: 50,
            workers: 0,
            scene: SceneConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.runs_per_level == 0 {
            return Err(Error::InvalidArgument("benchmark needs at least one level and run".into()));
        }
        self.scene.validate()?;
        self.episode.validate()
    }

    fn worker_count(&self) -> usize {
        match self.workers {
            0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            n => n,
        }
    }
}

/// One prepared run shared by every controller in a benchmark.
#[derive(Clone, Debug)]
pub struct EpisodeSetup {
    pub level: Level,
    pub run: usize,
    /// Retry index whose scene was accepted.
    pub attempt: usize,
    pub scene: Scene,
    pub init: Pose,
    pub target: Pose,
    /// Identifier of the noise stream, equal across controllers.
    pub noise_stream: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRun {
    pub level: Level,
    pub run: usize,
}

fn level_tag(level: Level) -> u64 {
    level as u64
}

/// Builds the scenes and pose pairs of every run. A run whose scene has no
/// visible pose pair is regenerated up to `episode.retries` times, then
/// skipped.
pub fn prepare_setups(models: &[ObjectModel], cfg: &BenchmarkConfig) -> Result<(Vec<EpisodeSetup>, Vec<SkippedRun>)> {
    cfg.validate()?;
    let gen = SceneGenerator::new(models.to_vec(), cfg.episode.region, cfg.scene.clone())?;
    let mut setups = Vec::new();
    let mut skipped = Vec::new();
    for &level in &cfg.levels {
        let ecfg = EpisodeConfig { level, ..cfg.episode.clone() };
        for run in 0..cfg.runs_per_level {
            let found = (0..=ecfg.retries).find_map(|attempt| {
                let mut rng = stream_rng(cfg.seed, &[tag::EPISODE, level_tag(level), run as u64, attempt as u64]);
                let scene = gen.generate(&mut rng);
                let once = EpisodeConfig { retries: 0, ..ecfg.clone() };
                sample_setup(&scene, &once, &mut rng).map(|(init, target)| (attempt, scene, init, target))
            });
            match found {
                Some((attempt, scene, init, target)) => setups.push(EpisodeSetup {
                    level,
                    run,
                    attempt,
                    scene,
                    init,
                    target,
                    noise_stream: stream_id(&[tag::NOISE, level_tag(level), run as u64]),
                }),
                None => skipped.push(SkippedRun { level, run }),
            }
        }
    }
    Ok((setups, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub controller: String,
    pub level: Level,
    pub run: usize,
    pub noise_stream: u64,
    pub result: EpisodeResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub controller: String,
    pub level: Level,
    pub runs: usize,
    pub successes: usize,
    /// Percent.
    pub sr: f64,
    /// Means over successful runs; NaN when there are none.
    pub te: f64,
    pub re: f64,
    pub ts: f64,
    /// Mean simulated time to success, seconds.
    pub mtt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub rows: Vec<ReportRow>,
    pub skipped: Vec<SkippedRun>,
    pub episodes: Vec<EpisodeRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Aggregates episode records into per-controller, per-level rows.
pub fn aggregate(records: &[EpisodeRecord], controllers: &[String], levels: &[Level], dt: f64) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for c in controllers {
        for &level in levels {
            let runs: Vec<&EpisodeResult> = records
                .iter()
                .filter(|r| &r.controller == c && r.level == level)
                .map(|r| &r.result)
                .collect();
            let ok: Vec<&&EpisodeResult> = runs.iter().filter(|r| r.success).collect();
            let ts = mean(ok.iter().map(|r| r.ts as f64));
            rows.push(ReportRow {
                controller: c.clone(),
                level,
                runs: runs.len(),
                successes: ok.len(),
                sr: if runs.is_empty() { 0.0 } else { 100.0 * ok.len() as f64 / runs.len() as f64 },
                te: mean(ok.iter().map(|r| r.te)),
                re: mean(ok.iter().map(|r| r.re)),
                ts,
                mtt: ts * dt,
            });
        }
    }
    rows
}

fn run_setups(spec: &ControllerSpec, setups: &[EpisodeSetup], cfg: &BenchmarkConfig) -> Vec<EpisodeRecord> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<EpisodeRecord>>> = Mutex::new(vec![None; setups.len()]);
    let workers = cfg.worker_count().min(setups.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                let mut controller = spec.build();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(setup) = setups.get(i) else { break };
                    let ecfg = EpisodeConfig { level: setup.level, ..cfg.episode.clone() };
                    let mut rng = stream_rng(cfg.seed, &[tag::NOISE, level_tag(setup.level), setup.run as u64]);
                    let result = run_from(&setup.scene, controller.as_mut(), &ecfg, &setup.init, &setup.target, &mut rng);
                    out.lock().expect("worker panicked")[i] = Some(EpisodeRecord {
                        controller: spec.label(),
                        level: setup.level,
                        run: setup.run,
                        noise_stream: setup.noise_stream,
                        result,
                    });
                }
            });
        }
    });
    out.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every run executed")).collect()
}

/// Runs every controller on the same prepared runs.
pub fn run_benchmark(models: &[ObjectModel], controllers: &[ControllerSpec], cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let (setups, skipped) = prepare_setups(models, cfg)?;
    run_benchmark_on(&setups, skipped, controllers, cfg)
}

pub fn run_benchmark_on(
    setups: &[EpisodeSetup],
    skipped: Vec<SkippedRun>,
    controllers: &[ControllerSpec],
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    if controllers.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one controller".into()));
    }
    let labels: Vec<String> = controllers.iter().map(ControllerSpec::label).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Error::InvalidArgument(format!("duplicate controller label {l:?}")));
        }
    }
    let mut episodes = Vec::new();
    for spec in controllers {
        episodes.extend(run_setups(spec, setups, cfg));
    }
    Ok(BenchmarkReport {
        seed: cfg.seed,
        config: cfg.clone(),
        rows: aggregate(&episodes, &labels, &cfg.levels, cfg.episode.dt),
        skipped,
        episodes,
    })
}

fn num(x: f64, prec: usize) -> String {
    if x.is_finite() {
        format!("{x:.prec$}")
    } else {
        "nan".into()
    }
}

impl BenchmarkReport {
    fn provenance(&self) -> String {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        format!("# servo benchmark seed={} config={config}\n", self.seed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.provenance();
        s.push_str("controller,level,runs,successes,sr,te_mm,re_deg,ts,mtt_s\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.controller,
                r.level,
                r.runs,
                r.successes,
                num(r.sr, 2),
                num(r.te * 1000.0, 4),
                num(r.re, 4),
                num(r.ts, 2),
                num(r.mtt, 3)
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>5} {:>6} {:>9} {:>9} {:>8} {:>8}\n",
            "controller", "level", "SR(%)", "TE(mm)", "RE(deg)", "TS", "mTT(s)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>5} {:>6} {:>9} {:>9} {:>8} {:>8}",
                r.controller,
                r.level,
                num(r.sr, 1),
                num(r.te * 1000.0, 3),
                num(r.re, 3),
                num(r.ts, 1),
                num(r.mtt, 2)
            );
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(s, "skipped runs: {}", self.skipped.len());
        }
        s
    }

    pub fn row(&self, controller: &str, level: Level) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.controller == controller && r.level == level)
    }

    /// A header object with seed and config, then per episode one JSON
    /// object per step followed by a summary object.
    pub fn write_episode_log<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = LogHeader {
            seed: self.seed,
            config: self.config.clone(),
            skipped: self.skipped.clone(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.episodes {
            for (step, t) in e.result.trajectory.iter().enumerate() {
                let line = StepLine {
                    controller: e.controller.clone(),
                    level: e.level,
                    run: e.run,
                    step,
                    pose: t.pose,
                    twist: t.twist,
                    feature_error: t.feature_error,
                    matches: t.matches,
                };
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n")?;
            }
            let end = EndLine {
                controller: e.controller.clone(),
                level: e.level,
                run: e.run,
                noise_stream: e.noise_stream,
                success: e.result.success,
                cause: e.result.cause,
                te: e.result.te,
                re: e.result.re,
                ts: e.result.ts,
            };
            serde_json::to_writer(&mut *w, &end)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    seed: u64,
    config: BenchmarkConfig,
    skipped: Vec<SkippedRun>,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    controller: String,
    level: Level,
    run: usize,
    step: usize,
    pose: Pose,
    twist: Twist,
    feature_error: f64,
    matches: usize,
}

#[derive(Serialize, Deserialize)]
struct EndLine {
    controller: String,
    level: Level,
    run: usize,
    noise_stream: u64,
    success: bool,
    cause: Option<FailureCause>,
    te: f64,
    re: f64,
    ts: usize,
}

impl BenchmarkReport {
    /// Rebuilds a report, aggregates included, from an episode log. Wall
    /// times are not logged and come back as zero.
    pub fn read_episode_log<R: BufRead>(r: R) -> Result<Self> {
        let bad = |n: usize, e: &dyn std::fmt::Display| Error::Format(format!("episode log line {}: {e}", n + 1));
        let mut lines = r.lines().enumerate();
        let header: LogHeader = match lines.next() {
            Some((n, line)) => serde_json::from_str(&line.map_err(|e| bad(n, &e))?).map_err(|e| bad(n, &e))?,
            None => return Err(Error::Format("empty episode log".into())),
        };
        let mut episodes = Vec::new();
        let mut trajectory = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| bad(n, &e))?;
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(step) = serde_json::from_str::<StepLine>(&line) {
                if step.step != trajectory.len() {
                    return Err(bad(n, &"step out of order"));
                }
                trajectory.push(TrajectoryStep {
                    pose: step.pose,
                    twist: step.twist,
                    feature_error: step.feature_error,
                    matches: step.matches,
                });
                continue;
            }
            let end: EndLine = serde_json::from_str(&line).map_err(|e| bad(n, &e))?;
            episodes.push(EpisodeRecord {
                controller: end.controller,
                level: end.level,
                run: end.run,
                noise_stream: end.noise_stream,
                result: EpisodeResult {
                    success: end.success,
                    cause: end.cause,
                    te: end.te,
                    re: end.re,
                    ts: end.ts,
                    wall_time: 0.0,
                    trajectory: std::mem::take(&mut trajectory),
                },
            });
        }
        if !trajectory.is_empty() {
            return Err(Error::Format("episode log ends inside an episode".into()));
        }
        let mut labels: Vec<String> = Vec::new();
        for e in &episodes {
            if !labels.contains(&e.controller) {
                labels.push(e.controller.clone());
            }
        }
        Ok(Self {
            seed: header.seed,
            rows: aggregate(&episodes, &labels, &header.config.levels, header.config.episode.dt),
            config: header.config,
            skipped: header.skipped,
            episodes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: FusionMode,
    pub label: String,
    pub rows: Vec<ReportRow>,
    /// Mean fusion multiply-adds per step over the runs' initial graphs.
    pub madds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Present when SR(cluster) ≥ SR(full) ≥ SR(concat) fails at some level.
    pub warning: Option<String>,
}

/// Benchmarks one model per fusion mode on shared runs and attaches the
/// fusion operation counts.
pub fn ablation_fusion(
    models: &[ObjectModel],
    nets: &[(String, Arc<ServoNet>)],
    cfg: &BenchmarkConfig,
) -> Result<(AblationReport, BenchmarkReport)> {
    let (setups, skipped) = prepare_setups(models, cfg)?;
    let specs: Vec<ControllerSpec> = nets
        .iter()
        .map(|(label, model)| ControllerSpec::Net {
            label: label.clone(),
            model: model.clone(),
        })
        .collect();
    let report = run_benchmark_on(&setups, skipped, &specs, cfg)?;
    let mut graphs = Vec::new();
    for s in &setups {
        let mut rng = stream_rng(cfg.seed, &[tag::NOISE, level_tag(s.level), s.run as u64]);
        let e = &cfg.episode;
        let t = observe(&s.scene, &s.target, &e.intrinsics, &e.hpr, &e.depth, &mut rng);
        let c = observe(&s.scene, &s.init, &e.intrinsics, &e.hpr, &e.depth, &mut rng);
        if let Ok(g) = build_graph(&ObservationPair::from_frames(c, t)) {
            graphs.push(g);
        }
    }
    let mut rows = Vec::new();
    for (label, model) in nets {
        let mut total = 0u64;
        for g in &graphs {
            total += model.fusion_madds(g)?;
        }
        rows.push(AblationRow {
            mode: model.config.fusion,
            label: label.clone(),
            rows: report.rows.iter().filter(|r| &r.controller == label).cloned().collect(),
            madds: if graphs.is_empty() { 0.0 } else { total as f64 / graphs.len() as f64 },
        });
    }
    let warning = ordering_warning(&rows, &cfg.levels);
    Ok((AblationReport { rows, warning }, report))
}

fn ordering_warning(rows: &[AblationRow], levels: &[Level]) -> Option<String> {
    let sr = |mode: FusionMode, level: Level| {
        rows.iter()
            .find(|r| r.mode == mode)
            .and_then(|r| r.rows.iter().find(|x| x.level == level))
            .map(|x| x.sr)
    };
    let mut broken = Vec::new();
    for &level in levels {
        if let (Some(c), Some(f), Some(k)) =
            (sr(FusionMode::Cluster, level), sr(FusionMode::Full, level), sr(FusionMode::Concat, level))
        {
            if !(c >= f && f >= k) {
                broken.push(format!("{level}: cluster {c:.1} / full {f:.1} / concat {k:.1}"));
            }
        }
    }
    (!broken.is_empty()).then(|| format!("expected SR ordering cluster >= full >= concat not met ({})", broken.join("; ")))
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,label,level,sr,te_mm,re_deg,ts,fusion_madds\n");
        for a in &self.rows {
            for r in &a.rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    a.mode,
                    a.label,
                    r.level,
                    num(r.sr, 2),
                    num(r.te * 1000.0, 4),
                    num(r.re, 4),
                    num(r.ts, 2),
                    num(a.madds, 1)
                );
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>5} {:>6} {:>9} {:>9} {:>8} {:>14}\n",
            "fusion", "level", "SR(%)", "TE(mm)", "RE(deg)", "TS", "madds/step"
        );
        for a in &self.rows {
            for r in &a.rows {
                let _ = writeln!(
                    s,
                    "{:<8} {:>5} {:>6} {:>9} {:>9} {:>8} {:>14}",
                    a.mode.to_string(),
                    r.level,
                    num(r.sr, 1),
                    num(r.te * 1000.0, 3),
                    num(r.re, 3),
                    num(r.ts, 1),
                    num(a.madds, 0)
                );
            }
        }
        if let Some(w) = &self.warning {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}
