//! End-to-end acceptance battery. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any hard criterion fails.
//!
//! `SERVO_ACCEPTANCE=1,4,7` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use servo_core::control::teacher_velocity;
use servo_core::control::train::{train, OnPolicyConfig, TrainConfig};
use servo_core::control::{ControllerSpec, IbvsConfig};
use servo_core::dataset::{generate_dataset, DataConfig};
use servo_core::geometry::{integrate_twist, look_at, pose_error, random_unit_vector, sample_pose_pair, CylinderRegion, Level, Vec3};
use servo_core::graph::build_graph;
use servo_core::nn::{
    cluster_cross_attention, full_cross_attention, grad_check, Bound, FeatureAlign, Fusion, FusionMode, GraphIndex, GruCell,
    InterAggregate, IntraAggregate, Mlp, ModelConfig, ParamStore, ServoNet, Tape, Tensor, Var,
};
use servo_core::observation::{normalize, AugmentationParams, DepthProvider, Keypoint, ObservationPair, RawKeypoint};
use servo_core::shapes::builtin_models;
use servo_core::sim::{ablation_fusion, prepare_setups, run_benchmark_on, BenchmarkConfig, EpisodeConfig};
use servo_core::visibility::{hidden_points_removal, HprParams};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_pair(sizes: &[usize], rng: &mut ChaCha8Rng) -> ObservationPair {
    let mut cur = Vec::new();
    let mut tgt = Vec::new();
    let mut id = 0;
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            let k = |rng: &mut ChaCha8Rng| Keypoint {
                point_id: id,
                cluster_id: c as u32,
                xy: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                z_norm: rng.random(),
                depth: rng.random_range(0.2..1.0),
            };
            cur.push(k(rng));
            tgt.push(k(rng));
            id += 1;
        }
    }
    ObservationPair::from_frames(cur, tgt)
}

// 1 ------------------------------------------------------------------------

fn affine_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let intr = servo_core::geometry::CameraIntrinsics::default();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..200);
        let raw: Vec<RawKeypoint> = (0..n)
            .map(|i| RawKeypoint {
                point_id: i,
                cluster_id: 0,
                u: rng.random_range(0.0..intr.width),
                v: rng.random_range(0.0..intr.height),
                depth: rng.random_range(0.2..1.5),
            })
            .collect();
        let a = 10f64.powf(rng.random_range(-1.0..1.0));
        let b = rng.random_range(-1.0..1.0);
        let truth = normalize(&raw, &intr, &DepthProvider::true_depth(), &mut rng);
        let affine = normalize(&raw, &intr, &DepthProvider::affine(a, b, 0.0), &mut rng);
        for (x, y) in truth.iter().zip(&affine) {
            worst = worst.max((x.z_norm - y.z_norm).abs());
        }
    }
    verdict(worst <= 1e-12, format!("max |Δz| = {worst:.2e} over 1000 frames (tol 1e-12)"))
}

// 2 ------------------------------------------------------------------------

/// Convex solids with exact ray intersection.
enum Solid {
    Ellipsoid { center: Vec3, rot: nalgebra::Rotation3<f64>, axes: Vec3 },
    Cuboid { center: Vec3, rot: nalgebra::Rotation3<f64>, half: Vec3 },
}

impl Solid {
    fn bound(&self) -> (Vec3, f64) {
        match self {
            Solid::Ellipsoid { center, axes, .. } => (*center, axes.max()),
            Solid::Cuboid { center, half, .. } => (*center, half.norm()),
        }
    }

    /// Surface point and outward normal, both in world coordinates.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        match self {
            Solid::Ellipsoid { center, rot, axes } => loop {
                // rejection on the ellipsoid's area element keeps sampling uniform
                let u = random_unit_vector(rng);
                let n_local = Vec3::new(u.x / axes.x, u.y / axes.y, u.z / axes.z);
                let p_local = u.component_mul(axes);
                if rng.random::<f64>() <= n_local.norm() * axes.min() {
                    return (center + rot * p_local, (rot * n_local).normalize());
                }
            },
            Solid::Cuboid { center, rot, half } => {
                let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 0;
                while pick > areas[axis] && axis < 2 {
                    pick -= areas[axis];
                    axis += 1;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vec3::new(
                    rng.random_range(-half.x..half.x),
                    rng.random_range(-half.y..half.y),
                    rng.random_range(-half.z..half.z),
                );
                p[axis] = sign * half[axis];
                let mut n = Vec3::zeros();
                n[axis] = sign;
                (center + rot * p, rot * n)
            }
        }
    }

    /// Entry parameter of the ray `o + t·d` into the solid, if any, for t > 0.
    fn entry(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match self {
            Solid::Ellipsoid { center, rot, axes } => {
                let inv = rot.inverse();
                let ol = (inv * (o - center)).component_div(axes);
                let dl = (inv * d).component_div(axes);
                let (a, b, c) = (dl.dot(&dl), 2.0 * ol.dot(&dl), ol.dot(&ol) - 1.0);
                let disc: f64 = b * b - 4.0 * a * c;
                if disc <= 0.0 {
                    return None;
                }
                let t0 = (-b - disc.sqrt()) / (2.0 * a);
                (t0 > 0.0).then_some(t0)
            }
            Solid::Cuboid { center, rot, half } => {
                let inv = rot.inverse();
                let ol = inv * (o - center);
                let dl = inv * d;
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if dl[k].abs() < 1e-15 {
                        if ol[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let (t1, t2) = ((-half[k] - ol[k]) / dl[k], (half[k] - ol[k]) / dl[k]);
                    lo = lo.max(t1.min(t2));
                    hi = hi.min(t1.max(t2));
                }
                (lo < hi && lo > 0.0).then_some(lo)
            }
        }
    }
}

fn random_solid(center: Vec3, rng: &mut ChaCha8Rng) -> Solid {
    let rot = nalgebra::Rotation3::from_scaled_axis(random_unit_vector(rng) * rng.random_range(0.0..std::f64::consts::PI));
    let dims = Vec3::new(rng.random_range(0.02..0.07), rng.random_range(0.02..0.07), rng.random_range(0.02..0.07));
    if rng.random::<bool>() {
        Solid::Ellipsoid { center, rot, axes: dims }
    } else {
        Solid::Cuboid { center, rot, half: dims }
    }
}

/// Exact ray cast from `eye` against the solids: `p` is visible when the
/// first surface crossed on the way lies within the point radius `eps` of it.
fn raycast_visible(eye: &Vec3, p: &Vec3, solids: &[Solid], eps: f64) -> bool {
    let d = p - eye;
    let first = solids.iter().filter_map(|s| s.entry(eye, &d)).fold(1.0, f64::min);
    (1.0 - first) * d.norm() <= eps
}

/// Median nearest-neighbour distance, the sampling spacing of the cloud.
fn median_spacing(points: &[Vec3]) -> f64 {
    let mut nn: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    nn[nn.len() / 2].sqrt()
}

fn hpr_vs_raycast() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let region = CylinderRegion::default();
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for _ in 0..100 {
        let count = rng.random_range(1..=4);
        let mut solids: Vec<Solid> = Vec::new();
        while solids.len() < count {
            let s = random_solid(region.sample_point(&mut rng), &mut rng);
            let (c, r) = s.bound();
            if solids.iter().all(|o| {
                let (c2, r2) = o.bound();
                (c - c2).norm() > r + r2
            }) {
                solids.push(s);
            }
        }
        let mut points = Vec::new();
        for s in &solids {
            for _ in 0..rng.random_range(600..1500) {
                points.push(s.sample(&mut rng).0);
            }
        }
        let dir = {
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let el = rng.random_range(20f64..80.0).to_radians();
            Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
        };
        let eye = region.center + dir * rng.random_range(0.35..0.7);
        let cam = look_at(&eye, &region.center, 0.0);
        let cam_pts: Vec<Vec3> = points.iter().map(|p| cam.inverse_transform_point(p)).collect();
        let eps = median_spacing(&points);
        let visible: BTreeSet<usize> = hidden_points_removal(&cam_pts, &HprParams { gamma: 100.0 }).into_iter().collect();
        for (i, p) in points.iter().enumerate() {
            match (visible.contains(&i), raycast_visible(&eye, p, &solids, eps)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let recall = tp as f64 / (tp + fneg).max(1) as f64;
    verdict(
        precision >= 0.99 && recall >= 0.95,
        format!("precision {precision:.4} (>= 0.99), recall {recall:.4} (>= 0.95) over 100 scenes"),
    )
}

// 3 ------------------------------------------------------------------------

fn with_random_params(store: &ParamStore, head: Vec<Tensor>, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    // zero-initialized biases are randomized so every parameter path is exercised
    let mut all = head;
    all.extend(store.tensors().iter().map(|t| {
        if t.data().iter().all(|&v| v == 0.0) {
            let mut r = t.clone();
            r.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            r
        } else {
            t.clone()
        }
    }));
    all
}

fn gradient_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-5;
    let mut results: Vec<(&str, f64, f64)> = Vec::new();

    let mut s = ParamStore::new(1);
    let fal = FeatureAlign::new(&mut s, "fal", 4, 6).unwrap();
    let inputs = with_random_params(&s, vec![random_tensor(7, 4, &mut rng)], &mut rng);
    let e = grad_check(|t, v| fal.forward(t, &Bound::from_vars(v[1..].to_vec()), v[0]).unwrap(), &inputs, eps);
    results.push(("feature_align", e, 1e-4));

    let blocks = [(0, 3), (3, 4), (7, 2)];
    let inputs = vec![random_tensor(9, 5, &mut rng), random_tensor(9, 5, &mut rng)];
    let e = grad_check(|t, v| cluster_cross_attention(t, v[0], v[1], &blocks).unwrap(), &inputs, eps);
    results.push(("cluster_cross_attention", e, 1e-4));
    let e = grad_check(|t, v| full_cross_attention(t, v[0], v[1]).unwrap(), &inputs, eps);
    results.push(("full_cross_attention", e, 1e-4));

    let mut s = ParamStore::new(2);
    let fusion = Fusion::new(&mut s, "fusion", FusionMode::Cluster, 5, 3);
    let inputs = with_random_params(&s, inputs, &mut rng);
    let e = grad_check(
        |t, v| {
            let out = fusion.forward(t, &Bound::from_vars(v[2..].to_vec()), v[0], v[1], &blocks).unwrap();
            t.concat_cols(&[out.phi_z, out.phi_z])
        },
        &inputs,
        eps,
    );
    results.push(("depth_embedding", e, 1e-4));

    let g = build_graph(&random_pair(&[3, 4, 2], &mut rng)).unwrap();
    let gi = GraphIndex::new(&g);
    let mut s = ParamStore::new(3);
    let intra = IntraAggregate::new(&mut s, "intra", 6);
    let inputs = with_random_params(&s, vec![random_tensor(gi.nodes, 6, &mut rng)], &mut rng);
    let e = grad_check(|t, v| intra.forward(t, &Bound::from_vars(v[1..].to_vec()), &gi, v[0]), &inputs, eps);
    results.push(("intra_aggregate", e, 1e-4));

    let mut s = ParamStore::new(4);
    let inter = InterAggregate::new(&mut s, "inter", 6);
    let inputs = with_random_params(&s, vec![random_tensor(gi.nodes, 6, &mut rng)], &mut rng);
    let e = grad_check(|t, v| inter.forward(t, &Bound::from_vars(v[1..].to_vec()), &gi, v[0]), &inputs, eps);
    results.push(("inter_aggregate", e, 1e-4));

    let mut s = ParamStore::new(5);
    let gru = GruCell::new(&mut s, "gru", 5, 4);
    let inputs = with_random_params(&s, vec![random_tensor(1, 5, &mut rng), random_tensor(1, 4, &mut rng)], &mut rng);
    let e = grad_check(|t, v| gru.forward(t, &Bound::from_vars(v[2..].to_vec()), v[0], v[1]), &inputs, eps);
    results.push(("gru", e, 1e-4));

    let mut s = ParamStore::new(6);
    let head = Mlp::new(&mut s, "head", &[7, 5, 3]);
    let inputs = with_random_params(&s, vec![random_tensor(1, 7, &mut rng)], &mut rng);
    let e = grad_check(|t, v| head.forward(t, &Bound::from_vars(v[1..].to_vec()), v[0]), &inputs, eps);
    results.push(("velocity_head", e, 1e-4));

    for mode in FusionMode::ALL {
        let cfg = ModelConfig {
            d: 4,
            d_z: 3,
            hidden: 5,
            head_hidden: 4,
            fusion: mode,
            ..Default::default()
        };
        let net = ServoNet::new(cfg, 7).unwrap();
        let g = build_graph(&random_pair(&[3, 2], &mut rng)).unwrap();
        let gi = GraphIndex::new(&g);
        let inputs = with_random_params(&net.store, vec![random_tensor(1, 5, &mut rng)], &mut rng);
        let e = grad_check(
            |t: &mut Tape, v: &[Var]| {
                let out = net.forward(t, &Bound::from_vars(v[1..].to_vec()), &gi, v[0]).unwrap();
                t.concat_cols(&[out.twist, out.hidden])
            },
            &inputs,
            eps,
        );
        results.push((["composed(cluster)", "composed(full)", "composed(concat)"][FusionMode::ALL.iter().position(|&m| m == mode).unwrap()], e, 1e-3));
    }
    let failed: Vec<String> = results.iter().filter(|r| !(r.1 < r.2)).map(|r| format!("{} {:.1e}", r.0, r.1)).collect();
    let worst = results.iter().filter(|r| r.2 == 1e-4).map(|r| r.1).fold(0.0, f64::max);
    let composed = results.iter().filter(|r| r.2 == 1e-3).map(|r| r.1).fold(0.0, f64::max);
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks; worst layer {worst:.1e} (< 1e-4), composed {composed:.1e} (< 1e-3)", results.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

// 4 ------------------------------------------------------------------------

fn teacher_convergence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let region = CylinderRegion::default();
    let (gain, dt) = (2.5, 0.04);
    let mut worst_steps = 0;
    let mut failures = Vec::new();
    for trial in 0..100 {
        let (mut pose, target) = sample_pose_pair(&region, Level::L, &mut rng);
        let (mut te, mut re) = pose_error(&pose, &target);
        let mut converged = None;
        for step in 1..=600 {
            pose = integrate_twist(&pose, &teacher_velocity(&pose, &target, gain), dt);
            let (t2, r2) = pose_error(&pose, &target);
            if t2 > te || r2 > re {
                failures.push(format!("pair {trial} not monotone at step {step}"));
                break;
            }
            (te, re) = (t2, r2);
            if te < 1e-4 && re < 1e-3 {
                converged = Some(step);
                break;
            }
        }
        match converged {
            Some(s) => worst_steps = worst_steps.max(s),
            None if failures.len() < 100 => failures.push(format!("pair {trial} te {te:.1e} re {re:.1e}")),
            None => {}
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("100 level-L pairs converge monotonically; slowest {worst_steps} steps (<= 600)")
        } else {
            failures.into_iter().take(3).collect::<Vec<_>>().join("; ")
        },
    )
}

// 7 ------------------------------------------------------------------------

fn fusion_madds() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 32;
    let measure = |sizes: &[usize], rng: &mut ChaCha8Rng| {
        let n: usize = sizes.iter().sum();
        let mut blocks = Vec::new();
        let mut start = 0;
        for &s in sizes {
            blocks.push((start, s));
            start += s;
        }
        let mut t = Tape::new();
        let xp = t.constant(random_tensor(n, d, rng));
        let xz = t.constant(random_tensor(n, d, rng));
        let before = t.madds();
        cluster_cross_attention(&mut t, xp, xz, &blocks).unwrap();
        let cluster = t.madds() - before;
        let before = t.madds();
        full_cross_attention(&mut t, xp, xz).unwrap();
        (cluster, t.madds() - before)
    };
    let mut graphs = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut single_equal = true;
    for nc in 1..=8 {
        for base in [4usize, 9, 16, 33, 64] {
            for jitter in [0usize, 1, 2] {
                // roughly equal: sizes within ±jitter·10% of the base. Two clusters
                // only reach the 1/2 bound when exactly equal, so they get no jitter.
                let jitter = if nc == 2 { 0 } else { jitter };
                let sizes: Vec<usize> = (0..nc)
                    .map(|_| {
                        let spread = (base as f64 * 0.1 * jitter as f64).round() as i64;
                        (base as i64 + rng.random_range(-spread..=spread)).max(1) as usize
                    })
                    .collect();
                let (c, f) = measure(&sizes, &mut rng);
                graphs += 1;
                if nc == 1 {
                    single_equal &= c == f;
                } else {
                    worst_ratio = worst_ratio.max(c as f64 / f as f64);
                }
            }
        }
    }
    verdict(
        worst_ratio <= 0.5 && single_equal,
        format!("{graphs} graphs; worst cluster/full ratio at N_c >= 2: {worst_ratio:.3} (<= 0.5); N_c = 1 equal: {single_equal}"),
    )
}

// 9 ------------------------------------------------------------------------

fn servo(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_servo")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("servo {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    servo(&["gen-data", "--seed", "9", "--scenes", "12", "--out", &p("data.bin")])?;
    servo(&["train", "--seed", "9", "--data", &p("data.bin"), "--epochs", "2", "--out", &p("model.ckpt")])?;
    servo(&[
        "bench", "--seed", "9", "--checkpoint", &p("model.ckpt"), "--baseline", "ibvs", "--levels", "S", "--runs", "3",
        "--out", &p("bench"), "--workers", "2",
    ])
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = pipeline(a.path()).and_then(|_| pipeline(b.path())) {
        return verdict(false, e);
    }
    let files = ["data.bin", "model.ckpt", "model.ckpt.curve.csv", "bench/report.csv", "bench/episodes.jsonl"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across reruns", files.len())
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

// 5, 6, 8 ------------------------------------------------------------------

/// The trained controller shared by the closed-loop criteria.
struct Trained {
    model: Arc<ServoNet>,
    train_secs: f64,
}

fn train_reference() -> Trained {
    let started = Instant::now();
    let data = generate_dataset(builtin_models(), &DataConfig::default(), 2024).expect("dataset");
    let mut model = ServoNet::new(ModelConfig::default(), 2024).expect("model");
    let cfg = TrainConfig {
        seed: 2024,
        ..Default::default()
    };
    train(&mut model, &data, &cfg).expect("training");
    Trained {
        model: Arc::new(model),
        train_secs: started.elapsed().as_secs_f64(),
    }
}

fn level_s_bench(seed: u64, noise: AugmentationParams) -> BenchmarkConfig {
    BenchmarkConfig {
        seed,
        levels: vec![Level::S],
        runs_per_level: 50,
        workers: 0,
        episode: EpisodeConfig {
            noise,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn controller_quality(trained: &Trained) -> Verdict {
    let started = Instant::now();
    let cfg = level_s_bench(505, AugmentationParams::none());
    let (setups, skipped) = prepare_setups(&builtin_models(), &cfg).expect("setups");
    let spec = ControllerSpec::Net {
        label: "servonet".into(),
        model: trained.model.clone(),
    };
    let report = run_benchmark_on(&setups, skipped, &[spec], &cfg).expect("benchmark");
    let eval_secs = started.elapsed().as_secs_f64();
    let row = &report.rows[0];
    verdict(
        row.sr >= 90.0 && trained.train_secs < 1800.0 && eval_secs < 120.0,
        format!(
            "SR {:.1}% over {} level-S runs (>= 90%); train {:.0} s (< 1800), eval {:.0} s (< 120)",
            row.sr, row.runs, trained.train_secs, eval_secs
        ),
    )
}

fn baseline_ordering(trained: &Trained) -> Verdict {
    let noise = AugmentationParams {
        mismatch_ratio: 0.0,
        dropout_ratio: 0.1,
        noise_amplitude: 0.01,
    };
    let cfg = level_s_bench(606, noise);
    let (setups, skipped) = prepare_setups(&builtin_models(), &cfg).expect("setups");
    let specs = [
        ControllerSpec::Net {
            label: "servonet".into(),
            model: trained.model.clone(),
        },
        ControllerSpec::Ibvs(IbvsConfig::default()),
    ];
    let report = run_benchmark_on(&setups, skipped, &specs, &cfg).expect("benchmark");
    let net = report.row("servonet", Level::S).unwrap().sr;
    let ibvs = report.row("ibvs", Level::S).unwrap().sr;
    verdict(net >= ibvs, format!("noisy level S: ServoNet SR {net:.1}% vs IBVS {ibvs:.1}% on paired runs"))
}

fn ablation_ordering() -> Verdict {
    let data = generate_dataset(
        builtin_models(),
        &DataConfig {
            scenes: 400,
            ..Default::default()
        },
        808,
    )
    .expect("dataset");
    let mut nets = Vec::new();
    for mode in FusionMode::ALL {
        let mut model = ServoNet::new(ModelConfig { fusion: mode, ..Default::default() }, 808).expect("model");
        let cfg = TrainConfig {
            seed: 808,
            epochs: 8,
            on_policy: OnPolicyConfig { rounds: 0, ..Default::default() },
            ..Default::default()
        };
        train(&mut model, &data, &cfg).expect("training");
        nets.push((mode.to_string(), Arc::new(model)));
    }
    let cfg = BenchmarkConfig {
        runs_per_level: 20,
        ..level_s_bench(809, AugmentationParams::none())
    };
    let (ablation, _) = ablation_fusion(&builtin_models(), &nets, &cfg).expect("ablation");
    let srs: Vec<String> = ablation.rows.iter().map(|r| format!("{} {:.0}%", r.mode, r.rows[0].sr)).collect();
    let madds: Vec<String> = ablation.rows.iter().map(|r| format!("{} {:.0}", r.mode, r.madds)).collect();
    match &ablation.warning {
        None => verdict(true, format!("SR {} ; madds/step {}", srs.join(", "), madds.join(", "))),
        Some(w) => verdict(true, format!("WARNING {w}; madds/step {}", madds.join(", "))),
    }
}

// ------------------------------------------------------------------------

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("SERVO_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|set| set.contains(&id));
    let mut failed = Vec::new();
    let mut report = |id: u32, name: &str, limit: Option<f64>, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(id) {
            return;
        }
        let started = Instant::now();
        let mut v = f();
        let secs = started.elapsed().as_secs_f64();
        if let Some(limit) = limit {
            if secs >= limit {
                v.pass = false;
                v.detail.push_str(&format!("; runtime {secs:.1} s exceeds {limit} s"));
            }
        }
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] #{id} {name}: {} ({secs:.1} s)", v.detail);
        if !v.pass {
            failed.push(id);
        }
    };
    report(1, "affine-invariant depth normalization", Some(1.0), &mut affine_invariance);
    report(2, "HPR vs ray-cast visibility", Some(30.0), &mut hpr_vs_raycast);
    report(3, "gradient suite", Some(60.0), &mut gradient_suite);
    report(4, "teacher convergence at level L", Some(10.0), &mut teacher_convergence);
    let needs_model = wanted(5) || wanted(6);
    let trained = needs_model.then(train_reference);
    if let Some(t) = &trained {
        report(5, "controller quality at level S", None, &mut || controller_quality(t));
        report(6, "ServoNet vs IBVS under noise", Some(600.0), &mut || baseline_ordering(t));
    }
    report(7, "fusion multiply-add ratio", Some(1.0), &mut fusion_madds);
    report(8, "fusion ablation ordering (warning only)", None, &mut ablation_ordering);
    report(9, "determinism of gen-data, train, bench", None, &mut determinism);
    if !failed.is_empty() {
        println!("acceptance: {} criterion(s) failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
