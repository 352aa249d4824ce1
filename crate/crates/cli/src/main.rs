use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use servo_core::checkpoint::Checkpoint;
use servo_core::control::train::{train_with, LossCurve, TrainConfig};
use servo_core::control::{ControllerSpec, IbvsConfig};
use servo_core::dataset::{generate_dataset, DataConfig, Dataset};
use servo_core::geometry::Level;
use servo_core::nn::{FusionMode, ModelConfig, ServoNet};
use servo_core::scene::ObjectModel;
use servo_core::shapes::builtin_models;
use servo_core::sim::{ablation_fusion, run_benchmark, BenchmarkConfig, BenchmarkReport};

#[derive(Parser)]
#[command(name = "servo", version, about = "Visual-servoing workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every random stream; required here or in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with [data], [model], [train] and [bench] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Episode worker threads (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and teacher-labelled training episodes.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Directory of object model files (.xyz text or .bin); built-in shapes if omitted.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<Level>>,
    },
    /// Train a model on a dataset and write a checkpoint plus loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Epochs on teacher rollouts.
        #[arg(long)]
        epochs: Option<usize>,
        /// On-policy aggregation rounds after the teacher epochs.
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        fusion: Option<FusionMode>,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss-curve CSV (default: <out>.curve.csv).
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Closed-loop benchmark of checkpoints and baselines.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Output directory for report.csv, report.txt and episodes.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Model checkpoint, optionally `label=path`.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        baseline: Vec<Baseline>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<Level>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Uniform keypoint noise amplitude seen by the controllers.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        mismatch: Option<f64>,
    },
    /// Fusion ablation: one checkpoint per fusion mode on shared runs.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        concat: PathBuf,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<Level>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Recompute a benchmark table from an episode log.
    Report {
        #[arg(long)]
        episodes: PathBuf,
        /// Also write the recomputed CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Ibvs,
    Teacher,
    Zero,
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: Option<u64>,
    data: DataConfig,
    model: ModelConfig,
    train: TrainConfig,
    bench: BenchmarkConfig,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<servo_core::Error> for Failure {
    fn from(e: servo_core::Error) -> Self {
        use servo_core::Error as E;
        match e {
            E::Numerical(_) => Failure::Numerical(e.to_string()),
            E::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn data_err(path: &Path, e: impl Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

type Outcome = Result<(), Failure>;

fn load_config(common: &Common) -> Result<(RunConfig, u64), Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let seed = common
        .seed
        .or(cfg.seed)
        .ok_or_else(|| Failure::Usage("a seed is required (--seed or `seed` in the config)".into()))?;
    cfg.seed = Some(seed);
    if let Some(w) = common.workers {
        cfg.bench.workers = w;
    }
    Ok((cfg, seed))
}

fn load_models(dir: &Option<PathBuf>) -> Result<Vec<ObjectModel>, Failure> {
    match dir {
        Some(d) => {
            let models = ObjectModel::load_dir(d)?;
            if models.is_empty() {
                return Err(data_err(d, "no model files found"));
            }
            Ok(models)
        }
        None => Ok(builtin_models()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| data_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| data_err(path, e))
}

fn gen_data(common: Common, out: PathBuf, models: Option<PathBuf>, scenes: Option<usize>, levels: Option<Vec<Level>>) -> Outcome {
    let (mut cfg, seed) = load_config(&common)?;
    if let Some(n) = scenes {
        cfg.data.scenes = n;
    }
    if let Some(l) = levels {
        cfg.data.levels = l;
    }
    let models = load_models(&models)?;
    let data = generate_dataset(models, &cfg.data, seed)?;
    let mut buf = Vec::new();
    data.write_to(&mut buf)?;
    write_file(&out, &buf)?;
    let s = data.summary();
    println!(
        "scenes {}  episodes {}  steps {}  skipped {}  mean matches {:.1}",
        s.scenes, s.episodes, s.steps, s.skipped, s.mean_matches
    );
    println!("largest scene {} points < budget {}", s.max_scene_points, s.budget);
    Ok(())
}

fn curve_csv(curve: &LossCurve, seed: u64, cfg: &TrainConfig) -> String {
    let provenance = toml::to_string(cfg).unwrap_or_default().replace('\n', " ");
    format!("# servo train seed={seed} config={provenance}\n{}", curve.to_csv())
}

fn train(
    common: Common,
    out: PathBuf,
    data: PathBuf,
    epochs: Option<usize>,
    rounds: Option<usize>,
    fusion: Option<FusionMode>,
    resume: Option<PathBuf>,
    curve: Option<PathBuf>,
) -> Outcome {
    let (mut cfg, seed) = load_config(&common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = rounds {
        cfg.train.on_policy.rounds = r;
    }
    if let Some(f) = fusion {
        cfg.model.fusion = f;
    }
    cfg.train.seed = seed;
    let dataset = Dataset::load(&data)?;
    let (mut model, init_seed, state) = match &resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.state.is_none() {
                return Err(data_err(path, "checkpoint has no optimizer state to resume from"));
            }
            (ck.model, ck.init_seed, ck.state)
        }
        None => (ServoNet::new(cfg.model.clone(), seed)?, seed, None),
    };
    let curve_path = curve.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".curve.csv");
        PathBuf::from(p)
    });
    let mut partial = state.as_ref().map(|s| s.curve.clone()).unwrap_or_default();
    let mut write_err = None;
    let result = train_with(&mut model, &dataset, &cfg.train, state, |p| {
        println!("epoch {:>3}  loss {:.6}  magnitude {:.6}  direction {:.6}", p.epoch, p.loss, p.magnitude, p.direction);
        partial.points.push(*p);
        if let Err(e) = write_file(&curve_path, curve_csv(&partial, seed, &cfg.train).as_bytes()) {
            write_err = Some(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let state = result?;
    write_file(&curve_path, curve_csv(&state.curve, seed, &cfg.train).as_bytes())?;
    let ck = Checkpoint {
        model,
        init_seed,
        train: Some(cfg.train.clone()),
        state: Some(state),
    };
    let mut buf = Vec::new();
    ck.write_to(&mut buf)?;
    write_file(&out, &buf)
}

fn load_net(spec: &str) -> Result<(String, Arc<ServoNet>), Failure> {
    let (label, path) = match spec.split_once('=') {
        Some((l, p)) => (l.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "net".into());
            (stem, p)
        }
    };
    if !path.exists() {
        return Err(data_err(&path, "checkpoint not found"));
    }
    Ok((label, Arc::new(Checkpoint::load(&path)?.model)))
}

fn write_report(out: &Path, report: &BenchmarkReport) -> Outcome {
    fs::create_dir_all(out).map_err(|e| data_err(out, e))?;
    write_file(&out.join("report.csv"), report.to_csv().as_bytes())?;
    write_file(&out.join("report.txt"), report.to_table().as_bytes())?;
    let path = out.join("episodes.jsonl");
    let mut log = Vec::new();
    report.write_episode_log(&mut log).map_err(|e| data_err(&path, e))?;
    write_file(&path, &log)
}

fn bench_config(cfg: &mut RunConfig, seed: u64, levels: Option<Vec<Level>>, runs: Option<usize>) {
    cfg.bench.seed = seed;
    if let Some(l) = levels {
        cfg.bench.levels = l;
    }
    if let Some(r) = runs {
        cfg.bench.runs_per_level = r;
    }
}

#[allow(clippy::too_many_arguments)]
fn bench(
    common: Common,
    out: PathBuf,
    checkpoints: Vec<String>,
    baselines: Vec<Baseline>,
    levels: Option<Vec<Level>>,
    runs: Option<usize>,
    models: Option<PathBuf>,
    noise: [Option<f64>; 3],
) -> Outcome {
    let (mut cfg, seed) = load_config(&common)?;
    bench_config(&mut cfg, seed, levels, runs);
    let [amp, dropout, mismatch] = noise;
    let n = &mut cfg.bench.episode.noise;
    n.noise_amplitude = amp.unwrap_or(n.noise_amplitude);
    n.dropout_ratio = dropout.unwrap_or(n.dropout_ratio);
    n.mismatch_ratio = mismatch.unwrap_or(n.mismatch_ratio);
    let mut specs = Vec::new();
    for c in &checkpoints {
        let (label, model) = load_net(c)?;
        specs.push(ControllerSpec::Net { label, model });
    }
    for b in baselines {
        specs.push(match b {
            Baseline::Ibvs => ControllerSpec::Ibvs(IbvsConfig::default()),
            Baseline::Teacher => ControllerSpec::Teacher {
                gain: cfg.data.teacher_gain,
            },
            Baseline::Zero => ControllerSpec::Zero,
        });
    }
    if specs.is_empty() {
        return Err(Failure::Usage("bench needs at least one --checkpoint or --baseline".into()));
    }
    let models = load_models(&models)?;
    let report = run_benchmark(&models, &specs, &cfg.bench)?;
    print!("{}", report.to_table());
    write_report(&out, &report)
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    common: Common,
    out: PathBuf,
    paths: [PathBuf; 3],
    levels: Option<Vec<Level>>,
    runs: Option<usize>,
    models: Option<PathBuf>,
) -> Outcome {
    let (mut cfg, seed) = load_config(&common)?;
    bench_config(&mut cfg, seed, levels, runs);
    let mut nets = Vec::new();
    for (mode, path) in [FusionMode::Cluster, FusionMode::Full, FusionMode::Concat].into_iter().zip(paths) {
        let (_, model) = load_net(&path.to_string_lossy())?;
        if model.config.fusion != mode {
            return Err(data_err(&path, format!("expected a {mode} fusion model, found {}", model.config.fusion)));
        }
        nets.push((mode.to_string(), model));
    }
    let models = load_models(&models)?;
    let (ablation, report) = ablation_fusion(&models, &nets, &cfg.bench)?;
    print!("{}", ablation.to_table());
    if let Some(w) = &ablation.warning {
        eprintln!("warning: {w}");
    }
    write_report(&out, &report)?;
    let provenance = format!("# servo ablate seed={seed}\n");
    write_file(&out.join("ablation.csv"), (provenance + &ablation.to_csv()).as_bytes())?;
    write_file(&out.join("ablation.txt"), ablation.to_table().as_bytes())
}

fn report(episodes: PathBuf, out: Option<PathBuf>) -> Outcome {
    let file = fs::File::open(&episodes).map_err(|e| data_err(&episodes, e))?;
    let report = BenchmarkReport::read_episode_log(std::io::BufReader::new(file))?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        write_file(&path, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData {
            common,
            out,
            models,
            scenes,
            levels,
        } => gen_data(common, out, models, scenes, levels),
        Command::Train {
            common,
            out,
            data,
            epochs,
            rounds,
            fusion,
            resume,
            curve,
        } => train(common, out, data, epochs, rounds, fusion, resume, curve),
        Command::Bench {
            common,
            out,
            checkpoints,
            baseline,
            levels,
            runs,
            models,
            noise,
            dropout,
            mismatch,
        } => bench(common, out, checkpoints, baseline, levels, runs, models, [noise, dropout, mismatch]),
        Command::Ablate {
            common,
            out,
            cluster,
            full,
            concat,
            levels,
            runs,
            models,
        } => ablate(common, out, [cluster, full, concat], levels, runs, models),
        Command::Report { episodes, out } => report(episodes, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let _ = writeln!(std::io::stderr(), "error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
