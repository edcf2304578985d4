use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sddgs::decouple::{coeff_histogram, partition, render_split, PartitionMode};
use sddgs::deform::Modulation;
use sddgs::error::{Error, Result};
use sddgs::metrics::evaluate;
use sddgs::render::{render_subset, RenderSettings};
use sddgs::scene::{load_camera, save_scene, Camera, FrameSample, GaussianSet};
use sddgs::synth::{generate, Dataset, SyntheticSpec};
use sddgs::train::{log_writer, run_ablation, Ablation, Checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "sddgs", version, about = "4D Gaussian splatting with static/dynamic decoupling")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Fixed-order reductions. Always on; accepted for scripts.
    #[arg(long, global = true, default_value_t = false)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known motion labels.
    GenScene(GenSceneArgs),
    /// Train a scene on a dataset.
    Train(TrainArgs),
    /// Render a scene or checkpoint.
    Render(RenderArgs),
    /// Split a scene into dynamic and static parts.
    Decouple(DecoupleArgs),
    /// Evaluate a scene on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate all five ablation rows.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Spec file (JSON); inline flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 80]
    #[arg(long)]
    n_static: Option<usize>,
    /// [default: 20]
    #[arg(long)]
    n_dynamic: Option<usize>,
    /// Timestamps per camera [default: 24]
    #[arg(long)]
    frames: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    cameras: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    width: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    height: Option<usize>,
    /// Motion amplitude in world units [default: 0.4]
    #[arg(long)]
    amplitude: Option<f64>,
    /// Gaussian pixel noise [default: 0]
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Config file (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Ablation row [default: full, or the config's switches]
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer steps [default: 30000]
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSON-lines loss log [default: <out>.log.jsonl]
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Full,
    Static,
    Dynamic,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene JSON or training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Camera index into the dataset's cameras.txt, or a camera JSON file.
    #[arg(long, default_value = "0")]
    camera: String,
    /// Dataset directory used to resolve a camera index and the background.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Normalized timestamp.
    #[arg(long, default_value_t = 0.0)]
    time: f64,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    subset: Subset,
    /// Partition threshold for the static and dynamic subsets.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Also write the float image next to the PNG (.f32).
    #[arg(long, default_value_t = false)]
    float_dump: bool,
}

#[derive(Args)]
struct DecoupleArgs {
    /// Scene JSON or training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.85)]
    tau_d: f64,
    #[arg(long, default_value_t = 0.2)]
    tau_s: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; enables split renders from its cameras.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Camera index for the split renders.
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Timestamp for the split renders.
    #[arg(long, default_value_t = 0.0)]
    time: f64,
    /// Histogram bins.
    #[arg(long, default_value_t = 10)]
    bins: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Scene JSON or training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Config file (TOML) for thresholds and mask settings [default: the checkpoint's]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate on every frame instead of the held-out timestamps.
    #[arg(long, default_value_t = false)]
    all_frames: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Config file (TOML); the ablation switches are overridden per row.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output table (text); a JSON copy is written alongside.
    #[arg(long)]
    out: PathBuf,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer steps per row [default: 30000]
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("unknown ablation row {s:?} (expected a, b, c, d or full)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        // Only fails if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": e.kind(),
                "code": e.exit_code(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenScene(a) => gen_scene(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Decouple(a) => decouple(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_scene(a: GenSceneArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = read_text(p)?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| Error::parse(p, e.line(), e.column(), e.to_string()))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { spec.$field = v; })*
        };
    }
    set!(seed => seed, n_static => n_static, n_dynamic => n_dynamic, frames => n_frames,
         cameras => n_cameras, width => width, height => height, amplitude => amplitude,
         noise_std => noise_std);
    let scene = generate(&spec)?;
    let ds = Dataset::from_scene(&spec, scene);
    ds.save(&a.out)?;
    println!(
        "wrote {} frames ({} cameras x {} timestamps) to {}",
        ds.frames.len(),
        ds.cameras.len(),
        ds.times.len(),
        a.out.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(row) = a.ablation {
        cfg = cfg.with_ablation(row);
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if a.config.is_none() {
        cfg.background = ds.background();
    }
    let (train_idx, _) = ds.holdout_split(cfg.holdout_every);
    let frames: Vec<FrameSample> = train_idx.iter().map(|&i| ds.frames[i].clone()).collect();
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if a.config.is_none() {
                // Only the step budget may change on resume.
                let steps = cfg.steps;
                cfg = ckpt.config.clone();
                if a.steps.is_some() {
                    cfg.steps = steps;
                }
            }
            Trainer::resume(&frames, ckpt, cfg)?
        }
        None => {
            let init = cfg.initial_scene();
            Trainer::new(&frames, init, cfg)?
        }
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let mut log = log_writer(&log_path)?;
    trainer.run(&mut log)?;
    drop(log);
    trainer.checkpoint().save(&a.out)?;
    println!(
        "trained {} steps, {} primitives -> {}",
        trainer.step_index(),
        trainer.scene().len(),
        a.out.display()
    );
    Ok(())
}

/// Scene plus the config it was trained with, if any.
fn load_model(path: &Path) -> Result<(GaussianSet, Option<TrainConfig>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if sddgs::train::is_checkpoint(&bytes) {
        let ckpt = Checkpoint::from_bytes(&bytes, path)?;
        return Ok((ckpt.scene, Some(ckpt.config)));
    }
    let text = String::from_utf8(bytes).map_err(|e| Error::parse(path, 0, 0, e.to_string()))?;
    let (set, warnings) = GaussianSet::from_json(&text, path)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok((set, None))
}

fn settings_for(cfg: Option<&TrainConfig>, background: [f64; 3]) -> RenderSettings {
    RenderSettings {
        background,
        modulation: match cfg {
            Some(c) if !c.use_w => Modulation::Unit,
            _ => Modulation::Coefficient,
        },
    }
}

fn resolve_camera(spec: &str, data: Option<&Dataset>) -> Result<Camera> {
    if let Ok(i) = spec.parse::<usize>() {
        let ds = data.ok_or_else(|| Error::Contract("a camera index needs --data".into()))?;
        return ds.cameras.get(i).cloned().ok_or_else(|| {
            Error::Contract(format!("camera index {i} out of range ({} cameras)", ds.cameras.len()))
        });
    }
    load_camera(spec)
}

fn render(a: RenderArgs) -> Result<()> {
    let (set, cfg) = load_model(&a.checkpoint)?;
    let ds = a.data.as_ref().map(Dataset::load).transpose()?;
    let cam = resolve_camera(&a.camera, ds.as_ref())?;
    let background = ds.as_ref().map_or_else(|| cfg.as_ref().map_or([0.0; 3], |c| c.background), |d| d.background());
    let settings = settings_for(cfg.as_ref(), background);
    let image = match a.subset {
        Subset::Full => render_subset(&set, &cam, a.time, None, &settings).image,
        Subset::Static | Subset::Dynamic => {
            let part = partition(&set, PartitionMode::Training, a.tau, a.tau)?;
            let (d, s) = render_split(&set, &cam, a.time, &part, &settings)?;
            if matches!(a.subset, Subset::Dynamic) {
                d.image
            } else {
                s.image
            }
        }
    };
    image.save_png(&a.out)?;
    if a.float_dump {
        image.write_float_dump(a.out.with_extension("f32"))?;
    }
    Ok(())
}

fn decouple(a: DecoupleArgs) -> Result<()> {
    let (set, cfg) = load_model(&a.checkpoint)?;
    let part = partition(&set, PartitionMode::Inference, a.tau_d, a.tau_s)?;
    let hist = coeff_histogram(&set, a.bins, a.tau_s, a.tau_d)?;
    create_dir(&a.out)?;
    let n = set.len();
    save_scene(&set.filtered(&part.dynamic_flags(n)), a.out.join("dynamic_scene.json"))?;
    save_scene(&set.filtered(&part.static_flags(n)), a.out.join("static_scene.json"))?;
    let summary = serde_json::json!({
        "tau_d": a.tau_d,
        "tau_s": a.tau_s,
        "dynamic": part.dynamic_indices.len(),
        "static": part.static_indices.len(),
        "unassigned": part.unassigned_indices.len(),
        "unassigned_indices": part.unassigned_indices,
        "histogram": hist,
    });
    write_text(
        &a.out.join("histogram.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    if let Some(dir) = &a.data {
        let ds = Dataset::load(dir)?;
        let cam = resolve_camera(&a.camera.to_string(), Some(&ds))?;
        let settings = settings_for(cfg.as_ref(), ds.background());
        let (d, s) = render_split(&set, &cam, a.time, &part, &settings)?;
        d.image.save_png(a.out.join("dynamic.png"))?;
        s.image.save_png(a.out.join("static.png"))?;
    }
    println!(
        "dynamic {}  static {}  unassigned {}  gap mass {:.4}",
        part.dynamic_indices.len(),
        part.static_indices.len(),
        part.unassigned_indices.len(),
        hist.gap_mass
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (set, ckpt_cfg) = load_model(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    let cfg = match (&a.config, ckpt_cfg) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(c)) => c,
        (None, None) => TrainConfig {
            background: ds.background(),
            ..Default::default()
        },
    };
    let idx: Vec<usize> = if a.all_frames {
        (0..ds.frames.len()).collect()
    } else {
        let (train, held) = ds.holdout_split(cfg.holdout_every);
        if held.is_empty() {
            train
        } else {
            held
        }
    };
    let frames: Vec<FrameSample> = idx.iter().map(|&i| ds.frames[i].clone()).collect();
    let truth = match (&ds.truth, &ds.labels) {
        (Some(t), Some(l)) => Some((t, l.as_slice())),
        _ => None,
    };
    let report = evaluate(&set, &frames, truth, &cfg.eval_options())?;
    write_text(&a.out, &(report.to_json() + "\n"))?;
    println!("{report}");
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if a.config.is_none() {
        cfg.background = ds.background();
    }
    let table = run_ablation(&ds, &cfg)?;
    write_text(&a.out, &format!("{table}\n"))?;
    write_text(
        &a.out.with_extension("json"),
        &(serde_json::to_string_pretty(&table).expect("table serializes") + "\n"),
    )?;
    println!("{table}");
    Ok(())
}
