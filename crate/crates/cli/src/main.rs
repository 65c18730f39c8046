use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use focaldet::detect::{detect, DetectConfig};
use focaldet::encode::encode_targets;
use focaldet::eval::{evaluate, Convention, EvalResult, EvalSetting, SettingName};
use focaldet::io::dataset::{generate_dataset, load_dataset};
use focaldet::io::json::{read_annotations, read_detections, write_detections};
use focaldet::io::tensorfile::write_tensor_file;
use focaldet::io::{Checkpoint, SceneConfig};
use focaldet::nn::tensor::Tensor;
use focaldet::nn::train::{train, TrainConfig};
use focaldet::{Error, GridShape};

#[derive(Debug, Parser)]
#[command(name = "focaldet", version, about = "Center/scale pedestrian detector toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Write the training target maps of every image of a dataset.
    Encode(EncodeArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Run the detector over a dataset.
    Detect(DetectArgs),
    /// Compute MR-2 of a detection file.
    Eval(EvalArgs),
    /// Write the FPPI / miss-rate curve of a detection file as CSV.
    Curve(CurveArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Probability that a pedestrian is given an occluder.
    #[arg(long, default_value_t = SceneConfig::default().occlusion)]
    occlusion: f64,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory, one `<image_id>.targets.f2dt` per image.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    seed: u64,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Do not train the suppression head.
    #[arg(long)]
    no_suppress: bool,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().warmup_iters)]
    warmup: usize,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the averaged weights (default).
    #[arg(long, conflicts_with = "raw")]
    ema: bool,
    /// Use the raw weights.
    #[arg(long)]
    raw: bool,
    /// Skip the suppression head; scores equal detection probabilities.
    #[arg(long)]
    no_suppress: bool,
}

#[derive(Debug, Args)]
struct EvalInput {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    annos: PathBuf,
    /// reasonable, small, heavy or all.
    #[arg(long)]
    setting: String,
    #[arg(long, default_value = "cp")]
    convention: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    input: EvalInput,
    /// Also write the curve as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CurveArgs {
    #[command(flatten)]
    input: EvalInput,
    #[arg(long)]
    out: PathBuf,
}

/// Failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Encode(a) => encode(a),
        Command::Train(a) => train_cmd(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Curve(a) => curve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let cfg = SceneConfig {
        width: a.width,
        height: a.height,
        occlusion: a.occlusion,
        seed: a.seed,
        ..SceneConfig::default()
    };
    let samples = generate_dataset(&a.out, &cfg, a.count)?;
    let n: usize = samples.iter().map(|s| s.annotations.len()).sum();
    println!("images={} annotations={n}", samples.len());
    Ok(())
}

fn encode(a: EncodeArgs) -> CliResult {
    let samples = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    for s in &samples {
        let shape = s.image.shape();
        let grid = GridShape::new(shape[0], shape[1], GridShape::DEFAULT_STRIDE)?;
        let t = encode_targets(&s.annotations, grid)?;
        let mask = Tensor::new(
            t.center.shape().to_vec(),
            t.pos_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )?;
        let arrays = vec![
            ("center".to_string(), t.center.clone()),
            ("penalty".to_string(), t.penalty.clone()),
            ("log_height".to_string(), t.log_height.clone()),
            ("offset".to_string(), t.offset.clone()),
            ("pos_mask".to_string(), mask),
        ];
        write_tensor_file(a.out.join(format!("{}.targets.f2dt", s.image_id)), &arrays)?;
    }
    println!("encoded={}", samples.len());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let samples = load_dataset(&a.data)?;
    let init = a.init.as_ref().map(Checkpoint::load).transpose()?;
    if init.as_ref().is_some_and(|c| c.ema_from_params) {
        eprintln!("warning: initial checkpoint has no averaged weights; using its raw weights");
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        suppression: !a.no_suppress,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup_iters: a.warmup,
        ..TrainConfig::default()
    };
    let stdout = std::io::stdout();
    let ckpt = train(&samples, &cfg, init.as_ref(), |s| {
        let mut out = stdout.lock();
        let _ = writeln!(out, "{s}");
        let _ = out.flush();
    })?;
    ckpt.save(&a.out)?;
    Ok(())
}

fn detect_cmd(a: DetectArgs) -> CliResult {
    let samples = load_dataset(&a.data)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let params = if a.raw { &ckpt.params } else { &ckpt.ema };
    let cfg = DetectConfig {
        suppress: !a.no_suppress,
        ..DetectConfig::default()
    };
    let dets = detect(params, &samples, &cfg)?;
    write_detections(&a.out, &dets)?;
    println!("images={} detections={}", samples.len(), dets.len());
    Ok(())
}

fn run_eval(input: &EvalInput) -> std::result::Result<EvalResult, Failure> {
    let name: SettingName = input.setting.parse()?;
    let convention: Convention = input.convention.parse()?;
    let dets = read_detections(&input.dets)?;
    let annos = read_annotations(&input.annos)?;
    Ok(evaluate(&dets, &annos, &[], &EvalSetting::new(name, convention), 0.5)?)
}

fn write_curve(path: &Path, r: &EvalResult) -> CliResult {
    let mut text = String::from("threshold,fppi,miss_rate\n");
    for p in &r.curve {
        text.push_str(&format!("{:?},{:?},{:?}\n", p.threshold, p.fppi, p.miss_rate));
    }
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let r = run_eval(&a.input)?;
    let c = r.counts;
    println!("mr2={:?}", r.mr2);
    println!(
        "images={} ground_truth={} matched={} missed={} false_positives={} ignored_detections={}",
        c.images, c.ground_truth, c.matched, c.missed, c.false_positives, c.ignored_detections
    );
    if let Some(path) = &a.curve {
        write_curve(path, &r)?;
    }
    Ok(())
}

fn curve_cmd(a: CurveArgs) -> CliResult {
    let r = run_eval(&a.input)?;
    write_curve(&a.out, &r)?;
    println!("points={}", r.curve.len());
    Ok(())
}
