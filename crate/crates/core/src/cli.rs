//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylestego_nn::Tensor;

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{load_image, save_png, Dataset};
use crate::error::{Result, StegoError};
use crate::evaluation::{
    ablation_suite_on, bit_accuracy, checkpoint_divergence, run_scenario, stego_cover_ssim, DetectorConfig, EvalReport,
    PairConfig, ScenarioKind, ScenarioSpec, DEFAULT_MIN_PAIRS,
};
use crate::message::BitMessage;
use crate::trainer::run_training;

#[derive(Debug, Parser)]
#[command(name = "stylestego", version, about = "Hide bits in stylized images and recover them")]
pub struct Cli {
    /// Key = value config file applied before command-line overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus metrics.csv.
    Train(TrainArgs),
    /// Hide a message in a content image.
    Embed(EmbedArgs),
    /// Recover a message from a stego image.
    Extract(ExtractArgs),
    /// Measure bit accuracy, SSIM, detector scenarios and divergence.
    Eval(EvalArgs),
    /// Train the three extractor variants and compare bit accuracy.
    Ablate(AblateArgs),
}

/// Training overrides; each maps to the config key of the same name.
#[derive(Debug, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub msg_len: Option<usize>,
    #[arg(long)]
    pub key: Option<u64>,
    #[arg(long)]
    pub save_every: Option<u64>,
    #[arg(long)]
    pub content_dir: Option<PathBuf>,
    #[arg(long)]
    pub style_dir: Option<PathBuf>,
    /// Pin one message for every step.
    #[arg(long)]
    pub overfit: bool,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    /// File holding the message as bit text (`0101...`) or hex (`hex:` / `0x` prefix).
    #[arg(long)]
    pub message: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub key: u64,
    /// Output path; must end in `.png`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MessageFormat {
    Bits,
    Hex,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub stego: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub key: u64,
    /// Number of bits to recover.
    #[arg(long)]
    pub len: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MessageFormat::Bits)]
    pub format: MessageFormat,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoints in training-step order. Repeatable.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Held-out content images (defaults to the training content directory).
    #[arg(long)]
    pub content_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Detector scenario to run: ignorant, knowledgeable, omniscient or all. Repeatable.
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_MIN_PAIRS)]
    pub pairs: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_PAIRS)]
    pub min_pairs: usize,
    #[arg(long, default_value_t = 8)]
    pub detector_epochs: usize,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training seeds; one run per seed and variant.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// Held-out content images for the accuracy measurement.
    #[arg(long)]
    pub held_out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

fn resolve_config(cli_config: Option<&Path>, seed: Option<u64>, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match cli_config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("seed", seed.map(|v| v.to_string()));
    push("iterations", o.iterations.map(|v| v.to_string()));
    push("lr", o.lr.map(|v| v.to_string()));
    push("crop_size", o.crop_size.map(|v| v.to_string()));
    push("batch", o.batch.map(|v| v.to_string()));
    push("lambda", o.lambda.map(|v| v.to_string()));
    push("mu", o.mu.map(|v| v.to_string()));
    push("tolerance", o.tolerance.map(|v| v.to_string()));
    push("msg_len", o.msg_len.map(|v| v.to_string()));
    push("key", o.key.map(|v| v.to_string()));
    push("save_every", o.save_every.map(|v| v.to_string()));
    push("content_dir", o.content_dir.as_ref().map(|p| p.display().to_string()));
    push("style_dir", o.style_dir.as_ref().map(|p| p.display().to_string()));
    push("overfit", o.overfit.then(|| "true".to_string()));
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| StegoError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    cfg.apply(&pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &TrainConfig) {
    println!("# resolved config");
    print!("{}", cfg.to_text());
}

fn read_message(path: &Path) -> Result<BitMessage> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| StegoError::Message(format!("cannot read {}: {e}", path.display())))?;
    BitMessage::parse(&text)
}

fn load_images(dir: &Path, crop: usize) -> Result<Vec<Tensor>> {
    Ok(Dataset::load(dir, crop)?
        .images
        .into_iter()
        .map(|img| crate::data::crop_at(&img, 0, 0, crop))
        .collect::<Result<Vec<_>>>()?)
}

fn write_report(report: &EvalReport, path: Option<&Path>) -> Result<()> {
    print!("{}", report.table());
    if let Some(p) = path {
        std::fs::write(p, report.to_json()?)?;
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(cli.config.as_deref(), cli.seed, &args.overrides)?;
    echo_config(&cfg);
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.txt"), cfg.to_text())?;
    let run = run_training(&cfg, Some(&args.out))?;
    if let Some(m) = run.metrics.last() {
        println!("finished {} steps; last bit_acc {:.4}", run.state.step, m.bit_acc);
    }
    for c in &run.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn embed(args: &EmbedArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let content = load_image(&args.content)?;
    let msg = read_message(&args.message)?;
    let (h, w, _) = content.hwc()?;
    let grid = ckpt.model.grid(h, w)?;
    println!("capacity {} bits ({grid}); payload {} bits", grid.capacity(), msg.len());
    if msg.len() > grid.capacity() {
        return Err(StegoError::Capacity { bits: msg.len(), capacity: grid.capacity(), grid: grid.to_string() });
    }
    // Validate the output path before spending time on the forward pass.
    if !args.out.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        return Err(StegoError::Image {
            path: args.out.clone(),
            reason: "only lossless .png output is supported".into(),
        });
    }
    let stego = ckpt.model.embed(&content, &msg, args.key)?;
    save_png(&args.out, &stego)?;
    println!("stego written to {}", args.out.display());
    Ok(())
}

fn extract(args: &ExtractArgs) -> Result<()> {
    if args.len == 0 {
        return Err(StegoError::Message("--len must be positive".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let stego = load_image(&args.stego)?;
    let msg = ckpt.model.extract(&stego, args.key, args.len)?;
    let text = match args.format {
        MessageFormat::Bits => msg.to_bit_text(),
        MessageFormat::Hex => format!("hex:{}", msg.to_hex()),
    };
    std::fs::write(&args.out, format!("{text}\n"))?;
    println!("extracted {} bits to {}", msg.len(), args.out.display());
    Ok(())
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let ckpts = args.checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<Checkpoint>>>()?;
    let base = &ckpts[ckpts.len() - 1];
    for c in &ckpts {
        c.ensure_arch(&base.model.arch)?;
    }
    let cfg = &base.config;
    echo_config(cfg);
    let seed = cli.seed.unwrap_or(cfg.seed);
    let dir = args.content_dir.clone().unwrap_or_else(|| cfg.content_dir.clone());
    let held_out = load_images(&dir, cfg.crop_size)?;

    let mut kinds = Vec::new();
    for s in &args.scenarios {
        if s == "all" {
            kinds.extend(ScenarioKind::ALL);
        } else {
            kinds.push(ScenarioKind::parse(s)?);
        }
    }
    let specs = kinds.iter().map(|&k| ScenarioSpec::standard(k, ckpts.len())).collect::<Result<Vec<_>>>()?;

    let model = &base.model;
    let mut report = EvalReport { config: Some(cfg.clone()), ..EvalReport::default() };
    report.bit_accuracy = Some(bit_accuracy(model, &held_out, cfg.msg_len, cfg.key, args.trials, seed, true)?);
    report.ssim_mean = Some(stego_cover_ssim(model, &held_out, cfg.msg_len, cfg.key, seed)?);
    report.ssim_samples = held_out.len();
    if ckpts.len() >= 2 {
        let models: Vec<_> = ckpts.iter().map(|c| &c.model).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe_msg = BitMessage::random(cfg.msg_len, &mut rng)?;
        report.divergence = Some(checkpoint_divergence(&models, &held_out[0], &probe_msg, cfg.key)?);
    }
    if !specs.is_empty() {
        let models: Vec<_> = ckpts.iter().map(|c| c.model.clone()).collect();
        let content = Dataset::from_images(held_out.clone(), cfg.crop_size)?;
        let pairs = PairConfig {
            pairs: args.pairs,
            min_pairs: args.min_pairs,
            crop: cfg.crop_size,
            msg_len: cfg.msg_len,
            key: cfg.key,
            seed,
        };
        let det = DetectorConfig { epochs: args.detector_epochs, seed, ..DetectorConfig::default() };
        for spec in &specs {
            report.scenarios.push(run_scenario(spec, &models, &content, &pairs, &det)?);
        }
    }
    write_report(&report, args.report.as_deref())
}

fn ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let cfg = resolve_config(cli.config.as_deref(), cli.seed, &args.overrides)?;
    echo_config(&cfg);
    let content = Dataset::load(&cfg.content_dir, cfg.crop_size)?;
    let style = Dataset::load(&cfg.style_dir, cfg.crop_size)?;
    let dir = args.held_out_dir.clone().unwrap_or_else(|| cfg.content_dir.clone());
    let held_out = load_images(&dir, cfg.crop_size)?;
    let rows = ablation_suite_on(&cfg, &args.seeds, &content, &style, &held_out, args.trials)?;
    let report = EvalReport { ablation: rows, config: Some(cfg), ..EvalReport::default() };
    write_report(&report, args.report.as_deref())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Embed(a) => embed(a),
        Command::Extract(a) => extract(a),
        Command::Eval(a) => eval(cli, a),
        Command::Ablate(a) => ablate(cli, a),
    }
}

/// Parses `args` and runs the command. Returns the process exit code;
/// failures print one `error[<code>]: <message>` line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            1
        }
    }
}
