use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glassfuse::data::{
    build_manifest, load_depth, load_rgb, load_split_samples, save_mask, save_overlay, write_corpus,
    CorpusSpec, DifficultyMix,
};
use glassfuse::segnet::stack;
use glassfuse::trainer::{evaluate, select_difficult_from_reports, train_with};
use glassfuse::{write_atomic, Ablation, Checkpoint, FusionMode, MetricsReport, Network, Tensor, TrainConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "glassfuse", version, about = "RGB-D glass segmentation with weighted feature fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB-D glass corpus.
    Synth(SynthArgs),
    /// Train a segmentation network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict the glass mask of one RGB-D pair.
    Predict(PredictArgs),
    /// Dump the fusion weights a WFF checkpoint assigns to one input.
    Weights(WeightsArgs),
    /// Write the ids of the hardest images to a split file.
    Difficult(DifficultArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    /// Relative weights, e.g. "easy:0.5,bright:0.2,dark:0.3".
    #[arg(long)]
    difficulty_mix: Option<DifficultyMix>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file of training options; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// none, f-af (frozen 0.5 weights) or f-af-aw (learned weights).
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines log, one record per epoch. Defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["test", "difficult"])]
    split: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    json: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    rgb: PathBuf,
    /// Required unless the checkpoint is rgb-only.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    json: PathBuf,
}

#[derive(Args)]
struct DifficultArgs {
    /// Dataset the reports were computed on; every reported id must exist.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with its exit code: 1 for bad input, 2 for runtime failures.
struct Failure {
    code: u8,
    msg: String,
}

impl From<glassfuse::Error> for Failure {
    fn from(e: glassfuse::Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            msg: e.to_string(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((dim(h)?, dim(w)?))
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{}: no such file", path.display())))
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    require_file(path)?;
    let ckpt = Checkpoint::load(path)?;
    println!("seed: {}", ckpt.meta.seed);
    Ok(ckpt)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| invalid(e.to_string()))?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Loads an RGB-D pair as a batch of one sized for `network`.
fn load_input(
    network: &Network,
    rgb: &Path,
    depth: Option<&Path>,
) -> CliResult<(Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>)> {
    require_file(rgb)?;
    let image = load_rgb(rgb)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (eh, ew) = (network.config.input_h, network.config.input_w);
    if (h, w) != (eh, ew) {
        return Err(invalid(format!(
            "{}: image is {h}x{w} but the checkpoint expects {eh}x{ew}",
            rgb.display()
        )));
    }
    let depth = match (depth, network.config.uses_depth()) {
        (Some(path), true) => {
            require_file(path)?;
            let d = load_depth(path)?;
            if d.shape()[1..] != [h, w] {
                return Err(invalid(format!(
                    "{}: depth is {}x{} but the image is {h}x{w}",
                    path.display(),
                    d.shape()[1],
                    d.shape()[2]
                )));
            }
            Some(stack(&[&d])?)
        }
        (None, true) => return Err(invalid("this checkpoint needs --depth")),
        (_, false) => None,
    };
    let batch = stack(&[&image])?;
    Ok((image, batch, depth))
}

fn synth(args: SynthArgs) -> CliResult {
    let (h, w) = args.size;
    let mix = args.difficulty_mix.unwrap_or_else(DifficultyMix::uniform);
    println!("seed: {}", args.seed);
    let spec = CorpusSpec::new(args.count, args.seed, h, w, mix);
    let manifest = write_corpus(&args.out, &spec)?;
    println!("wrote {} samples to {}", manifest.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> CliResult {
    let mut config = match &args.config {
        Some(path) => {
            require_file(path)?;
            let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            TrainConfig::from_toml(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(ablation) = args.ablation {
        config.ablation = ablation;
        if ablation != Ablation::None {
            config.fusion_mode = FusionMode::Wff;
        }
    }
    if let Some(mode) = args.fusion {
        config.fusion_mode = mode;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    println!("seed: {}", config.seed);

    let manifest = build_manifest(&args.data)?;
    if !manifest.has_split("train") {
        return Err(invalid(format!("{}: dataset has no train split", args.data.display())));
    }
    let train_set = load_split_samples(&manifest, "train")?;
    let val_set = if manifest.has_split("val") {
        load_split_samples(&manifest, "val")?
    } else {
        Vec::new()
    };
    println!(
        "training {} on {} samples ({} validation), {} epochs",
        config.fusion_mode,
        train_set.len(),
        val_set.len(),
        config.epochs
    );
    let (ckpt, mut log) = train_with(&config, &train_set, &val_set, |e| {
        let val = e.val_miou.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3}  loss {:.5}  val mIoU {val}  {:.2}s",
            e.epoch, e.train_loss, e.wall_time_s
        );
    })?;
    ckpt.save(&args.out)?;
    log.checkpoint_path = Some(args.out.display().to_string());
    let log_path = args.log.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    write_atomic(&log_path, log.to_json_lines()?.as_bytes())?;
    match log.epochs.last().and_then(|e| e.val_miou) {
        Some(v) => println!("final val mIoU: {v:.4}"),
        None => println!("final val mIoU: n/a (no validation split)"),
    }
    println!("checkpoint: {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let manifest = build_manifest(&args.data)?;
    if !manifest.has_split(&args.split) {
        return Err(invalid(format!(
            "{}: dataset has no {} split",
            args.data.display(),
            args.split
        )));
    }
    let samples = load_split_samples(&manifest, &args.split)?;
    let report = evaluate(&ckpt, &samples)?;
    write_atomic(&args.json, report.to_json()?.as_bytes())?;
    println!(
        "{} images: IoU {:.4}  mIoU {:.4}  bIoU {:.4}",
        report.image_count, report.iou, report.miou, report.biou
    );
    Ok(())
}

fn predict(args: PredictArgs) -> CliResult {
    let network = load_checkpoint(&args.ckpt)?.network()?;
    let (image, rgb, depth) = load_input(&network, &args.rgb, args.depth.as_deref())?;
    let mask = network.predict(rgb, depth)?.remove(0);
    save_mask(&args.out, &mask)?;
    if let Some(path) = &args.overlay {
        save_overlay(path, &image, &mask)?;
    }
    println!("glass pixels: {} of {}", mask.count_ones(), mask.data().len());
    Ok(())
}

#[derive(Serialize)]
struct SiteWeights {
    psi_rgb: Vec<f64>,
    psi_depth: Vec<f64>,
}

fn weights(args: WeightsArgs) -> CliResult {
    let network = load_checkpoint(&args.ckpt)?.network()?;
    if network.config.fusion_mode != FusionMode::Wff {
        return Err(invalid(format!(
            "{}: checkpoint uses {} fusion; weights exist only for wff checkpoints",
            args.ckpt.display(),
            network.config.fusion_mode
        )));
    }
    let (_, rgb, depth) = load_input(&network, &args.rgb, Some(&args.depth))?;
    let sites: BTreeMap<&str, SiteWeights> = network
        .fusion_weights(rgb, depth)?
        .into_iter()
        .map(|(name, mut w)| {
            (
                name,
                SiteWeights {
                    psi_rgb: w.psi_rgb.remove(0),
                    psi_depth: w.psi_depth.remove(0),
                },
            )
        })
        .collect();
    write_json(&args.json, &sites)?;
    for (name, w) in &sites {
        let mean = w.psi_rgb.iter().sum::<f64>() / w.psi_rgb.len() as f64;
        println!("{name}: mean psi_rgb {mean:.4}");
    }
    Ok(())
}

fn difficult(args: DifficultArgs) -> CliResult {
    let mut reports = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        require_file(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let report = MetricsReport::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        reports.push(report);
    }
    if let Some(data) = &args.data {
        let manifest = build_manifest(data)?;
        for m in reports.iter().flat_map(|r| &r.per_image) {
            if !manifest.entries.iter().any(|e| e.id == m.id) {
                return Err(invalid(format!("{}: no sample with id {:?}", data.display(), m.id)));
            }
        }
    }
    let ids = select_difficult_from_reports(&reports, args.k)?;
    let mut text = ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_atomic(&args.out, text.as_bytes())?;
    println!("wrote {} ids to {}", ids.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Weights(a) => weights(a),
        Command::Difficult(a) => difficult(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
