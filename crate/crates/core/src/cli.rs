//! Command-line front end: dataset generation, training (with ablation
//! switches), evaluation, and ROC export/overlay.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataset::{self, Manifest};
use crate::metrics::{evaluate_detections, EvalReport, RocPoint};
use crate::model::{Checkpoint, Detection, Detector, PredictOptions};
use crate::pipeline::{train, TrainConfig};
use crate::synthdata::{dataset_stats, generate_dataset, SynthConfig};
use crate::{Error, Result};

pub const ROC_CSV_HEADER: &str = "fpr,tpr,threshold";

#[derive(Debug, Parser)]
#[command(name = "pairdet", version, about = "Paired-image lesion detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset with manifests.
    Generate(GenerateArgs),
    /// Train a detector from a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset manifest.
    Evaluate(EvaluateArgs),
    /// Merge evaluation reports into one ROC table (and optional plot).
    Roc(RocArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory for images and manifests.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file overriding the default generator configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file overriding the default training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Drop the top-likelihood term (sets its weight to zero).
    #[arg(long)]
    pub disable_tlloss: bool,
    /// Drop the similarity term (sets its weight to zero).
    #[arg(long)]
    pub disable_simloss: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for report.json and roc.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RocArgs {
    /// Overlay CSV to write (columns: run,fpr,tpr,threshold).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional PNG plot of the overlaid curves.
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// Reports to merge, each as NAME=path/to/report.json.
    #[arg(required = true, value_parser = parse_named_report)]
    pub reports: Vec<(String, PathBuf)>,
}

fn parse_named_report(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=path/to/report.json, got {s:?}")),
    }
}

/// Load any of the TOML-serializable configuration types.
pub fn load_toml_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io("reading config", path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write the fully resolved configuration beside the outputs so every run
/// is self-describing.
fn snapshot_config<T: Serialize>(out_dir: &Path, cfg: &T) -> Result<()> {
    let path = out_dir.join("config.json");
    let file =
        std::fs::File::create(&path).map_err(|e| Error::io("writing config snapshot", &path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), cfg).map_err(|e| Error::Parse {
        path,
        message: e.to_string(),
    })
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => load_toml_config(path)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = generate_dataset(&cfg, &args.out)?;
    snapshot_config(&args.out, &cfg)?;
    for (name, path) in [("train", &out.train_manifest), ("test", &out.test_manifest)] {
        let stats = dataset_stats(&Manifest::load(path)?)?;
        println!("{name}: {stats}");
    }
    Ok(())
}

pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => load_toml_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = args.iterations {
        cfg.iterations = iters;
    }
    if args.disable_tlloss {
        cfg.weights.lambda2 = 0.0;
    }
    if args.disable_simloss {
        cfg.weights.lambda4 = 0.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(args)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io("creating output directory", &args.out, e))?;
    snapshot_config(&args.out, &cfg)?;
    let out = train(&cfg, &args.manifest, &args.out, args.resume.as_deref())?;
    println!(
        "trained {} iterations; checkpoint {}; losses {}",
        out.final_iteration,
        out.checkpoint.display(),
        out.loss_csv.display()
    );
    Ok(())
}

/// Run inference over every record of a manifest.
pub fn predict_manifest(
    checkpoint: &Checkpoint,
    manifest_path: &Path,
    manifest: &Manifest,
) -> Result<Vec<Vec<Detection>>> {
    let detector = Detector {
        config: checkpoint.model.clone(),
        params: checkpoint.params.clone(),
    };
    let opts = PredictOptions::default();
    manifest
        .records
        .iter()
        .map(|r| {
            let img = dataset::load_image(&dataset::image_path(manifest_path, r))?;
            crate::model::predict(&detector, &checkpoint.anchors, &img, &opts)
        })
        .collect()
}

pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<()> {
    let mut text = String::from(ROC_CSV_HEADER);
    text.push('\n');
    for p in roc {
        text.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    std::fs::write(path, text).map_err(|e| Error::io("writing ROC table", path, e))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    let detections = predict_manifest(&checkpoint, &args.manifest, &manifest)?;
    let report = evaluate_detections(&manifest.records, &detections)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io("creating output directory", &args.out, e))?;
    let report_path = args.out.join("report.json");
    let file = std::fs::File::create(&report_path)
        .map_err(|e| Error::io("writing report", &report_path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report).map_err(|e| {
        Error::Parse {
            path: report_path.clone(),
            message: e.to_string(),
        }
    })?;
    write_roc_csv(&args.out.join("roc.csv"), &report.roc)?;

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "mAP {:.4}{}  AUC {:.4}  sensitivity {}  specificity {}  accuracy {}",
        report.map,
        if report.map_degenerate { " (degenerate)" } else { "" },
        report.auc,
        fmt(report.sensitivity),
        fmt(report.specificity),
        fmt(report.accuracy),
    );
    Ok(report)
}

pub fn cmd_roc(args: &RocArgs) -> Result<()> {
    let mut curves: Vec<(String, Vec<RocPoint>)> = Vec::new();
    for (name, path) in &args.reports {
        let file = std::fs::File::open(path).map_err(|e| Error::io("opening report", path, e))?;
        let report: EvalReport =
            serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?;
        curves.push((name.clone(), report.roc));
    }

    let mut text = String::from("run,fpr,tpr,threshold\n");
    for (name, roc) in &curves {
        for p in roc {
            text.push_str(&format!("{name},{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
    }
    std::fs::write(&args.out, text).map_err(|e| Error::io("writing ROC overlay", &args.out, e))?;

    if let Some(png) = &args.png {
        plot_roc(png, &curves)?;
    }
    Ok(())
}

/// Minimal ROC plot: white canvas, gray diagonal, one solid-color
/// polyline per run.
fn plot_roc(path: &Path, curves: &[(String, Vec<RocPoint>)]) -> Result<()> {
    const SIDE: u32 = 512;
    const MARGIN: u32 = 24;
    let palette: [[u8; 3]; 6] = [
        [214, 39, 40],
        [31, 119, 180],
        [44, 160, 44],
        [255, 127, 14],
        [148, 103, 189],
        [23, 190, 207],
    ];
    let mut img = image::RgbImage::from_pixel(SIDE, SIDE, image::Rgb([255, 255, 255]));
    let span = (SIDE - 2 * MARGIN) as f64;
    let to_px = |fpr: f64, tpr: f64| -> (f64, f64) {
        (
            MARGIN as f64 + fpr.clamp(0.0, 1.0) * span,
            (SIDE - MARGIN) as f64 - tpr.clamp(0.0, 1.0) * span,
        )
    };
    let mut draw_line = |a: (f64, f64), b: (f64, f64), color: [u8; 3]| {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (a.0 + t * (b.0 - a.0)).round() as i64;
            let y = (a.1 + t * (b.1 - a.1)).round() as i64;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
                let (px, py) = (x + dx, y + dy);
                if (0..SIDE as i64).contains(&px) && (0..SIDE as i64).contains(&py) {
                    img.put_pixel(px as u32, py as u32, image::Rgb(color));
                }
            }
        }
    };
    // axes and chance diagonal
    draw_line(to_px(0.0, 0.0), to_px(1.0, 0.0), [0, 0, 0]);
    draw_line(to_px(0.0, 0.0), to_px(0.0, 1.0), [0, 0, 0]);
    draw_line(to_px(0.0, 0.0), to_px(1.0, 1.0), [200, 200, 200]);
    for (ci, (_, roc)) in curves.iter().enumerate() {
        let color = palette[ci % palette.len()];
        for pair in roc.windows(2) {
            draw_line(
                to_px(pair[0].fpr, pair[0].tpr),
                to_px(pair[1].fpr, pair[1].tpr),
                color,
            );
        }
    }
    img.save(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Dispatch a parsed command. Exit-code policy: configuration and usage
/// problems map to 2, runtime failures to 1.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args).map(|_| ()),
        Command::Roc(args) => cmd_roc(args),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_report_parsing() {
        assert_eq!(
            parse_named_report("base=runs/base/report.json").unwrap(),
            ("base".to_string(), PathBuf::from("runs/base/report.json"))
        );
        assert!(parse_named_report("no-equals").is_err());
        assert!(parse_named_report("=path").is_err());
    }

    #[test]
    fn ablation_flags_zero_the_weights() {
        let base = TrainArgs {
            manifest: "m.json".into(),
            out: "o".into(),
            config: None,
            seed: Some(7),
            iterations: Some(5),
            resume: None,
            disable_tlloss: false,
            disable_simloss: false,
        };
        let cfg = resolve_train_config(&base).unwrap();
        assert_eq!(cfg.weights.lambda2, 1.0);
        assert_eq!(cfg.weights.lambda4, 0.1);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.iterations, 5);

        let both = TrainArgs {
            disable_tlloss: true,
            disable_simloss: true,
            ..base
        };
        let cfg = resolve_train_config(&both).unwrap();
        assert_eq!(cfg.weights.lambda2, 0.0);
        assert_eq!(cfg.weights.lambda4, 0.0);
        assert!(!cfg.uses_negatives());
    }

    #[test]
    fn toml_config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        let text = toml::to_string(&TrainConfig::default()).unwrap();
        std::fs::write(&path, text).unwrap();
        let cfg: TrainConfig = load_toml_config(&path).unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Invalid("x".into())), 1);
    }

    #[test]
    fn cli_parses_subcommands() {
        use clap::Parser;
        let cli = Cli::parse_from([
            "pairdet",
            "train",
            "--manifest",
            "m.json",
            "--out",
            "runs/x",
            "--disable-tlloss",
        ]);
        match cli.command {
            Command::Train(args) => {
                assert!(args.disable_tlloss);
                assert!(!args.disable_simloss);
            }
            _ => panic!("wrong subcommand"),
        }
    }
}
