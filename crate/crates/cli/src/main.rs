use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tubuda::hybrid::Preset;
use tubuda::pipeline::{self, RunConfig};
use tubuda::Error;

#[derive(Parser, Debug)]
#[command(name = "tubuda", version, about = "Cross-domain EM membrane segmentation guided by vesselness and edge filters")]
struct Cli {
    /// JSON file merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; must not already hold files.
    #[arg(long, global = true, default_value = "tubuda-run")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Single override as `dotted.key=json`, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-domain benchmark.
    Synth,
    /// Dump the feature maps, hybrid image and feature weights of one image.
    Features {
        #[arg(long)]
        image: PathBuf,
        /// Segmentation checkpoint providing trained weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the super-resolution stage on source training images.
    SrTrain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Apply a trained SR stage to every image of a manifest.
    SrApply {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Adversarial segmentation training.
    UdaTrain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a checkpoint on the test splits, or compare two mask directories.
    Evaluate {
        #[arg(long, required_unless_present = "pred")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "labels", conflicts_with = "manifest")]
        pred: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// synth, sr-train, sr-apply, uda-train and evaluate in one run directory.
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Features { .. } => "features",
            Command::SrTrain { .. } => "sr-train",
            Command::SrApply { .. } => "sr-apply",
            Command::UdaTrain { .. } => "uda-train",
            Command::Evaluate { .. } => "evaluate",
            Command::Pipeline => "pipeline",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        match self {
            Command::Synth | Command::Pipeline => {}
            Command::Features { image, checkpoint } => {
                v.push(image);
                v.extend(checkpoint.as_deref());
            }
            Command::SrTrain { manifest } | Command::UdaTrain { manifest } => v.push(manifest),
            Command::SrApply { manifest, checkpoint } => {
                v.push(manifest);
                v.push(checkpoint);
            }
            Command::Evaluate {
                manifest,
                checkpoint,
                pred,
                labels,
            } => {
                for p in [manifest, checkpoint, pred, labels].into_iter().flatten() {
                    v.push(p);
                }
            }
        }
        v
    }
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = if e.is_not_found() {
            (2, "missing_file")
        } else {
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => (3, "invalid_config"),
                Error::NonFinite { .. } => (4, "non_finite"),
                Error::LabelAccess(_) => (1, "label_access"),
                Error::Decode { .. } => (1, "decode"),
                _ => (1, "runtime"),
            }
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        kind: "invalid_config",
        message: message.into(),
    }
}

fn set_override(key: &str, raw: &str) -> Result<Value, Failure> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut out = value;
    for part in key.split('.').rev() {
        if part.is_empty() {
            return Err(config_failure(format!("empty key segment in `{key}`")));
        }
        out = json!({ part: out });
    }
    Ok(out)
}

fn build_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let preset = match cli.preset {
        PresetArg::Paper => Preset::Paper,
        PresetArg::Desk => Preset::Desk,
    };
    let mut cfg = RunConfig::preset(preset);
    let mut layers = Vec::new();
    if let Some(p) = &cli.config {
        layers.push(pipeline::read_json::<Value>(p).map_err(|e| match e {
            Error::Json(j) => config_failure(format!("{}: {j}", p.display())),
            other => Failure::from(other),
        })?);
    }
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_failure(format!("--set expects KEY=VALUE, got `{s}`")))?;
        layers.push(set_override(k, v)?);
    }
    for layer in &layers {
        cfg = cfg.merged(layer)?;
        if let Some(seed) = layer.get("seed").and_then(Value::as_u64) {
            cfg = cfg.with_seed(seed);
        }
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_fresh(dir: &Path) -> Result<(), Failure> {
    if std::fs::read_dir(dir).is_ok_and(|mut it| it.next().is_some()) {
        return Err(Failure {
            code: 1,
            kind: "run_dir_exists",
            message: format!("{} already holds a run; choose a new --out", dir.display()),
        });
    }
    Ok(())
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<Value, Failure> {
    let out = &cli.out;
    Ok(match &cli.command {
        Command::Synth => {
            let m = pipeline::run_synth(cfg, out)?;
            json!({ "images": m.entries.len() })
        }
        Command::Features { image, checkpoint } => {
            let w = pipeline::run_features(cfg, image, checkpoint.as_deref(), out)?;
            serde_json::to_value(w).map_err(Error::from)?
        }
        Command::SrTrain { manifest } => {
            let l = pipeline::run_sr_train(cfg, manifest, out)?;
            json!({ "steps": l.len(), "first_l1": l.first(), "last_l1": l.last() })
        }
        Command::SrApply { manifest, checkpoint } => {
            let m = pipeline::run_sr_apply(cfg, manifest, checkpoint, out)?;
            json!({ "images": m.entries.len() })
        }
        Command::UdaTrain { manifest } => {
            let r = pipeline::run_uda_train(cfg, manifest, out)?;
            json!({ "steps": r.len(), "last": r.last() })
        }
        Command::Evaluate {
            manifest: Some(m),
            checkpoint: Some(c),
            ..
        } => {
            let e = pipeline::run_evaluate(cfg, m, c, out)?;
            json!({ "source": summary(&e.source), "target": summary(&e.target) })
        }
        Command::Evaluate {
            pred: Some(p),
            labels: Some(l),
            ..
        } => {
            let r = pipeline::evaluate_dirs(p, l)?;
            std::fs::create_dir_all(out).map_err(|e| Failure::from(Error::Io { path: out.clone(), source: e }))?;
            pipeline::write_json(cfg, &out.join("config.json"))?;
            pipeline::write_json(&r, &out.join("report.json"))?;
            summary(&r)
        }
        Command::Evaluate { .. } => {
            return Err(config_failure("evaluate needs --manifest with --checkpoint, or --pred with --labels"))
        }
        Command::Pipeline => {
            let r = pipeline::run_pipeline(cfg, out)?;
            json!({
                "source": summary(&r.evaluation.source),
                "target": summary(&r.evaluation.target),
            })
        }
    })
}

fn summary(r: &tubuda::metrics::EvalReport) -> Value {
    json!({ "mean_dice": r.mean_dice, "mean_hd95": r.mean_hd95, "images": r.per_image.len() })
}

fn write_meta(cli: &Cli, started: SystemTime, elapsed: f64) {
    let unix = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": unix,
        "elapsed_seconds": elapsed,
    });
    let _ = pipeline::write_json(&meta, &cli.out.join("meta.json"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("TUBUDA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let started = SystemTime::now();
    let clock = Instant::now();
    let result = (|| {
        let cfg = build_config(&cli)?;
        if let Some(p) = cli.command.inputs().into_iter().find(|p| !p.exists()) {
            return Err(Failure {
                code: 2,
                kind: "missing_file",
                message: format!("{}: not found", p.display()),
            });
        }
        ensure_fresh(&cli.out)?;
        run(&cli, &cfg)
    })();
    match result {
        Ok(v) => {
            write_meta(&cli, started, clock.elapsed().as_secs_f64());
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let line = json!({ "error": { "kind": f.kind, "code": f.code, "message": f.message } });
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}
