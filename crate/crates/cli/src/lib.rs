//! Argument parsing and subcommand routing for the `fsenet` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use fsenet_core::data::{corpus_stats, extract_mask, scan_dataset, synthesize_shadow, synthetic_pairs};
use fsenet_core::image::{load_gray, load_image, pad_to_multiple, save_image};
use fsenet_core::infer::{infer_image, infer_path};
use fsenet_core::metrics::evaluate_dir;
use fsenet_core::pyramid::{band_to_display, decompose};
use fsenet_core::train::train;
use fsenet_core::{Checkpoint, Colorspace, Error, Fsenet, FsenetConfig, SampleSource, Split, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fsenet", version, about = "Document shadow removal: training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size network.
    Default,
    /// Small network for CPU experiments.
    Toy,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file; keys it omits come from the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting point for the configuration.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
}

impl ConfigArgs {
    /// Preset, then file, then `FSENET_<KEY>` environment overrides.
    pub fn load(&self) -> fsenet_core::Result<FsenetConfig> {
        let base = match self.preset {
            Preset::Default => FsenetConfig::default(),
            Preset::Toy => FsenetConfig::toy(),
        };
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| io_error(p, e))?,
            None => String::new(),
        };
        base.merge_toml(&text, |k| std::env::var(k).ok())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a paired dataset (or on generated pairs).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root containing train/{input,target[,mask]} and optionally test/.
        #[arg(long, required_unless_present = "synthetic")]
        data: Option<PathBuf>,
        /// Train on this many generated document pairs instead of a dataset.
        #[arg(long, conflicts_with = "data")]
        synthetic: Option<usize>,
        /// Side length of generated pairs.
        #[arg(long, default_value_t = 256)]
        synthetic_size: usize,
        /// Output directory for loss.csv, last.ckpt and best.ckpt.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps without changing the schedule.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Remove shadows from an image or a directory of images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file or directory.
        #[arg(long)]
        input: PathBuf,
        /// Output directory; results are written as <name>.png.
        #[arg(long)]
        out: PathBuf,
        /// Run at most this many pixels on the long side, then resize back.
        #[arg(long)]
        max_side: Option<usize>,
    },
    /// Infer over a test split and score it against the targets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root containing test/{input,target}.
        #[arg(long)]
        data: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
        /// Directory for the predicted images (default: <out>.pred).
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        max_side: Option<usize>,
    },
    /// Score predictions against targets with matching file names.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
        /// Also print an aligned text table.
        #[arg(long)]
        table: bool,
        /// Color space of the comparison (only rgb is implemented).
        #[arg(long, default_value = "rgb")]
        colorspace: String,
    },
    /// Write the Laplacian bands of an image as PNGs (high bands shown as 0.5 + band / 2).
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Darken an image under a mask: out = image * (1 - alpha * mask).
    Synth {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a binary shadow mask from a shadow / shadow-free pair.
    ExtractMask {
        #[arg(long)]
        shadow: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Luminance ratio below which a pixel counts as shadow.
        #[arg(long, default_value_t = 0.85)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shadow coverage and resolution statistics of a dataset split.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0.85)]
        tau: f64,
        /// Write the statistics as JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter count of a configuration.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> fsenet_core::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> fsenet_core::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_model(path: &Path) -> fsenet_core::Result<Fsenet> {
    Checkpoint::load(path)?.to_model()
}

fn run(command: Command) -> fsenet_core::Result<()> {
    match command {
        Command::Train {
            config,
            data,
            synthetic,
            synthetic_size,
            out,
            resume,
            stop_at,
        } => {
            let cfg = config.load()?;
            let (train_set, val_set): (Arc<dyn SampleSource>, Option<Arc<dyn SampleSource>>) = match (data, synthetic) {
                (Some(root), _) => {
                    let train_idx = scan_dataset(&root, Split::Train)?;
                    let val = scan_dataset(&root, Split::Test).ok().filter(|v| !v.is_empty());
                    (Arc::new(train_idx), val.map(|v| Arc::new(v) as Arc<dyn SampleSource>))
                }
                (None, Some(n)) => (
                    Arc::new(synthetic_pairs(n, synthetic_size, synthetic_size, cfg.seed, cfg.alpha_range)?),
                    None,
                ),
                (None, None) => unreachable!("clap requires --data or --synthetic"),
            };
            let opts = TrainOptions {
                out_dir: out,
                resume,
                stop_at,
            };
            let summary = train(cfg, train_set, val_set, &opts)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            max_side,
        } => {
            let net = load_model(&checkpoint)?;
            for r in infer_path(&net, &input, &out, max_side)? {
                println!("{}\t{:.3}s\t{}", r.name, r.seconds, r.output.display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            pred_dir,
            max_side,
        } => {
            let ck_bytes = std::fs::read(&checkpoint).map_err(|e| io_error(&checkpoint, e))?;
            let net = Checkpoint::decode(&ck_bytes)?.to_model()?;
            let index = scan_dataset(&data, Split::Test)?;
            let pred_dir = pred_dir.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".pred");
                PathBuf::from(p)
            });
            create_dir(&pred_dir)?;
            let mut seconds = BTreeMap::new();
            for rec in &index.records {
                let img = load_image(&rec.input)?;
                let t0 = Instant::now();
                let pred = infer_image(&net, &img, max_side)?;
                seconds.insert(rec.name.clone(), t0.elapsed().as_secs_f64());
                save_image(&pred, pred_dir.join(format!("{}.png", rec.name)))?;
            }
            let report = evaluate_dir(&pred_dir, data.join("test").join("target"), Colorspace::Rgb, &seconds)?;
            let params_m = net.parameter_count() as f64 / 1e6;
            let mut summary = serde_json::to_value(&report.mean).expect("serializes");
            summary["params_m"] = params_m.into();
            let body = serde_json::json!({
                "summary": summary,
                "config_sha256": sha256_hex(net.config.to_toml().as_bytes()),
                "checkpoint_sha256": sha256_hex(&ck_bytes),
                "report": serde_json::to_value(&report).expect("serializes"),
            });
            write_text(&out, &serde_json::to_string_pretty(&body).expect("serializes"))?;
            println!("{:>8}  {:>6}  {:>8}  {:>8}  {:>9}", "PSNR", "SSIM", "RMSE", "time(s)", "params(M)");
            println!(
                "{:>8.2}  {:>6.3}  {:>8.2}  {:>8.3}  {:>9.3}",
                report.mean.psnr, report.mean.ssim, report.mean.rmse, report.mean.seconds, params_m
            );
        }
        Command::Metrics {
            pred,
            target,
            out,
            table,
            colorspace,
        } => {
            let cs: Colorspace = colorspace.parse()?;
            let report = evaluate_dir(&pred, &target, cs, &BTreeMap::new())?;
            write_text(&out, &report.to_json())?;
            if table {
                print!("{}", report.to_table());
            }
        }
        Command::Decompose { input, depth, out } => {
            if depth == 0 {
                return Err(Error::Parameter("depth must be at least 1".into()));
            }
            let img = load_image(&input)?;
            let (padded, _) = pad_to_multiple(&img, 1 << depth)?;
            let stack = decompose(&padded, depth)?;
            create_dir(&out)?;
            for (i, band) in stack.highs.iter().enumerate() {
                save_image(&band_to_display(band), out.join(format!("high_{i}.png")))?;
            }
            save_image(&stack.low.clamp01(), out.join("low.png"))?;
        }
        Command::Synth {
            image,
            mask,
            alpha,
            out,
        } => {
            let target = load_image(&image)?;
            let mask = load_gray(&mask)?;
            save_image(&synthesize_shadow(&target, &mask, alpha)?, &out)?;
        }
        Command::ExtractMask {
            shadow,
            target,
            tau,
            out,
        } => {
            let mask = extract_mask(&load_image(&shadow)?, &load_image(&target)?, tau)?;
            save_image(&mask, &out)?;
        }
        Command::Stats { data, split, tau, out } => {
            let index = scan_dataset(&data, split.parse()?)?;
            let stats = corpus_stats(&index, tau);
            let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
            match out {
                Some(p) => write_text(&p, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Params { config } => {
            let net = Fsenet::new(config.load()?)?;
            let (low, high) = net.branch_counts();
            let total = net.parameter_count();
            println!("{:.6} M parameters ({total})", total as f64 / 1e6);
            println!("low-frequency branch: {low}");
            println!("high-frequency branch: {high}");
        }
    }
    Ok(())
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parameter(_) => EXIT_USAGE,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `argv` (including the program name), run the command, and return
/// the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
