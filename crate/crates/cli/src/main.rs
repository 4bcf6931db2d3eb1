use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trspad_core::dataset::{
    discover_manifests, generate_dataset, reconstruct_dataset, stats_command, verify_manifest, DatasetError,
    DatasetManifest, ErrorKind, PipelineConfig, Selection, Split,
};
use trspad_core::idx::read_idx;
use trspad_core::reconstruct::{Estimator, DEFAULT_CLIP_MULTIPLE};
use trspad_core::stats::PeakRule;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_IO: u8 = 3;

/// Time-resolved SPAD simulation of MNIST-style datasets.
#[derive(Debug, Parser)]
#[command(name = "trspad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate SPAD event streams for every image and lux level.
    Generate(GenerateArgs),
    /// Reconstruct normalized intensity images from generated streams.
    Reconstruct(ReconstructArgs),
    /// Photon-count histograms and summary table per (split, lux).
    Stats(StatsArgs),
    /// Check every file digest recorded in the manifests.
    Verify(VerifyArgs),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// IDX image file (unsigned bytes).
    #[arg(long)]
    images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_parser = parse_split)]
    split: Split,
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// TOML configuration file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated lux levels in millilux.
    #[arg(long, value_delimiter = ',')]
    lux: Option<Vec<u32>>,
    /// Exposure time in seconds.
    #[arg(long)]
    exposure: Option<f64>,
    /// Only the first N images.
    #[arg(long, conflicts_with = "indices")]
    limit: Option<usize>,
    /// Comma-separated source image indices.
    #[arg(long, value_delimiter = ',')]
    indices: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// Dataset root written by `generate`.
    #[arg(long)]
    root: PathBuf,
    /// counts, pf, ip or all.
    #[arg(long, default_value = "all")]
    estimator: String,
    /// Lux levels in millilux; defaults to every level with a training manifest.
    #[arg(long, value_delimiter = ',')]
    lux: Option<Vec<u32>>,
    /// Clip normalized values to [0, CLIP].
    #[arg(long, default_value_t = DEFAULT_CLIP_MULTIPLE, conflicts_with = "no_clip")]
    clip: f64,
    /// Store unclipped normalized values.
    #[arg(long)]
    no_clip: bool,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    root: PathBuf,
    /// Output directory; defaults to `<root>/stats`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    root: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: trspad_core::ConfigError| e.to_string())
}

enum Failure {
    Dataset(DatasetError),
    Usage(String),
    Data(String),
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::Dataset(e)
    }
}

fn load_manifests(root: &Path) -> Result<Vec<DatasetManifest>, Failure> {
    let paths = discover_manifests(root)?;
    if paths.is_empty() {
        return Err(Failure::Usage(format!("no manifests found under {}", root.display())));
    }
    paths
        .iter()
        .map(|p| DatasetManifest::load(p).map_err(Failure::from))
        .collect()
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(lux) = args.lux {
        config.lux_mlux = lux;
    }
    if let Some(exposure) = args.exposure {
        config.exposure = exposure;
    }
    config.validate().map_err(DatasetError::from)?;
    let selection = match (args.limit, args.indices) {
        (Some(n), _) => Selection::Limit(n),
        (None, Some(idx)) => Selection::Indices(idx),
        (None, None) => Selection::All,
    };

    let images = read_idx(&args.images, &args.labels).map_err(DatasetError::from)?;
    let manifests = generate_dataset(&images, args.split, &config, &selection, &args.out)?;
    for m in &manifests {
        let events: u64 = m.samples.iter().map(|s| s.events).sum();
        println!(
            "{} {:>5} mlux: {} files, {} events",
            m.split,
            m.lux_mlux,
            m.samples.len(),
            events
        );
    }
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<(), Failure> {
    let estimators: Vec<Estimator> = if args.estimator == "all" {
        Estimator::ALL.to_vec()
    } else {
        vec![args.estimator.parse().map_err(|e: trspad_core::reconstruct::ReconstructError| Failure::Usage(e.to_string()))?]
    };
    let levels = match args.lux {
        Some(levels) => levels,
        None => {
            let levels: Vec<u32> = load_manifests(&args.root)?
                .iter()
                .filter(|m| m.split == Split::Train)
                .map(|m| m.lux_mlux)
                .collect();
            if levels.is_empty() {
                return Err(Failure::Usage(format!(
                    "no training manifests under {}; normalization is fitted on the training split",
                    args.root.display()
                )));
            }
            levels
        }
    };
    let clip = (!args.no_clip).then_some(args.clip);
    for estimator in estimators {
        for &lux in &levels {
            let m = reconstruct_dataset(&args.root, estimator, lux, clip)?;
            let counts: Vec<String> = m.splits.iter().map(|s| format!("{} {}", s.split, s.count)).collect();
            println!(
                "{:>6} {:>5} mlux: median {:.6e}, {}",
                estimator.short_name(),
                lux,
                m.median_nonzero.unwrap_or(0.0),
                counts.join(", ")
            );
        }
    }
    Ok(())
}

fn stats(args: StatsArgs) -> Result<(), Failure> {
    let manifests = load_manifests(&args.root)?;
    let out = args.out.unwrap_or_else(|| args.root.join("stats"));
    let all = stats_command(&args.root, &manifests, &out, PeakRule::default())?;
    println!("split\tlux_mlux\timages\tmean_count\tmodal_bin\tsecondary_peak");
    for s in &all {
        let (modal, secondary) = match &s.bimodality {
            Some(b) => (
                b.modal_bin.to_string(),
                b.secondary_peak.map(|p| p.bin.to_string()).unwrap_or_else(|| "-".into()),
            ),
            None => ("-".into(), "-".into()),
        };
        println!("{}\t{}\t{}\t{:.6}\t{modal}\t{secondary}", s.split, s.lux_mlux, s.images, s.mean_count);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let manifests = load_manifests(&args.root)?;
    let mut bad = 0usize;
    for m in &manifests {
        let report = verify_manifest(&args.root, m);
        for path in &report.missing {
            eprintln!("missing: {path}");
        }
        for (path, expected, actual) in &report.mismatched {
            eprintln!("digest mismatch: {path}: expected {expected}, found {actual}");
        }
        bad += report.missing.len() + report.mismatched.len();
        println!(
            "{} {:>5} mlux: {} checked, {} bad",
            m.split,
            m.lux_mlux,
            report.checked,
            report.missing.len() + report.mismatched.len()
        );
    }
    if bad > 0 {
        return Err(Failure::Data(format!("{bad} files failed verification")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Stats(a) => stats(a),
        Command::Verify(a) => verify(a),
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Dataset(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Io => EXIT_IO,
            })
        }
    }
}
