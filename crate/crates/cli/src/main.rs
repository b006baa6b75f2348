//! `afdcd` command-line tool.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use afdcd_core::checks::{run_grad_suite, run_oracle_suite, CheckReport};
use afdcd_core::harness::dump::{read_features, write_features};
use afdcd_core::harness::{gen_toy_dataset, run_experiment, RunConfig, Sample};
use afdcd_core::metrics::{auto_sample_count, self_similarity_population, self_similarity_stats, ts_distance_stats, ts_population};
use afdcd_core::partition::{PairCount, DEFAULT_OPS_PER_ELEMENT};
use afdcd_core::{pair_count_model, Error, FlopsQuery, PatchExtent, Rng};
use clap::{Args, Parser, Subcommand};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "afdcd", version, about = "Dense contrastive distillation losses, checks and toy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher, distil a student and write the run directory.
    Train(TrainArgs),
    /// Compare analytical gradients with central finite differences.
    GradCheck(CheckArgs),
    /// Compare optimized losses with brute-force enumeration.
    OracleCheck(CheckArgs),
    /// Print the pair-count cost model as CSV.
    Flops(FlopsArgs),
    /// Distance statistics of saved feature dumps.
    Metrics(MetricsArgs),
    /// Write the synthetic dataset to disk.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir` in the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Random instances per check (defaults: 100 for oracle-check, 20 for grad-check).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy)]
struct PatchArg(PatchExtent);

impl FromStr for PatchArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "full" {
            return Ok(PatchArg(PatchExtent::Full));
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(PatchArg(PatchExtent::Side(n))),
            _ => Err(format!("patch must be a positive integer or \"full\", got {s:?}")),
        }
    }
}

#[derive(Args)]
struct FlopsArgs {
    /// Pixel count of a square map (64×64 is 4096).
    #[arg(long, conflicts_with_all = ["height", "width"])]
    hw: Option<usize>,
    #[arg(long, requires = "width")]
    height: Option<usize>,
    #[arg(long, requires = "height")]
    width: Option<usize>,
    #[arg(long)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    groups: usize,
    /// Patch sides, comma separated; `full` is one patch over the whole map.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    patch: Vec<PatchArg>,
    /// Pooling factors, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pool: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_OPS_PER_ELEMENT)]
    ops_per_element: u64,
}

#[derive(Args)]
struct MetricsArgs {
    /// Student feature dump.
    #[arg(long)]
    student: PathBuf,
    /// Teacher feature dump; enables teacher–student distances.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    groups: usize,
    /// Self-similarity window side.
    #[arg(long, default_value_t = 4)]
    window: usize,
    /// Sample count; full enumeration up to one million pairs otherwise.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset keys are read from this run config; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure categories mapped onto exit codes.
enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parameter(_) | Error::Shape(_) | Error::Format { .. } => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Check(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("cannot read config {}: {io}", p.display())),
            other => other.into(),
        }),
        None => Ok(RunConfig::default()),
    }
}

fn train(args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = Some(out);
    }
    let Some(dir) = cfg.out_dir.clone() else {
        return Err(Failure::Usage("no output directory: pass --out or set out_dir".into()));
    };
    let summary = run_experiment(&cfg, &dir)?;
    println!(
        "seed {}: teacher mIoU {:.4}, student mIoU {:.4}, ts distance {:.4} -> {:.4}; wrote {}",
        summary.seed,
        summary.teacher_miou,
        summary.student_miou,
        summary.ts_distance_initial_mean,
        summary.ts_distance_final_mean,
        dir.display()
    );
    Ok(())
}

fn report_checks(reports: &[CheckReport]) -> CmdResult {
    for r in reports {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("failed: {}", failed.join(", "))))
    }
}

fn flops(args: FlopsArgs) -> CmdResult {
    let (height, width) = match (args.hw, args.height, args.width) {
        (Some(hw), None, None) => {
            let side = (hw as f64).sqrt().round() as usize;
            if side * side != hw {
                return Err(Failure::Usage(format!("--hw {hw} is not a square pixel count")));
            }
            (side, side)
        }
        (None, Some(h), Some(w)) => (h, w),
        _ => return Err(Failure::Usage("give either --hw or both --height and --width".into())),
    };
    let mut out = String::from(PairCount::CSV_HEADER);
    out.push('\n');
    for &pool in &args.pool {
        for &PatchArg(patch) in &args.patch {
            let row = pair_count_model(&FlopsQuery {
                height,
                width,
                channels: args.channels,
                groups: args.groups,
                patch,
                pool,
                ops_per_element: args.ops_per_element,
            })?;
            let _ = writeln!(out, "{}", row.csv_row());
        }
    }
    print!("{out}");
    Ok(())
}

fn metrics(args: MetricsArgs) -> CmdResult {
    let student = read_features(&args.student)?;
    std::fs::create_dir_all(&args.out)?;
    let mut rng = Rng::new(args.seed);
    let count = |population: usize| args.samples.unwrap_or_else(|| auto_sample_count(population));
    if let Some(tp) = &args.teacher {
        let teacher = read_features(tp)?;
        let n = count(ts_population(&student, args.groups)?);
        let h = ts_distance_stats(&student, &teacher, args.groups, n, &mut rng)?;
        std::fs::write(args.out.join("ts_distance.csv"), h.to_csv())?;
        println!("ts_distance: mean {:.6}, variance {:.6}, n {}", h.mean, h.variance, h.sample_count);
    }
    let n = count(self_similarity_population(&student, args.window, args.groups)?);
    let h = self_similarity_stats(&student, args.window, args.groups, n, &mut rng)?;
    std::fs::write(args.out.join("self_similarity.csv"), h.to_csv())?;
    println!("self_similarity: mean {:.6}, variance {:.6}, n {}", h.mean, h.variance, h.sample_count);
    Ok(())
}

fn write_pgm(path: &Path, sample: &Sample) -> std::io::Result<()> {
    let label = &sample.label;
    let mut bytes = format!("P5\n{} {}\n255\n", label.width(), label.height()).into_bytes();
    bytes.extend_from_slice(label.data());
    std::fs::write(path, bytes)
}

fn gen_data(args: GenDataArgs) -> CmdResult {
    let cfg = load_config(args.config.as_deref())?;
    let data = gen_toy_dataset(&cfg.dataset())?;
    let mut index = String::from("split,id,image,label\n");
    for (split, samples) in [("train", &data.train), ("val", &data.val)] {
        let dir = args.out.join(split);
        std::fs::create_dir_all(&dir)?;
        for (i, s) in samples.iter().enumerate() {
            let (img, lab) = (format!("{split}/{i:05}.afdc"), format!("{split}/{i:05}.pgm"));
            write_features(&args.out.join(&img), &s.image)?;
            write_pgm(&args.out.join(&lab), s)?;
            let _ = writeln!(index, "{split},{i},{img},{lab}");
        }
    }
    std::fs::write(args.out.join("index.csv"), index)?;
    println!("wrote {} train and {} val samples to {}", data.train.len(), data.val.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::GradCheck(a) => run_grad_suite(a.trials.unwrap_or(20), a.seed).map_err(Failure::from).and_then(|r| report_checks(&r)),
        Command::OracleCheck(a) => run_oracle_suite(a.trials.unwrap_or(100), a.seed).map_err(Failure::from).and_then(|r| report_checks(&r)),
        Command::Flops(a) => flops(a),
        Command::Metrics(a) => metrics(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}
