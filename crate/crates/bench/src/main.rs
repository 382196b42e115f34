use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hmat_bench::{dump_tree, run_benchmark, verify, write_csv, BenchConfig, BenchError, VerifyOptions};
use hmat_core::{DEFAULT_ETA, DEFAULT_N_MIN};

#[derive(Parser)]
#[command(name = "hmat-bench", version, about = "H-matrix multiplication benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time the multiplication over a range of mesh levels and write CSV.
    Bench(RunArgs),
    /// Check the multiplication against dense oracles (N <= 1536).
    Verify(VerifyArgs),
    /// Print the block-cluster tree of one mesh level.
    DumpTree(DumpArgs),
}

/// Flags override values from `--config`.
#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Kernel pair: exp or slp.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    level_min: Option<u32>,
    #[arg(long)]
    level_max: Option<u32>,
    /// Leaf cluster size.
    #[arg(long)]
    nmin: Option<usize>,
    /// Admissibility parameter.
    #[arg(long)]
    eta: Option<f64>,
    /// Fixed-rank truncation.
    #[arg(long, conflicts_with = "eps")]
    rank: Option<usize>,
    /// Relative-accuracy truncation.
    #[arg(long)]
    eps: Option<f64>,
    /// new or traditional.
    #[arg(long)]
    mode: Option<String>,
    /// aca, bilanczos, randomized, svd; hier for the traditional mode.
    #[arg(long)]
    compressor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Perturb the product before checking; the checks must then fail.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long, default_value_t = 1)]
    level: u32,
    #[arg(long, default_value_t = DEFAULT_N_MIN)]
    nmin: usize,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: f64,
}

impl RunArgs {
    fn config(&self) -> Result<BenchConfig, BenchError> {
        let mut cfg = match &self.config {
            Some(path) => BenchConfig::parse(&std::fs::read_to_string(path)?)?,
            None => BenchConfig::default(),
        };
        let overrides: [(&str, Option<String>); 12] = [
            ("kernel", self.kernel.clone()),
            ("level_min", self.level_min.map(|v| v.to_string())),
            ("level_max", self.level_max.map(|v| v.to_string())),
            ("nmin", self.nmin.map(|v| v.to_string())),
            ("eta", self.eta.map(|v| v.to_string())),
            ("rank", self.rank.map(|v| v.to_string())),
            ("eps", self.eps.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("compressor", self.compressor.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)
                    .map_err(|m| BenchError::Invalid(format!("--{}: {m}", key.replace('_', "-"))))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool, BenchError> {
    match cli.cmd {
        Cmd::Bench(args) => {
            let cfg = args.config()?;
            let rows = run_benchmark(&cfg)?;
            match &cfg.out {
                Some(path) => write_csv(&rows, BufWriter::new(File::create(path)?))?,
                None => write_csv(&rows, io::stdout().lock())?,
            }
            Ok(true)
        }
        Cmd::Verify(args) => {
            let cfg = args.run.config()?;
            let report = verify(&cfg, VerifyOptions { corrupt: args.corrupt })?;
            print!("{}", report.table());
            let ok = report.passed();
            println!("{}", if ok { "verify: PASS" } else { "verify: FAIL" });
            Ok(ok)
        }
        Cmd::DumpTree(args) => {
            print!("{}", dump_tree(args.level, args.nmin, args.eta)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
