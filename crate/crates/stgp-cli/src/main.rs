//! `stgp` command line: panel fitting and prediction, missing-data filling,
//! dense-oracle equivalence checks, complexity benchmarks, the
//! spatially-distributed identification demo, and a synthetic fixture
//! generator.
//!
//! Exit codes: 0 success, 2 configuration, 3 input/IO, 4 numerical
//! degeneracy, 5 tolerance breach.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use stgp::error::StgpError;

mod commands;

#[derive(Parser)]
#[command(name = "stgp", version, about = "Spatial-temporal GP regression")]
struct Cli {
    /// Worker threads (falls back to the STGP_WORKERS environment variable,
    /// then to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TemporalFamilyArg {
    Exp,
    Matern32,
    Te2exp,
    #[value(name = "te2exp+matern")]
    Te2expMatern,
    Pd,
    DcInput,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpatialFamilyArg {
    Se,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mlm,
    Gcv,
    Sure,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CoordsArg {
    /// Coordinates used as stored (e.g. longitude/latitude degrees).
    Raw,
    /// ECEF meters converted to 10 km units.
    Ecef10km,
}

#[derive(Args)]
pub struct PanelArgs {
    /// Data CSV: header `time,<id>,...`, one row per time instant.
    #[arg(long)]
    pub data: PathBuf,
    /// Locations CSV: header `id,<coord>,...`.
    #[arg(long)]
    pub locations: PathBuf,
    /// Number of training time instants.
    #[arg(long)]
    pub train: Option<usize>,
    /// Number of test time instants (the trailing columns).
    #[arg(long)]
    pub test: Option<usize>,
    /// Sampling interval.
    #[arg(long, default_value_t = 1.0)]
    pub ts: f64,
    #[arg(long, value_enum, default_value_t = CoordsArg::Raw)]
    pub coords: CoordsArg,
}

#[derive(Args)]
pub struct KernelArgs {
    #[arg(long, value_enum, default_value_t = TemporalFamilyArg::Te2exp)]
    pub temporal_kernel: TemporalFamilyArg,
    #[arg(long, value_enum, default_value_t = SpatialFamilyArg::Se)]
    pub spatial_kernel: SpatialFamilyArg,
    /// Fixed period frequency of the te2exp/pd families (cycles per time
    /// unit, e.g. 1/12 for monthly data with a yearly cycle).
    #[arg(long, default_value_t = 1.0 / 12.0)]
    pub frequency: f64,
    /// Fixed exponential envelope of the te2exp family (time units).
    #[arg(long, default_value_t = 5e3)]
    pub envelope: f64,
}

#[derive(Args)]
pub struct SearchArgs {
    /// Grid points per hyper-parameter component.
    #[arg(long, default_value_t = 5)]
    pub grid_size: usize,
    /// Grid overrides, `name=lo:hi:count` separated by commas.
    #[arg(long)]
    pub grid: Option<String>,
    /// Local searches launched from the best grid points.
    #[arg(long, default_value_t = 5)]
    pub starts: usize,
    /// Write the optimizer trace CSV.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit hyper-parameters on a panel, smooth the field and predict the
    /// test horizon.
    Fit {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        kernel: KernelArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long, value_enum, default_value_t = MethodArg::Mlm)]
        method: MethodArg,
        /// Noise variance for GCV/SURE (mandatory unless --sigma2-from).
        #[arg(long)]
        sigma2: Option<f64>,
        /// Read sigma2 from a previous fit's hyperparams.json.
        #[arg(long)]
        sigma2_from: Option<PathBuf>,
        /// Fill missing data per location before fitting.
        #[arg(long)]
        fill_first: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fill missing entries per location and write the completed panel.
    Fill {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        kernel: KernelArgs,
        #[arg(long, default_value_t = 4)]
        grid_size: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Randomized structured-vs-dense equivalence suite.
    OracleCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 8)]
        max_n: usize,
        #[arg(long, default_value_t = 4)]
        max_m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Timing table over an (N, M) grid: structured vs naive cost
    /// evaluation.
    Bench {
        /// Comma-separated N values.
        #[arg(long, default_value = "250,500")]
        n: String,
        /// Comma-separated M values.
        #[arg(long, default_value = "64,128,256")]
        m: String,
        /// Also time the naive O(NM^3) baseline (slow for large sizes).
        #[arg(long)]
        naive: bool,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Spatially-distributed FIR identification demo.
    SysidDemo {
        #[arg(long, default_value_t = 50)]
        m: usize,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 125)]
        nb: usize,
        #[arg(long, default_value_t = 1.0)]
        snr: f64,
        /// Number of seeds to run (seed, seed+1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        grid_size: usize,
        #[arg(long, default_value_t = 3)]
        starts: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic panel fixture (data + locations CSV).
    GenFixture {
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 50)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        test: usize,
        /// Fraction of cells masked as missing.
        #[arg(long, default_value_t = 0.0)]
        missing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let workers = cli
        .workers
        .or_else(|| {
            std::env::var("STGP_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if workers > 0 {
        // ignore failure when a pool already exists (e.g. under tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let result = match cli.command {
        Command::Fit {
            panel,
            kernel,
            search,
            method,
            sigma2,
            sigma2_from,
            fill_first,
            seed,
            out,
        } => commands::cmd_fit(
            panel, kernel, search, method, sigma2, sigma2_from, fill_first, seed, &out,
        ),
        Command::Fill {
            panel,
            kernel,
            grid_size,
            out,
        } => commands::cmd_fill(panel, kernel, grid_size, &out),
        Command::OracleCheck {
            instances,
            max_n,
            max_m,
            seed,
        } => commands::cmd_oracle_check(instances, max_n, max_m, seed),
        Command::Bench {
            n,
            m,
            naive,
            reps,
            out,
        } => commands::cmd_bench(&n, &m, naive, reps, &out),
        Command::SysidDemo {
            m,
            n,
            nb,
            snr,
            seeds,
            seed,
            grid_size,
            starts,
            out,
        } => commands::cmd_sysid_demo(m, n, nb, snr, seeds, seed, grid_size, starts, &out),
        Command::GenFixture {
            m,
            train,
            test,
            missing,
            seed,
            out,
        } => commands::cmd_gen_fixture(m, train, test, missing, seed, &out),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn exit_code(err: &StgpError) -> i32 {
    err.exit_code()
}
