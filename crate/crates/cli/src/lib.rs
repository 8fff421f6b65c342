//! Command-line front end: adjoint-test suites, the halo inspector, the
//! Lenet-5 equivalence verifier and the trainer.

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use adjmove::catalog::{self, CatalogConfig};
use adjmove::network::{self, Dataset, Fault, Metric, Mode, TrainConfig};
use adjmove::{adjoint_test, decompose, AdjointReport, GroupConfig, HaloExchange, KernelDim, KernelSpec, Real};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub mod config;
pub mod idx;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] adjmove::Error),
    #[error(transparent)]
    Idx(#[from] idx::IdxError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "adjmove", version, about, args_override_self = true)]
pub struct Cli {
    /// File of `key = value` defaults for the subcommand; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the adjoint test on one named operator or on all of them.
    AdjointTest(AdjointArgs),
    /// Print the per-worker halo and trim table of one layer.
    Halo(HaloArgs),
    /// Compare distributed and sequential Lenet-5 on one batch.
    Verify(VerifyArgs),
    /// Train Lenet-5.
    Train(TrainArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Args)]
pub struct AdjointArgs {
    /// Operator name; see --list.
    #[arg(long, conflicts_with = "all")]
    pub op: Option<String>,
    #[arg(long)]
    pub all: bool,
    /// Print the operator names and exit.
    #[arg(long)]
    pub list: bool,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, value_delimiter = ',', default_value = "8,6")]
    pub shape: Vec<usize>,
    /// Worker grid, e.g. `1,2,2`. Defaults to splitting the first dimension.
    #[arg(long, value_delimiter = ',')]
    pub partition: Option<Vec<usize>>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to 1e-12 in f64 and 1e-4 in f32.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Seconds a receive may block before the group is declared stuck.
    #[arg(long, default_value_t = 30)]
    pub watchdog: u64,
}

#[derive(Debug, Args)]
pub struct HaloArgs {
    /// Global input shape.
    #[arg(long, value_delimiter = ',', required = true)]
    pub shape: Vec<usize>,
    /// Kernel size per dimension; one value applies to every dimension.
    #[arg(long, value_delimiter = ',', required = true)]
    pub kernel: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub stride: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub dilation: Vec<usize>,
    /// Symmetric zero padding.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub pad: Vec<usize>,
    /// Worker grid over the input.
    #[arg(long, value_delimiter = ',', required = true)]
    pub partition: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Perturb one rank's block of a parameter, as `NAME@RANK`.
    #[arg(long, value_name = "NAME@RANK")]
    pub fault: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    pub fault_delta: f64,
    #[arg(long, default_value_t = 30)]
    pub watchdog: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Sequential,
    Distributed,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = TrainMode::Distributed)]
    pub mode: TrainMode,
    /// Directory with the uncompressed MNIST IDX files.
    #[arg(long, conflicts_with = "synthetic")]
    pub dataset: Option<PathBuf>,
    /// Train on generated two-class data instead.
    #[arg(long)]
    pub synthetic: bool,
    /// Training samples generated with --synthetic.
    #[arg(long, default_value_t = 1024)]
    pub synthetic_size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Also write the metric rows to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[arg(long, default_value_t = 30)]
    pub watchdog: u64,
}

/// Largest per-step relative loss difference accepted by `--mode both`.
pub fn divergence_tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-10,
        Precision::F32 => 1e-4,
    }
}

/// Runs one subcommand, writing its report to `out`. `Ok(false)` means a
/// check failed.
pub fn run(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<bool, CliError> {
    match &cli.command {
        Command::AdjointTest(a) => match a.precision {
            Precision::F64 => adjoint_suite::<f64>(a, out),
            Precision::F32 => adjoint_suite::<f32>(a, out),
        },
        Command::Halo(a) => halo(a, out),
        Command::Verify(a) => verify(a, out),
        Command::Train(a) => match a.precision {
            Precision::F64 => train::<f64>(a, out),
            Precision::F32 => train::<f32>(a, out),
        },
    }
}

fn positive(name: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(CliError::Usage(format!("--{name} must be positive")));
    }
    Ok(())
}

fn adjoint_suite<T: Real>(a: &AdjointArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    if a.list {
        for name in catalog::ALL.iter().chain(catalog::NEGATIVE_CONTROLS) {
            writeln!(out, "{name}")?;
        }
        return Ok(true);
    }
    positive("trials", a.trials)?;
    positive("workers", a.workers)?;
    let names: Vec<&str> = match (&a.op, a.all) {
        (Some(op), _) => vec![op.as_str()],
        (None, true) => catalog::ALL.to_vec(),
        (None, false) => return Err(CliError::Usage("pass --op NAME or --all".into())),
    };
    let cfg = CatalogConfig {
        workers: a.workers,
        shape: a.shape.clone(),
        partition: a.partition.clone(),
        seed: a.seed,
        group: GroupConfig { watchdog: Duration::from_secs(a.watchdog) },
    };
    let epsilon = a.epsilon.unwrap_or(T::ADJOINT_EPSILON);
    writeln!(out, "{}", AdjointReport::HEADER)?;
    let mut passed = true;
    for name in names {
        let op = catalog::build::<T>(name, &cfg)?;
        let mut r = adjoint_test(op.as_ref(), a.trials, epsilon, a.seed)?;
        r.op = name.to_string();
        passed &= r.passed;
        writeln!(out, "{r}")?;
    }
    Ok(passed)
}

/// Repeats a single value across `n` dimensions.
fn per_dim(name: &str, v: &[usize], n: usize) -> Result<Vec<usize>, CliError> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        m if m == n => Ok(v.to_vec()),
        m => Err(CliError::Usage(format!("--{name} has {m} values for {n} dimensions"))),
    }
}

fn halo(a: &HaloArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    let n = a.shape.len();
    let size = per_dim("kernel", &a.kernel, n)?;
    let stride = per_dim("stride", &a.stride, n)?;
    let dilation = per_dim("dilation", &a.dilation, n)?;
    let pad = per_dim("pad", &a.pad, n)?;
    let dims = (0..n)
        .map(|d| KernelDim { size: size[d], stride: stride[d], dilation: dilation[d], pad_left: pad[d], pad_right: pad[d] })
        .collect();
    let exchange = HaloExchange::from_kernel(decompose(&a.shape, &a.partition)?, &KernelSpec::new(dims))?;
    write!(out, "{exchange}")?;
    Ok(true)
}

fn parse_fault(s: &str, delta: f64) -> Result<Fault, CliError> {
    let (param, rank) = s.split_once('@').ok_or_else(|| CliError::Usage(format!("--fault {s:?} is not NAME@RANK")))?;
    let rank = rank.parse().map_err(|_| CliError::Usage(format!("--fault rank {rank:?} is not a number")))?;
    Ok(Fault { param: param.into(), rank, delta })
}

fn verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    positive("batch", a.batch)?;
    let fault = a.fault.as_deref().map(|s| parse_fault(s, a.fault_delta)).transpose()?;
    let config = GroupConfig { watchdog: Duration::from_secs(a.watchdog) };
    let report = network::verify_equivalence(a.seed, a.batch, fault.as_ref(), config)?;
    write!(out, "{report}")?;
    Ok(report.passed())
}

fn datasets(a: &TrainArgs) -> Result<(Dataset, Dataset), CliError> {
    match (&a.dataset, a.synthetic) {
        (Some(dir), _) => Ok(idx::load_mnist(dir)?),
        (None, true) => Ok((
            Dataset::synthetic(a.synthetic_size, a.seed),
            Dataset::synthetic(a.synthetic_size / 4, a.seed.wrapping_add(1)),
        )),
        (None, false) => Err(CliError::Usage("pass --dataset DIR or --synthetic".into())),
    }
}

fn train<T: Real>(a: &TrainArgs, out: &mut (dyn Write + Send)) -> Result<bool, CliError> {
    positive("epochs", a.epochs)?;
    positive("batch", a.batch)?;
    if a.lr.is_nan() || a.lr <= 0.0 {
        return Err(CliError::Usage("--lr must be positive".into()));
    }
    let (train_set, test_set) = datasets(a)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
        max_steps: a.max_steps,
        watchdog: Duration::from_secs(a.watchdog),
    };
    let modes = match a.mode {
        TrainMode::Sequential => vec![Mode::Sequential],
        TrainMode::Distributed => vec![Mode::Distributed],
        TrainMode::Both => vec![Mode::Sequential, Mode::Distributed],
    };
    let header = format!("mode, {}", Metric::HEADER);
    writeln!(out, "{header}")?;
    let file = a.metrics.as_ref().map(File::create).transpose()?;
    let sinks = Mutex::new((out, file));
    if let Some(f) = &mut sinks.lock().expect("sink lock").1 {
        writeln!(f, "{header}")?;
    }
    let mut curves = Vec::new();
    for mode in modes {
        let failed = Mutex::new(None);
        let sink = |m: &Metric| {
            let mut s = sinks.lock().expect("sink lock");
            let line = format!("{mode}, {m}");
            let r = writeln!(s.0, "{line}").and_then(|_| s.1.as_mut().map_or(Ok(()), |f| writeln!(f, "{line}")));
            if let Err(e) = r {
                failed.lock().expect("error lock").get_or_insert(e);
            }
        };
        let curve = network::train::<T>(mode, &train_set, &test_set, &cfg, &sink)?;
        if let Some(e) = failed.into_inner().expect("error lock") {
            return Err(e.into());
        }
        curves.push(curve);
    }
    let (out, _) = sinks.into_inner().expect("sink lock");
    if let [seq, dist] = curves.as_slice() {
        let div = network::loss_divergence(seq, dist);
        let tol = divergence_tolerance(a.precision);
        let pass = div < tol;
        writeln!(out, "loss_divergence, {div:.3e}, {tol:.1e}, {}", if pass { "PASS" } else { "FAIL" })?;
        return Ok(pass);
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn per_dim_broadcasts_single_values() {
        assert_eq!(per_dim("k", &[3], 2).unwrap(), vec![3, 3]);
        assert!(per_dim("k", &[3, 4, 5], 2).is_err());
    }

    #[test]
    fn fault_syntax() {
        let f = parse_fault("C5.w@1", 0.5).unwrap();
        assert_eq!((f.param.as_str(), f.rank), ("C5.w", 1));
        assert!(parse_fault("C5.w", 0.5).is_err());
    }
}
