//! Command-line front end: `simulate`, `fit-energy`, `reconstruct`,
//! `compare` and `report`.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.
//! Progress messages go to stderr; output files are written atomically.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::dataio::{
    self, format_real, BetaPolicyEcho, ConfigEcho, Diagnostics, EtaRow, InputDigest, Metadata,
    ReconstructionSection, Report,
};
use crate::distribution::{
    chi_square, fidelity, heuristic_truncation, OnOffDataset, PhotonDistribution,
};
use crate::em::{tune_beta, BetaPolicy, EmConfig, EnergyTarget, Init};
use crate::energy_fit::{fit_energy, EnergyFitResult};
use crate::numeric::compensated_sum;
use crate::pdc::{PdcModelParams, Source};
use crate::sim::{
    self, correct_background, efficiency_grid_from_filters, simulate_dataset, FilterSet, SimConfig,
};
use crate::Error;

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A photon source named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// `regime:N_AVE,X,MODES`
    Regime { n_ave: f64, x: f64, modes: u64 },
    /// `thermal:NBAR,MODES`, `NBAR` per mode.
    Thermal { nbar: f64, modes: u64 },
    /// `fock:N`
    Fock(usize),
    /// `file:PATH`, a distribution CSV or a model-parameter JSON file.
    File(PathBuf),
}

fn parse_number<T: FromStr>(text: &str, what: &str) -> Result<T, String> {
    text.trim()
        .parse()
        .map_err(|_| format!("{what} {text:?} is not a valid number"))
}

impl FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| {
            format!("model {s:?} has no kind; expected regime:, thermal:, fock: or file:")
        })?;
        let parts: Vec<&str> = rest.split(',').collect();
        let arity = |n: usize, form: &str| {
            if parts.len() == n {
                Ok(())
            } else {
                Err(format!("expected {kind}:{form}, found {s:?}"))
            }
        };
        match kind {
            "regime" => {
                arity(3, "N_AVE,X,MODES")?;
                Ok(Self::Regime {
                    n_ave: parse_number(parts[0], "N_AVE")?,
                    x: parse_number(parts[1], "X")?,
                    modes: parse_number(parts[2], "MODES")?,
                })
            }
            "thermal" => {
                arity(2, "NBAR,MODES")?;
                Ok(Self::Thermal {
                    nbar: parse_number(parts[0], "NBAR")?,
                    modes: parse_number(parts[1], "MODES")?,
                })
            }
            "fock" => {
                arity(1, "N")?;
                Ok(Self::Fock(parse_number(parts[0], "N")?))
            }
            "file" if !rest.is_empty() => Ok(Self::File(PathBuf::from(rest))),
            "file" => Err("file: needs a path".into()),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Regime { n_ave, x, modes } => write!(f, "regime:{n_ave},{x},{modes}"),
            Self::Thermal { nbar, modes } => write!(f, "thermal:{nbar},{modes}"),
            Self::Fock(n) => write!(f, "fock:{n}"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl ModelSpec {
    pub fn to_source(&self) -> crate::Result<Source> {
        Ok(match self {
            Self::Regime { n_ave, x, modes } => {
                Source::Pdc(PdcModelParams::from_regime(*n_ave, *x, *modes)?)
            }
            Self::Thermal { nbar, modes } => {
                Source::Pdc(PdcModelParams::multithermal(*nbar, *modes)?)
            }
            Self::Fock(n) => Source::Distribution(PhotonDistribution::fock(*n)),
            Self::File(path) => {
                let text = std::fs::read_to_string(path)?;
                if text.trim_start().starts_with('{') {
                    Source::Pdc(serde_json::from_str(&text)?)
                } else {
                    Source::Distribution(dataio::parse_distribution(&text)?)
                }
            }
        })
    }

    fn path(&self) -> Option<&Path> {
        match self {
            Self::File(p) => Some(p),
            _ => None,
        }
    }
}

/// `N_POINTS,ETA_MAX`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub points: usize,
    pub eta_max: f64,
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (points, eta_max) = s
            .split_once(',')
            .ok_or_else(|| format!("expected N_POINTS,ETA_MAX, found {s:?}"))?;
        let spec = Self {
            points: parse_number(points, "N_POINTS")?,
            eta_max: parse_number(eta_max, "ETA_MAX")?,
        };
        if spec.points == 0 {
            return Err("the grid needs at least one point".into());
        }
        if !(spec.eta_max > 0.0 && spec.eta_max <= 1.0) {
            return Err(format!("ETA_MAX {} outside (0, 1]", spec.eta_max));
        }
        Ok(spec)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "onoff",
    version,
    about = "Photon-number reconstruction from on/off detection data"
)]
struct Cli {
    /// Only report warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate an on/off dataset from a known source.
    Simulate(SimulateArgs),
    /// Fit the closed-form off-probability to a dataset.
    FitEnergy(FitArgs),
    /// Reconstruct the photon distribution and write a report.
    Reconstruct(ReconstructArgs),
    /// Compare a report's distribution with a reference model.
    Compare(CompareArgs),
    /// Print plot tables from a report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// regime:N_AVE,X,MODES | thermal:NBAR,MODES | fock:N | file:PATH
    #[arg(long)]
    model: ModelSpec,
    /// N_POINTS,ETA_MAX; the grid is ETA_MAX * k / N_POINTS, k = 1..=N_POINTS.
    #[arg(long, default_value = "30,0.284")]
    grid: GridSpec,
    #[arg(long, default_value_t = sim::DEFAULT_WINDOWS)]
    windows: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Background dataset on the same grid; its off-frequencies multiply the signal's.
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Effective number of thermal modes.
    #[arg(long, default_value_t = 1)]
    modes: u64,
    /// Background dataset divided out before fitting.
    #[arg(long)]
    background: Option<PathBuf>,
    /// JSON output; printed to stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Uniform,
    Model,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("penalty").args(["beta", "target_energy", "target_energy_from_fit"])))]
struct ReconstructArgs {
    #[arg(long)]
    input: PathBuf,
    /// Report (JSON).
    #[arg(long)]
    output: PathBuf,
    /// Largest photon number kept; defaults to a truncation derived from the fitted energy.
    #[arg(long)]
    nmax: Option<usize>,
    /// Fixed Lagrange multiplier of the energy penalty (default 0).
    #[arg(long)]
    beta: Option<f64>,
    /// Tune the multiplier until the mean energy matches this value.
    #[arg(long)]
    target_energy: Option<f64>,
    /// Tune the multiplier to the energy found by fitting the data.
    #[arg(long, requires = "modes")]
    target_energy_from_fit: bool,
    /// Relative tolerance on the target energy.
    #[arg(long, default_value_t = 0.01)]
    energy_tol: f64,
    /// Mode count for the energy fit; the fit runs only when this is given.
    #[arg(long)]
    modes: Option<u64>,
    #[arg(long, default_value_t = EmConfig::DEFAULT_MAX_ITERATIONS)]
    max_iter: usize,
    /// Stop once the loglikelihood changes by less than this.
    #[arg(long, default_value_t = EmConfig::DEFAULT_LOGLIK_TOLERANCE)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Uniform)]
    init: InitArg,
    /// Model for the fidelity diagnostic; the fitted model is used when absent.
    #[arg(long)]
    reference: Option<ModelSpec>,
    /// Fail when the iteration budget runs out before convergence.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    background: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Report (JSON).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    reference: ModelSpec,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report (JSON).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn require_file(flag: &str, path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{flag}: no such file {}",
            path.display()
        )))
    }
}

fn require_writable(flag: &str, path: &Path) -> Outcome {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if path.file_name().is_none() || !parent.is_dir() {
        return Err(Failure::Usage(format!(
            "{flag}: cannot write {}",
            path.display()
        )));
    }
    Ok(())
}

fn require_model_file(flag: &str, spec: &ModelSpec) -> Outcome {
    spec.path().map_or(Ok(()), |p| require_file(flag, p))
}

fn emit(text: &str, output: Option<&Path>) -> Outcome {
    match output {
        Some(path) => Ok(dataio::write_atomic(path, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Reads a dataset and divides out the background, if any.
fn load_dataset(
    input: &Path,
    background: Option<&Path>,
) -> Outcome<(OnOffDataset, Metadata, Vec<u8>)> {
    let bytes = std::fs::read(input).map_err(Error::from)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Failure::Runtime(format!("{} is not UTF-8 text", input.display())))?;
    let (mut data, metadata) = dataio::parse_dataset(&text)?;
    if let Some(bg) = background {
        data = correct_background(&data, &dataio::read_dataset(bg)?)?;
        info!("background from {} divided out", bg.display());
    }
    Ok((data, metadata, bytes))
}

fn simulate(args: SimulateArgs) -> Outcome {
    require_model_file("--model", &args.model)?;
    if let Some(bg) = &args.background {
        require_file("--background", bg)?;
    }
    require_writable("--output", &args.output)?;
    if args.windows == 0 {
        return Err(Failure::Usage("--windows: must be at least 1".into()));
    }

    let source = args.model.to_source()?;
    let grid = efficiency_grid_from_filters(&FilterSet::equally_spaced(
        args.grid.points,
        args.grid.eta_max,
    ))?;
    let mut config = SimConfig::new(grid, args.seed).with_windows(args.windows);
    if let Some(path) = &args.background {
        let background = dataio::read_dataset(path)?;
        for (index, (b, &eta)) in background
            .records()
            .iter()
            .zip(config.grid.etas())
            .enumerate()
        {
            if b.eta != eta {
                return Err(Error::GridMismatch {
                    index,
                    measured: eta,
                    background: b.eta,
                }
                .into());
            }
        }
        config = config.with_background(background.frequencies());
    }
    let data = simulate_dataset(&source, &config)?;
    let metadata = Metadata::new()
        .with("model", &args.model)
        .with("seed", args.seed)
        .with("generator", sim::RNG_ALGORITHM)
        .with("windows", args.windows);
    dataio::write_dataset_with_metadata(&data, &metadata, &args.output)?;
    info!(
        "{} records written to {}",
        data.len(),
        args.output.display()
    );
    Ok(())
}

fn fit(args: FitArgs) -> Outcome {
    require_file("--input", &args.input)?;
    if let Some(bg) = &args.background {
        require_file("--background", bg)?;
    }
    if let Some(out) = &args.output {
        require_writable("--output", out)?;
    }
    let (data, _, _) = load_dataset(&args.input, args.background.as_deref())?;
    let result = fit_energy(&data, args.modes, None)?;
    info!(
        "N_ave = {}, x = {}, residual = {:e}",
        result.n_ave, result.x, result.sum_sq_residual
    );
    let mut text = serde_json::to_string_pretty(&result).map_err(Error::from)?;
    text.push('\n');
    emit(&text, args.output.as_deref())
}

fn reconstruct_command(args: ReconstructArgs) -> Outcome {
    require_file("--input", &args.input)?;
    if let Some(bg) = &args.background {
        require_file("--background", bg)?;
    }
    if let Some(reference) = &args.reference {
        require_model_file("--reference", reference)?;
    }
    require_writable("--output", &args.output)?;
    if args.nmax.is_none() && args.modes.is_none() {
        return Err(Failure::Usage(
            "--nmax: required unless --modes enables the energy fit".into(),
        ));
    }
    if args.init == InitArg::Model && args.modes.is_none() && args.reference.is_none() {
        return Err(Failure::Usage(
            "--init model: needs --modes or --reference".into(),
        ));
    }

    let (data, metadata, bytes) = load_dataset(&args.input, args.background.as_deref())?;
    let fit = match args.modes {
        Some(modes) => {
            let fit = fit_energy(&data, modes, None)?;
            info!("energy fit: N_ave = {}, x = {}", fit.n_ave, fit.x);
            Some(fit)
        }
        None => None,
    };
    let fitted = fit.as_ref().map(EnergyFitResult::params).transpose()?;
    let reference = args
        .reference
        .as_ref()
        .map(ModelSpec::to_source)
        .transpose()?;
    let n_max = match (args.nmax, &fit) {
        (Some(n), _) => n,
        (None, Some(fit)) => heuristic_truncation(fit.n_ave),
        (None, None) => unreachable!("checked above"),
    };

    let init = match args.init {
        InitArg::Uniform => Init::Uniform,
        InitArg::Model => Init::Model(match (&fitted, &reference) {
            (Some(p), _) => Source::Pdc(*p),
            (None, Some(r)) => r.clone(),
            (None, None) => unreachable!("checked above"),
        }),
    };
    let config = EmConfig::new(n_max)
        .with_max_iterations(args.max_iter)
        .with_tolerance(args.tol)
        .with_init(init);
    let target = |energy: f64| EnergyTarget {
        rel_tolerance: args.energy_tol,
        ..EnergyTarget::new(energy)
    };
    let (policy, policy_echo) = match (args.beta, args.target_energy, &fit) {
        (_, Some(energy), _) => (
            BetaPolicy::TargetEnergy(target(energy)),
            BetaPolicyEcho::TargetEnergy {
                target: energy,
                rel_tolerance: args.energy_tol,
                from_fit: false,
            },
        ),
        (_, None, Some(fit)) if args.target_energy_from_fit => (
            BetaPolicy::TargetEnergy(target(fit.n_ave)),
            BetaPolicyEcho::TargetEnergy {
                target: fit.n_ave,
                rel_tolerance: args.energy_tol,
                from_fit: true,
            },
        ),
        (beta, _, _) => {
            let beta = beta.unwrap_or(0.0);
            (BetaPolicy::Fixed(beta), BetaPolicyEcho::Fixed { beta })
        }
    };

    info!("reconstructing with n_max = {n_max}");
    let result = tune_beta(&data, &config, &policy)?;
    info!(
        "{} iterations, converged = {}, beta = {}, mean energy {}, L = {}",
        result.iterations_used,
        result.converged,
        result.beta_used,
        result.mean_energy,
        result.final_loglikelihood()
    );
    if args.strict && !result.converged {
        return Err(Failure::Runtime(format!(
            "no convergence within {} iterations",
            args.max_iter
        )));
    }

    let frequencies = data.frequencies();
    let comparison = match (&reference, &fitted) {
        (Some(r), _) => Some((r.clone(), args.reference.as_ref().unwrap().to_string())),
        (None, Some(p)) => Some((Source::Pdc(*p), "fit".to_string())),
        (None, None) => None,
    };
    let reference_rho = comparison
        .as_ref()
        .map(|(source, _)| source.distribution(n_max))
        .transpose()?;
    let per_eta = data
        .records()
        .iter()
        .zip(&result.predicted_off)
        .map(|(r, &predicted)| {
            Ok(EtaRow {
                eta: r.eta,
                measured: r.frequency(),
                predicted,
                model: fitted
                    .as_ref()
                    .map(|p| p.off_probability(r.eta))
                    .transpose()?,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let loglikelihood = result.final_loglikelihood();
    let report = Report {
        input: InputDigest {
            path: args.input.display().to_string(),
            sha256: dataio::sha256_hex(&bytes),
            records: data.len(),
            label: data.label().to_string(),
        },
        config: ConfigEcho {
            n_max,
            beta_policy: policy_echo,
            max_iterations: args.max_iter,
            loglik_tolerance: args.tol,
            init: format!("{:?}", args.init).to_lowercase(),
            background: args.background.as_ref().map(|p| p.display().to_string()),
            seed: metadata.get("seed").and_then(|s| s.parse().ok()),
        },
        fit,
        reconstruction: ReconstructionSection {
            normalization: compensated_sum(result.distribution.probs().iter().copied()),
            rho: result.distribution.probs().to_vec(),
            iterations: result.iterations_used,
            converged: result.converged,
            beta_used: result.beta_used,
            mean_energy: result.mean_energy,
            loglikelihood: loglikelihood.is_finite().then_some(loglikelihood),
        },
        diagnostics: Diagnostics {
            n_ave: fit.map(|f| f.n_ave),
            x: fit.map(|f| f.x),
            chi_square: chi_square(&result.predicted_off, &frequencies)?,
            fidelity: reference_rho
                .as_ref()
                .map(|r| fidelity(&result.distribution, r)),
            reference: comparison.map(|(_, name)| name),
            reference_rho: reference_rho.map(PhotonDistribution::into_probs),
            per_eta,
        },
    };
    dataio::write_report(&report, &args.output)?;
    info!("report written to {}", args.output.display());
    Ok(())
}

/// Fidelity and chi-square of a report against a reference, followed by the
/// per-`n` table `n,rho_ml,rho_reference`.
pub fn compare_report(report: &Report, reference: &Source) -> crate::Result<String> {
    let ml = report.distribution()?;
    let reference = reference.distribution(ml.n_max())?;
    let rows = &report.diagnostics.per_eta;
    let predicted: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
    let measured: Vec<f64> = rows.iter().map(|r| r.measured).collect();
    let mut out = String::new();
    writeln!(
        out,
        "# fidelity: {}",
        format_real(fidelity(&ml, &reference))
    )
    .unwrap();
    writeln!(
        out,
        "# chi_square: {}",
        format_real(chi_square(&predicted, &measured)?)
    )
    .unwrap();
    out.push_str("n,rho_ml,rho_reference\n");
    for (n, (a, b)) in ml.probs().iter().zip(reference.probs()).enumerate() {
        writeln!(out, "{n},{},{}", format_real(*a), format_real(*b)).unwrap();
    }
    Ok(out)
}

fn compare(args: CompareArgs) -> Outcome {
    require_file("--input", &args.input)?;
    require_model_file("--reference", &args.reference)?;
    if let Some(out) = &args.output {
        require_writable("--output", out)?;
    }
    let report = dataio::read_report(&args.input)?;
    let text = compare_report(&report, &args.reference.to_source()?)?;
    emit(&text, args.output.as_deref())
}

/// The two plot tables of a report.
///
/// Table 1 is `eta,measured,reconstructed,model`: measured off-frequency,
/// off-probability of the reconstruction and of the fitted model. Table 2 is
/// `n,rho_ml,rho_model`. Model columns are left empty when the report holds
/// no model.
pub fn emit_plot_data(report: &Report) -> (String, String) {
    let cell = |v: Option<f64>| v.map(format_real).unwrap_or_default();
    let mut off = String::from("eta,measured,reconstructed,model\n");
    for row in &report.diagnostics.per_eta {
        writeln!(
            off,
            "{},{},{},{}",
            format_real(row.eta),
            format_real(row.measured),
            format_real(row.predicted),
            cell(row.model)
        )
        .unwrap();
    }
    let mut dist = String::from("n,rho_ml,rho_model\n");
    let model = report.diagnostics.reference_rho.as_deref();
    for (n, p) in report.reconstruction.rho.iter().enumerate() {
        let m = model.and_then(|m| m.get(n).copied());
        writeln!(dist, "{n},{},{}", format_real(*p), cell(m)).unwrap();
    }
    (off, dist)
}

fn report(args: ReportArgs) -> Outcome {
    require_file("--input", &args.input)?;
    if let Some(out) = &args.output {
        require_writable("--output", out)?;
    }
    let report = dataio::read_report(&args.input)?;
    let (off, dist) = emit_plot_data(&report);
    // Two blank lines separate the tables, as gnuplot's `index` expects.
    emit(&format!("{off}\n\n{dist}"), args.output.as_deref())
}

fn init_logging(quiet: bool) {
    let level = if quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Runs one command and returns its exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_SUCCESS
            };
        }
    };
    init_logging(cli.quiet);
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::FitEnergy(a) => fit(a),
        Command::Reconstruct(a) => reconstruct_command(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => EXIT_SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
