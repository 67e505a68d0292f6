//! Command-line harness for the channel-learning library: dataset
//! generation, operator learning, hierarchy building, ground-state
//! evolution, and the two standard experiments (input-rank fidelity sweep,
//! per-proxy hierarchy table).
//!
//! Exit codes: 0 on success, 2 when a solve stalls without converging,
//! 1 on usage or I/O errors. All randomness flows from `--seed` through
//! SplitMix64, so identical flags produce byte-identical outputs. CSV
//! numbers carry 17 significant digits; reports and datasets are JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qmap_core::dynamics;
use qmap_core::hierarchy::build_hierarchy;
use qmap_core::matfun::{RectMatrix, SymMatrix};
use qmap_core::qcqp::{self, ConstraintSet, LagrangeMultipliers, SolverConfig};
use qmap_core::rng::SplitMix64;
use qmap_core::states::{
    apply_channel, min_kraus_rank, random_density, random_kraus_channel, random_partial_unitary,
    total_fidelity_dataset, FidelityKind, MappingRecord,
};
use qmap_core::superop::{build, SuperopKind};
use qmap_core::{
    DensityMatrix64, Error, MappingDataset64, MappingOperator64, Solution64,
};

#[derive(Parser)]
#[command(name = "qmap", version, about = "Learn quantum-channel mappings from observation pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic observation dataset through a random channel
    Gen(GenArgs),
    /// Learn a mapping operator from a dataset
    Learn(LearnArgs),
    /// Build a hierarchy of mutually S-orthogonal operators from a dataset
    Hier(HierArgs),
    /// Sweep input-state rank, evaluating fidelity proxies on the exact channel
    Fig1(Fig1Args),
    /// Tabulate per-proxy hierarchy levels built over one random channel
    Table1(Table1Args),
    /// Evolve a learned operator in time as a ground state
    Evolve(EvolveArgs),
}

/// Fidelity proxy selector. All but `prop` name a quadratic form with a
/// superoperator behind it; `prop` is evaluation-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Proxy {
    RhoSigma,
    Sqrt,
    Vec,
    Nrho2,
    Log,
    Prop,
}

impl Proxy {
    fn label(self) -> &'static str {
        match self {
            Proxy::RhoSigma => "rho_sigma",
            Proxy::Sqrt => "sqrt",
            Proxy::Vec => "vec",
            Proxy::Nrho2 => "nrho2",
            Proxy::Log => "log",
            Proxy::Prop => "prop",
        }
    }

    fn superop_kind(self) -> Option<SuperopKind> {
        match self {
            Proxy::RhoSigma => Some(SuperopKind::Plain),
            Proxy::Sqrt => Some(SuperopKind::Sqrt),
            Proxy::Vec => Some(SuperopKind::VecNormalized),
            Proxy::Nrho2 => Some(SuperopKind::Nrho2Normalized),
            Proxy::Log => Some(SuperopKind::LogEntropy),
            Proxy::Prop => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Failure handling
// ---------------------------------------------------------------------------

enum Failure {
    Usage(String),
    Run(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Run(Error::NotConverged { .. }) => 2,
            Failure::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "{msg}"),
            Failure::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap reserves 0 for --help/--version; its usage failures map
            // onto this tool's usage-error code.
            return if e.exit_code() == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("qmap: {failure}");
            ExitCode::from(failure.code())
        }
    }
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Learn(args) => cmd_learn(args),
        Command::Hier(args) => cmd_hier(args),
        Command::Fig1(args) => cmd_fig1(args),
        Command::Table1(args) => cmd_table1(args),
        Command::Evolve(args) => cmd_evolve(args),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|source| Failure::Run(Error::Io { path: path.display().to_string(), source }))
}

/// Writes to the path, or to stdout when none is given; a single trailing
/// newline is guaranteed either way.
fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    let mut owned;
    let text = if text.ends_with('\n') {
        text
    } else {
        owned = String::with_capacity(text.len() + 1);
        owned.push_str(text);
        owned.push('\n');
        &owned
    };
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|source| Failure::Run(Error::Io { path: path.display().to_string(), source })),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Full double precision for CSV cells: 17 significant digits.
fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn quadratic_kind(proxy: Proxy) -> Result<SuperopKind, Failure> {
    proxy.superop_kind().ok_or_else(|| {
        Failure::Usage(
            "the proper fidelity is not a quadratic form, so no superoperator exists for it; \
             --proxy prop is only available to the fig1 evaluation sweep"
                .into(),
        )
    })
}

/// A random generating channel: a partial unitary at N_s = 1 (which forces
/// D = n, since one trace-preserving block must be square), a
/// trace-preserving Kraus stack otherwise.
fn draw_channel(
    d: usize,
    n: usize,
    ns: usize,
    rng: &mut SplitMix64,
) -> Result<MappingOperator64, Failure> {
    if ns == 0 {
        return Err(Failure::Usage("--ns must be at least 1".into()));
    }
    if n == 0 || d == 0 {
        return Err(Failure::Usage("dimensions must be positive".into()));
    }
    if d > n {
        return Err(Failure::Usage(format!(
            "mapping operators are D×n with D ≤ n; got D = {d}, n = {n}"
        )));
    }
    if ns == 1 {
        if d != n {
            return Err(Failure::Usage(format!(
                "a single-block channel must be unitary (D = n); got D = {d}, n = {n}"
            )));
        }
        Ok(random_partial_unitary(d, n, rng)?)
    } else {
        let least = min_kraus_rank(d, n);
        if ns < least {
            return Err(Failure::Usage(format!(
                "--ns {ns} is below the trace-preserving minimum {least} for D = {d}, n = {n}"
            )));
        }
        Ok(random_kraus_channel(d, n, ns, rng)?)
    }
}

/// A random mixed-unitary channel as its Kraus stack: `ns` random
/// orthogonal blocks scaled by the square roots of random convex weights.
/// Summing w_s² ⟨U_s|S|U_s⟩ over the blocks, no single term can exceed the
/// best unitary, so the level-0 hierarchy fidelity always reaches the
/// stack's — the property the table demo reports.
fn draw_mixed_unitary(
    d: usize,
    n: usize,
    ns: usize,
    rng: &mut SplitMix64,
) -> Result<MappingOperator64, Failure> {
    if ns == 0 {
        return Err(Failure::Usage("--ns must be at least 1".into()));
    }
    if d != n {
        return Err(Failure::Usage(format!(
            "a mixed-unitary channel needs square blocks (D = n); got D = {d}, n = {n}"
        )));
    }
    let mut weights_sq: Vec<f64> = (0..ns).map(|_| rng.uniform()).collect();
    let total: f64 = weights_sq.iter().sum();
    for w in &mut weights_sq {
        *w /= total;
    }
    let blocks = weights_sq
        .iter()
        .map(|&w_sq| {
            let u: MappingOperator64 = random_partial_unitary(n, n, rng)?;
            Ok(u.block(0).scale(w_sq.sqrt()))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(MappingOperator64::new(blocks)?)
}

/// Maps fresh random rank-`nr` inputs through the channel, pairing each
/// with its exact image.
fn dataset_through(
    channel: &MappingOperator64,
    n: usize,
    nr: usize,
    omegas: &[f64],
    rng: &mut SplitMix64,
) -> Result<MappingDataset64, Failure> {
    if nr < 1 || nr > n {
        return Err(Failure::Usage(format!("--nr {nr} outside 1..={n}")));
    }
    let mut records = Vec::with_capacity(omegas.len());
    for &omega in omegas {
        let rho: DensityMatrix64 = random_density(n, nr, rng)?;
        let mapped = apply_channel(channel, &rho.matrix().to_rect())?;
        let varrho = DensityMatrix64::new(SymMatrix::new(&mapped)?)?;
        records.push(MappingRecord { rho, varrho, omega });
    }
    Ok(MappingDataset64::new(n, channel.d_out(), records)?)
}

fn load_dataset(
    path: &Path,
    n: Option<usize>,
    d: Option<usize>,
) -> Result<MappingDataset64, Failure> {
    let text = read_text(path)?;
    let dataset = MappingDataset64::from_json_str(&text)?;
    if let Some(n) = n {
        if dataset.d_in() != n {
            return Err(Failure::Usage(format!(
                "--n {n} does not match the dataset input dimension {}",
                dataset.d_in()
            )));
        }
    }
    if let Some(d) = d {
        if dataset.d_out() != d {
            return Err(Failure::Usage(format!(
                "--d {d} does not match the dataset output dimension {}",
                dataset.d_out()
            )));
        }
    }
    Ok(dataset)
}

/// Solver knobs shared by every command that iterates.
#[derive(Args)]
struct SolverArgs {
    /// Iteration cap per solve
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Relative fidelity-change tolerance ε_F
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

impl SolverArgs {
    fn config(&self) -> Result<SolverConfig<f64>, Failure> {
        let config = SolverConfig {
            max_iterations: self.max_iter,
            convergence_rel_tol: self.tol,
            ..SolverConfig::default()
        };
        config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenArgs {
    /// Input dimension n
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Output dimension D (defaults to n)
    #[arg(long)]
    d: Option<usize>,
    /// Kraus rank of the generating channel
    #[arg(long, default_value_t = 1)]
    ns: usize,
    /// Rank of each random input state
    #[arg(long, default_value_t = 1)]
    nr: usize,
    /// Number of observation pairs
    #[arg(long, default_value_t = 200)]
    m: usize,
    /// RNG seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// JSON file holding an array of m positive per-observation weights ω
    /// (default: all 1)
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_gen(args: &GenArgs) -> Result<u8, Failure> {
    let d = args.d.unwrap_or(args.n);
    if args.m == 0 {
        return Err(Failure::Usage("--m must be at least 1".into()));
    }
    let omegas = match &args.weights {
        Some(path) => {
            let text = read_text(path)?;
            let w: Vec<f64> = serde_json::from_str(&text).map_err(|source| {
                Failure::Run(Error::Json { path: path.display().to_string(), source })
            })?;
            if w.len() != args.m {
                return Err(Failure::Usage(format!(
                    "weights file holds {} entries for m = {}",
                    w.len(),
                    args.m
                )));
            }
            w
        }
        None => vec![1.0; args.m],
    };
    let mut rng = SplitMix64::new(args.seed);
    let channel = draw_channel(d, args.n, args.ns, &mut rng)?;
    let dataset = dataset_through(&channel, args.n, args.nr, &omegas, &mut rng)?;
    emit(args.out.as_deref(), &dataset.to_json_string())?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// learn
// ---------------------------------------------------------------------------

#[derive(Args)]
struct LearnArgs {
    /// Dataset JSON path
    data: PathBuf,
    /// Fidelity proxy defining the superoperator
    #[arg(long, value_enum, default_value_t = Proxy::Sqrt)]
    proxy: Proxy,
    /// Kraus rank of the learned operator
    #[arg(long, default_value_t = 1)]
    ns: usize,
    /// Expected input dimension, cross-checked against the dataset
    #[arg(long)]
    n: Option<usize>,
    /// Expected output dimension, cross-checked against the dataset
    #[arg(long)]
    d: Option<usize>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Learn output: everything needed to re-derive the reported numbers from
/// the dataset, and to rebuild the solution for `evolve`. The operator is
/// flattened row-major per block ((s, j, k) ↦ s·Dn + j·n + k); λ and ν are
/// row-major.
#[derive(Serialize, Deserialize)]
struct LearnReport {
    proxy: String,
    n: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "N_s")]
    n_s: usize,
    converged: bool,
    iterations: usize,
    fidelity: f64,
    mu_selected: f64,
    residual: f64,
    max_constraint_violation: f64,
    f_prop_overlap: f64,
    operator: Vec<f64>,
    lambda: Vec<f64>,
    nu: Vec<f64>,
}

fn cmd_learn(args: &LearnArgs) -> Result<u8, Failure> {
    let dataset = load_dataset(&args.data, args.n, args.d)?;
    let kind = quadratic_kind(args.proxy)?;
    let s = build(&dataset, kind)?;
    let config = args.solver.config()?;
    let solution = qcqp::solve(&s, args.ns, &config, &ConstraintSet::empty())?;
    let f_prop_overlap =
        total_fidelity_dataset(FidelityKind::PropOverlap, &dataset, &solution.b)?;
    let report = LearnReport {
        proxy: args.proxy.label().into(),
        n: dataset.d_in(),
        d: dataset.d_out(),
        n_s: solution.b.n_s(),
        converged: solution.converged,
        iterations: solution.iterations,
        fidelity: solution.fidelity,
        mu_selected: solution.mu_selected,
        residual: solution.residual,
        max_constraint_violation: solution.max_constraint_violation,
        f_prop_overlap,
        operator: solution.b.flatten(),
        lambda: solution.multipliers.lambda.data().to_vec(),
        nu: solution.multipliers.nu.data().to_vec(),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
    emit(args.out.as_deref(), &text)?;
    if solution.converged {
        Ok(0)
    } else {
        eprintln!(
            "qmap: solver stalled after {} iterations at F = {:e}, mu = {:e}; report written anyway",
            solution.iterations, solution.fidelity, solution.mu_selected
        );
        Ok(2)
    }
}

// ---------------------------------------------------------------------------
// hier
// ---------------------------------------------------------------------------

#[derive(Args)]
struct HierArgs {
    /// Dataset JSON path
    data: PathBuf,
    /// Fidelity proxy defining the superoperator
    #[arg(long, value_enum, default_value_t = Proxy::Sqrt)]
    proxy: Proxy,
    /// Number of hierarchy levels
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Expected input dimension, cross-checked against the dataset
    #[arg(long)]
    n: Option<usize>,
    /// Expected output dimension, cross-checked against the dataset
    #[arg(long)]
    d: Option<usize>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_hier(args: &HierArgs) -> Result<u8, Failure> {
    let dataset = load_dataset(&args.data, args.n, args.d)?;
    let kind = quadratic_kind(args.proxy)?;
    let s = build(&dataset, kind)?;
    let config = args.solver.config()?;
    match build_hierarchy(&s, args.levels, &config) {
        Ok(h) => {
            emit(args.out.as_deref(), &h.to_json_string(None))?;
            Ok(0)
        }
        Err(failure) if matches!(failure.error, Error::NotConverged { .. }) => {
            eprintln!(
                "qmap: level {} did not converge ({}); emitting the {} completed level(s)",
                failure.failed_level,
                failure.error,
                failure.partial.len()
            );
            emit(args.out.as_deref(), &failure.partial.to_json_string(None))?;
            Ok(2)
        }
        Err(failure) => Err(failure.error.into()),
    }
}

// ---------------------------------------------------------------------------
// fig1
// ---------------------------------------------------------------------------

#[derive(Args)]
struct Fig1Args {
    /// Input dimension n (the sweep runs N_r = 1..=n)
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Output dimension D (defaults to n)
    #[arg(long)]
    d: Option<usize>,
    /// Kraus rank of the generating channel
    #[arg(long, default_value_t = 1)]
    ns: usize,
    /// Observation pairs per sweep point
    #[arg(long, default_value_t = 200)]
    m: usize,
    /// RNG seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

const FIG1_PROXIES: [(FidelityKind, &str); 4] = [
    (FidelityKind::RhoSigma, "rho_sigma"),
    (FidelityKind::Sqrt, "sqrt"),
    (FidelityKind::Vec, "vec"),
    (FidelityKind::Prop, "prop"),
];

/// Rank sweep on the exact channel — no solver involved. Each sweep point
/// generates fresh inputs from its own derived RNG stream, maps them
/// through one fixed random channel, and evaluates the proxy family on
/// that channel itself, so the points are independent and run in parallel.
fn cmd_fig1(args: &Fig1Args) -> Result<u8, Failure> {
    let d = args.d.unwrap_or(args.n);
    if args.m == 0 {
        return Err(Failure::Usage("--m must be at least 1".into()));
    }
    let mut rng = SplitMix64::new(args.seed);
    let channel = draw_channel(d, args.n, args.ns, &mut rng)?;
    let omegas = vec![1.0; args.m];

    let mut results: Vec<Result<Vec<(&'static str, f64)>, Failure>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(args.n);
        for nr in 1..=args.n {
            let mut sub = rng.derive(nr as u64);
            let channel = &channel;
            let omegas = &omegas;
            let n = args.n;
            handles.push(scope.spawn(move || {
                let dataset = dataset_through(channel, n, nr, omegas, &mut sub)?;
                FIG1_PROXIES
                    .iter()
                    .map(|&(kind, label)| {
                        Ok((label, total_fidelity_dataset(kind, &dataset, channel)?))
                    })
                    .collect::<Result<Vec<_>, Failure>>()
            }));
        }
        for handle in handles {
            results.push(handle.join().expect("fig1 worker panicked"));
        }
    });

    let mut csv = String::from("N_r,proxy,F_total_on_exact_channel\n");
    for (idx, rows) in results.into_iter().enumerate() {
        for (label, value) in rows? {
            let _ = writeln!(csv, "{},{label},{}", idx + 1, fmt17(value));
        }
    }
    emit(args.out.as_deref(), &csv)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// table1
// ---------------------------------------------------------------------------

#[derive(Args)]
struct Table1Args {
    /// Input dimension n
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Output dimension D (defaults to n)
    #[arg(long)]
    d: Option<usize>,
    /// Kraus rank of the generating channel
    #[arg(long, default_value_t = 3)]
    ns: usize,
    /// Number of pure-state observation pairs
    #[arg(long, default_value_t = 200)]
    m: usize,
    /// RNG seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Hierarchy depth per proxy
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

const TABLE1_PROXIES: [(SuperopKind, &str); 4] = [
    (SuperopKind::Plain, "rho_sigma"),
    (SuperopKind::Sqrt, "sqrt"),
    (SuperopKind::VecNormalized, "vec"),
    (SuperopKind::Nrho2Normalized, "nrho2"),
];

/// One random mixed-unitary channel, one pure-state dataset, one hierarchy
/// per proxy. Rows pair each level's quadratic fidelity with the overlap
/// evaluation of the level operator on the data; a stalled level keeps the
/// completed prefix and moves on to the next proxy.
fn cmd_table1(args: &Table1Args) -> Result<u8, Failure> {
    let d = args.d.unwrap_or(args.n);
    if args.m == 0 {
        return Err(Failure::Usage("--m must be at least 1".into()));
    }
    let config = args.solver.config()?;
    let mut rng = SplitMix64::new(args.seed);
    let channel = draw_mixed_unitary(d, args.n, args.ns, &mut rng)?;
    let omegas = vec![1.0; args.m];
    let dataset = dataset_through(&channel, args.n, 1, &omegas, &mut rng)?;

    let mut csv = String::from("proxy,F_exact,level,F_level,F_prop_level\n");
    let mut stalled = false;
    for (kind, label) in TABLE1_PROXIES {
        let s = build(&dataset, kind)?;
        let f_exact = s.total_fidelity(&channel)?;
        let hier = match build_hierarchy(&s, args.levels, &config) {
            Ok(h) => h,
            Err(failure) if matches!(failure.error, Error::NotConverged { .. }) => {
                eprintln!(
                    "qmap: proxy {label}: level {} did not converge ({}); \
                     emitting the {} completed level(s)",
                    failure.failed_level,
                    failure.error,
                    failure.partial.len()
                );
                stalled = true;
                failure.partial
            }
            Err(failure) => return Err(failure.error.into()),
        };
        for (idx, level) in hier.levels().iter().enumerate() {
            let f_prop =
                total_fidelity_dataset(FidelityKind::PropOverlap, &dataset, &level.u)?;
            let _ = writeln!(
                csv,
                "{label},{},{idx},{},{}",
                fmt17(f_exact),
                fmt17(level.fidelity),
                fmt17(f_prop)
            );
        }
    }
    emit(args.out.as_deref(), &csv)?;
    Ok(if stalled { 2 } else { 0 })
}

// ---------------------------------------------------------------------------
// evolve
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvolveArgs {
    /// Learn-report JSON path
    report: PathBuf,
    /// End of the time grid
    #[arg(long, default_value_t = 10.0)]
    t_max: f64,
    /// Number of grid points, both endpoints included
    #[arg(long, default_value_t = 101)]
    t_steps: usize,
    /// Output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Trajectory of the learned operator as a ground state: one CSV row per
/// (t, flattened entry p·n+k) in amplitude/phase form, plus the worst
/// unitarity deviation over the grid on stderr.
fn cmd_evolve(args: &EvolveArgs) -> Result<u8, Failure> {
    if !(args.t_max >= 0.0 && args.t_max.is_finite()) {
        return Err(Failure::Usage("--t-max must be finite and nonnegative".into()));
    }
    if args.t_steps == 0 {
        return Err(Failure::Usage("--t-steps must be at least 1".into()));
    }
    let text = read_text(&args.report)?;
    let report: LearnReport = serde_json::from_str(&text).map_err(|source| {
        Failure::Run(Error::Json { path: args.report.display().to_string(), source })
    })?;
    let solution = solution_from_report(&report)?;
    let g = dynamics::prepare(&solution)?;

    let n = solution.b.d_in();
    let mut csv = String::from("t,row,amplitude,phase\n");
    let mut worst: f64 = 0.0;
    for step in 0..args.t_steps {
        let t = if args.t_steps == 1 {
            0.0
        } else {
            args.t_max * step as f64 / (args.t_steps - 1) as f64
        };
        let u = dynamics::evolve(&g, t);
        worst = worst.max(u.row_gram_deviation());
        for i in 0..u.rows() {
            for j in 0..u.cols() {
                let (amplitude, phase) = u.abs_phase(i, j);
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    fmt17(t),
                    i * n + j,
                    fmt17(amplitude),
                    fmt17(phase)
                );
            }
        }
    }
    emit(args.out.as_deref(), &csv)?;
    eprintln!("qmap: max unitarity violation over the grid: {worst:e}");
    Ok(0)
}

/// Rebuilds the solver's solution struct from a learn report. Flags are
/// only claimed (and verified) for converged reports; stalled ones are
/// passed through so `prepare` can reject them as not converged.
fn solution_from_report(report: &LearnReport) -> Result<Solution64, Failure> {
    let mut b = MappingOperator64::from_flat(report.d, report.n, report.n_s, &report.operator)?;
    if report.converged {
        b.orthonormal_rows = true;
        b.validate_flags()?;
    }
    let lambda = SymMatrix::new(&RectMatrix::from_vec(
        report.d,
        report.d,
        report.lambda.clone(),
    )?)?;
    let nu = SymMatrix::new(&RectMatrix::from_vec(
        report.n_s,
        report.n_s,
        report.nu.clone(),
    )?)?;
    Ok(Solution64 {
        b,
        multipliers: LagrangeMultipliers { lambda, nu },
        fidelity: report.fidelity,
        mu_selected: report.mu_selected,
        residual: report.residual,
        iterations: report.iterations,
        converged: report.converged,
        max_constraint_violation: report.max_constraint_violation,
    })
}
