//! Command-line front end.
//!
//! Each subcommand writes its artifacts plus a `<subcommand>_manifest.toml`
//! (input hashes, seed, version, resolved flags, output hashes) into the
//! output directory. Output files never carry timestamps or absolute output
//! paths, so identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, Vector3};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::calibrate::{
    self, CalibrationError, CalibrationProblem, Covariance, InitStrategy, PerturbationBounds,
    SolverOptions,
};
use crate::error::Error;
use crate::io::{self, ScenarioFile};
use crate::jacobian::{self, StateVector};
use crate::linalg::{self, RankPolicy};
use crate::observability::{self, CheckReport, RankReport};
use crate::scenario;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "ARRAYCAL_OUT_DIR";

/// Bundled scenarios, by name.
pub const BUNDLED_SCENARIOS: &[(&str, &str)] = &[
    ("fig2_a", include_str!("../scenarios/fig2_a.toml")),
    ("fig2_b", include_str!("../scenarios/fig2_b.toml")),
    (
        "fig3_collinear",
        include_str!("../scenarios/fig3_collinear.toml"),
    ),
    (
        "fig3_coplanar",
        include_str!("../scenarios/fig3_coplanar.toml"),
    ),
    (
        "fig4_collinear_array2",
        include_str!("../scenarios/fig4_collinear_array2.toml"),
    ),
    ("fig4_gimbal", include_str!("../scenarios/fig4_gimbal.toml")),
];

pub fn bundled_scenario(name: &str) -> Option<&'static str> {
    BUNDLED_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
}

/// Parse a bundled scenario; panics only if the shipped data is broken.
pub fn load_bundled(name: &str) -> crate::Result<ScenarioFile> {
    let text = bundled_scenario(name)
        .ok_or_else(|| Error::InvalidConfig(format!("no bundled scenario named {name}")))?;
    io::parse_scenario(text, &format!("bundled:{name}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Fig2,
    Fig3,
    Fig4,
}

impl Figure {
    pub fn scenarios(self) -> &'static [&'static str] {
        match self {
            Figure::Fig2 => &["fig2_a", "fig2_b"],
            Figure::Fig3 => &["fig3_collinear", "fig3_coplanar"],
            Figure::Fig4 => &["fig4_collinear_array2", "fig4_gimbal"],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    /// Ground truth from the scenario plus seeded uniform noise.
    Perturbed,
    /// Zero extrinsics, sources integrated from odometry.
    DeadReckoning,
    /// A state file given with --init-file.
    File,
}

#[derive(Debug, Parser)]
#[command(
    name = "arraycal",
    version,
    about = "Calibration and observability analysis for distributed microphone arrays"
)]
pub struct Cli {
    /// Output directory (created if absent).
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,

    /// Replace existing output files.
    #[arg(long, global = true)]
    pub force: bool,

    /// Absolute singular-value threshold for rank decisions (default:
    /// sigma_max * max(rows, cols) * eps).
    #[arg(long, global = true)]
    pub rank_tol: Option<f64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ScenarioArgs {
    /// Scenario TOML file.
    #[arg(long)]
    pub scenario: PathBuf,

    /// Override the scenario's noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct SolverArgs {
    #[arg(long, default_value_t = SolverOptions::default().gtol)]
    pub gtol: f64,
    #[arg(long, default_value_t = SolverOptions::default().xtol)]
    pub xtol: f64,
    #[arg(long, default_value_t = SolverOptions::default().max_iterations)]
    pub max_iter: usize,
    #[arg(long, default_value_t = SolverOptions::default().initial_damping)]
    pub initial_damping: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize noisy (or noise-free) measurements from a scenario.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Emit the ideal measurements without noise.
        #[arg(long)]
        noise_free: bool,
    },
    /// Rank of the Jacobian versus number of emissions.
    RankTrace {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Necessary, sufficient and degenerate-case observability verdicts.
    Check {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Estimate extrinsics and source track from measurements.
    Calibrate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Measurement TOML; synthesized from the scenario when omitted.
        #[arg(long)]
        measurements: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = InitKind::Perturbed)]
        init: InitKind,
        /// State TOML used with --init file.
        #[arg(long)]
        init_file: Option<PathBuf>,
        /// Seed for --init perturbed.
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        /// First source position for --init dead-reckoning, "x,y,z".
        #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
        start: Vector3<f64>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Cramér-Rao bound at the scenario's ground truth.
    Crlb {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Also write the analytic Jacobian.
        #[arg(long)]
        dump_jacobian: bool,
        /// Also write the Fisher information matrix.
        #[arg(long)]
        dump_fim: bool,
        /// Also write the Jacobian's singular values.
        #[arg(long)]
        dump_singular_values: bool,
    },
    /// Rank traces for the bundled scenarios behind one figure.
    ReproFig {
        #[arg(value_enum)]
        figure: Figure,
    },
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got {s:?}"));
    }
    let mut v = Vector3::zeros();
    for (i, p) in parts.iter().enumerate() {
        v[i] = p.parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(v)
}

/// Usage and parse problems exit with 1, everything else with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

/// Anything wrong with what the user handed in is a usage/parse error.
fn input_error(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    seed: Option<u64>,
    flags: Vec<(String, String)>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

#[derive(Debug, Serialize)]
struct FileDigest {
    name: String,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects outputs for one run and writes them with the manifest.
struct Run {
    out: PathBuf,
    force: bool,
    manifest: Manifest,
    written: Vec<PathBuf>,
}

impl Run {
    fn new(cli: &Cli, subcommand: &str) -> Self {
        let mut flags = vec![("force".to_string(), cli.force.to_string())];
        if let Some(t) = cli.rank_tol {
            flags.push(("rank_tol".into(), io::fmt_f64(t)));
        }
        Self {
            out: cli.out.clone(),
            force: cli.force,
            manifest: Manifest {
                tool: "arraycal",
                version: env!("CARGO_PKG_VERSION"),
                subcommand: subcommand.into(),
                seed: None,
                flags,
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
            written: Vec::new(),
        }
    }

    fn flag(&mut self, name: &str, value: impl ToString) {
        self.manifest.flags.push((name.into(), value.to_string()));
    }

    fn input(&mut self, name: &str, bytes: &[u8]) {
        self.manifest.inputs.push(FileDigest {
            name: name.into(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Check every target up front so a refused overwrite leaves nothing
    /// half-written.
    fn preflight(&self, names: &[&str]) -> Result<(), CliError> {
        if self.force {
            return Ok(());
        }
        let manifest = self.manifest_name();
        for n in names
            .iter()
            .copied()
            .chain(std::iter::once(manifest.as_str()))
        {
            let p = self.out.join(n);
            if p.exists() {
                return Err(CliError::Usage(format!(
                    "{} exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.out.join(name);
        io::write_output(&path, contents, self.force).map_err(runtime)?;
        self.manifest.outputs.push(FileDigest {
            name: name.into(),
            sha256: sha256_hex(contents),
        });
        self.written.push(path);
        Ok(())
    }

    fn manifest_name(&self) -> String {
        format!(
            "{}_manifest.toml",
            self.manifest.subcommand.replace('-', "_")
        )
    }

    fn finish(mut self) -> Result<Vec<PathBuf>, CliError> {
        let text = toml::to_string(&self.manifest).map_err(runtime)?;
        let path = self.out.join(self.manifest_name());
        io::write_output(&path, text.as_bytes(), self.force).map_err(runtime)?;
        self.written.push(path);
        Ok(self.written)
    }
}

fn rank_policy(cli: &Cli) -> Result<RankPolicy, CliError> {
    match cli.rank_tol {
        Some(t) if !(t > 0.0 && t.is_finite()) => Err(CliError::Usage(format!(
            "--rank-tol must be positive, got {t}"
        ))),
        Some(t) => Ok(RankPolicy::with_tolerance(t)),
        None => Ok(RankPolicy::default()),
    }
}

fn load_input(run: &mut Run, args: &ScenarioArgs) -> Result<ScenarioFile, CliError> {
    let text = io::read_text(&args.scenario).map_err(input_error)?;
    run.input(&file_label(&args.scenario), text.as_bytes());
    let mut file =
        io::parse_scenario(&text, &args.scenario.display().to_string()).map_err(input_error)?;
    if let Some(seed) = args.seed {
        file = file.with_seed(seed);
    }
    run.manifest.seed = Some(file.scenario.seed());
    Ok(file)
}

fn file_label(p: &Path) -> String {
    p.display().to_string()
}

/// CSV of a rank trace: `step,rank,g2,deficit,full_rank_flag`.
pub fn rank_trace_csv(report: &RankReport) -> String {
    let mut buf = Vec::new();
    io::write_csv(
        &mut buf,
        Some(&["step", "rank", "g2", "deficit", "full_rank_flag"]),
        report.trace.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.rank.to_string(),
                r.g2.to_string(),
                r.deficit().to_string(),
                u8::from(r.full_rank()).to_string(),
            ]
        }),
    )
    .expect("writing to memory");
    String::from_utf8(buf).expect("utf-8")
}

/// Human-readable observability report.
pub fn check_text(report: &CheckReport) -> String {
    let mut s = String::new();
    let verdict = if report.observable() {
        "OBSERVABLE"
    } else {
        "NOT OBSERVABLE"
    };
    let _ = writeln!(s, "verdict: {verdict}");
    let _ = writeln!(
        s,
        "arrays N = {}, emissions K = {}",
        report.n_arrays, report.n_steps
    );
    let _ = writeln!(
        s,
        "rank(J) = {} of {} (deficit {}); rank(F) = {}; rank(F-bar') = {}",
        report.rank_j,
        report.g2,
        report.g2 - report.rank_j,
        report.rank_f,
        report.rank_fbar_prime
    );
    let _ = writeln!(s, "rank(T-bar) = {}", report.block_ranks.tbar);
    for (i, r) in &report.block_ranks.lbar {
        let _ = writeln!(s, "rank(L-bar_{i}) = {r}");
    }
    if report.necessary.is_empty() {
        let _ = writeln!(s, "necessary conditions: all hold");
    } else {
        let _ = writeln!(s, "necessary conditions violated:");
        for v in &report.necessary {
            let _ = writeln!(s, "  [{}] {}", v.code(), v.describe());
        }
    }
    match report.sufficient.witness {
        Some(j) => {
            let _ = writeln!(s, "sufficient condition: holds with j = {j}");
        }
        None => {
            let _ = writeln!(s, "sufficient condition: not met");
        }
    }
    for c in &report.sufficient.candidates {
        let _ = writeln!(
            s,
            "  j = {}: rank(M_jT) = {} of 11, other L-bar blocks full rank: {}",
            c.j, c.rank_mjt, c.other_lbar_full
        );
    }
    if report.degenerate.is_empty() {
        let _ = writeln!(s, "degenerate configurations: none detected");
    } else {
        let _ = writeln!(s, "degenerate configurations:");
        for d in &report.degenerate {
            let _ = writeln!(
                s,
                "  [{}] {} (affects {})",
                d.code(),
                d.describe(),
                d.affected_block()
            );
        }
    }
    s
}

#[derive(Serialize)]
struct VerdictFile {
    observable: bool,
    n_arrays: usize,
    n_steps: usize,
    rank_j: usize,
    g2: usize,
    rank_f: usize,
    rank_fbar_prime: usize,
    rank_tbar: usize,
    necessary_ok: bool,
    sufficient: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    sufficient_witness: Option<usize>,
    lbar: Vec<LbarEntry>,
    candidates: Vec<CandidateEntry>,
    violations: Vec<Finding>,
    degenerate: Vec<Finding>,
}

#[derive(Serialize)]
struct LbarEntry {
    array: usize,
    rank: usize,
}

#[derive(Serialize)]
struct CandidateEntry {
    j: usize,
    rank_mjt: usize,
    other_lbar_full: bool,
}

#[derive(Serialize)]
struct Finding {
    code: String,
    detail: String,
}

/// Machine-readable verdict (TOML).
pub fn check_toml(report: &CheckReport) -> String {
    let v = VerdictFile {
        observable: report.observable(),
        n_arrays: report.n_arrays,
        n_steps: report.n_steps,
        rank_j: report.rank_j,
        g2: report.g2,
        rank_f: report.rank_f,
        rank_fbar_prime: report.rank_fbar_prime,
        rank_tbar: report.block_ranks.tbar,
        necessary_ok: report.necessary.is_empty(),
        sufficient: report.sufficient.sufficient(),
        sufficient_witness: report.sufficient.witness,
        lbar: report
            .block_ranks
            .lbar
            .iter()
            .map(|&(array, rank)| LbarEntry { array, rank })
            .collect(),
        candidates: report
            .sufficient
            .candidates
            .iter()
            .map(|c| CandidateEntry {
                j: c.j,
                rank_mjt: c.rank_mjt,
                other_lbar_full: c.other_lbar_full,
            })
            .collect(),
        violations: report
            .necessary
            .iter()
            .map(|v| Finding {
                code: v.code().into(),
                detail: v.describe(),
            })
            .collect(),
        degenerate: report
            .degenerate
            .iter()
            .map(|d| Finding {
                code: d.code().into(),
                detail: d.describe(),
            })
            .collect(),
    };
    toml::to_string(&v).expect("verdict serializes")
}

fn convergence_csv(history: &[calibrate::IterationRecord]) -> String {
    let mut buf = Vec::new();
    io::write_csv(
        &mut buf,
        Some(&["iteration", "cost", "damping", "gradient_norm"]),
        history.iter().map(|h| {
            vec![
                h.iteration.to_string(),
                io::fmt_f64(h.cost),
                io::fmt_f64(h.damping),
                io::fmt_f64(h.gradient_norm),
            ]
        }),
    )
    .expect("writing to memory");
    String::from_utf8(buf).expect("utf-8")
}

fn singular_values_csv(sv: &[f64]) -> String {
    let mut buf = Vec::new();
    io::write_csv(
        &mut buf,
        Some(&["index", "singular_value"]),
        sv.iter()
            .enumerate()
            .map(|(i, v)| vec![(i + 1).to_string(), io::fmt_f64(*v)]),
    )
    .expect("writing to memory");
    String::from_utf8(buf).expect("utf-8")
}

pub fn run_simulate(
    cli: &Cli,
    args: &ScenarioArgs,
    noise_free: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let mut run = Run::new(cli, "simulate");
    let file = load_input(&mut run, args)?;
    run.flag("noise_free", noise_free);
    run.preflight(&["measurements.toml"])?;
    let meas = if noise_free {
        scenario::ideal_measurements(&file.scenario)
    } else {
        let nm = file.noise_model().map_err(input_error)?;
        scenario::synthesize(&file.scenario, &nm)
    }
    .map_err(runtime)?;
    run.write(
        "measurements.toml",
        io::measurements_to_toml(&meas).as_bytes(),
    )?;
    run.finish()
}

pub fn run_rank_trace(
    cli: &Cli,
    args: &ScenarioArgs,
) -> Result<(Vec<PathBuf>, RankReport), CliError> {
    let mut run = Run::new(cli, "rank-trace");
    let file = load_input(&mut run, args)?;
    run.preflight(&["rank_trace.csv"])?;
    let report = observability::rank_trace(&file.scenario, &rank_policy(cli)?).map_err(runtime)?;
    run.write("rank_trace.csv", rank_trace_csv(&report).as_bytes())?;
    Ok((run.finish()?, report))
}

pub fn run_check(cli: &Cli, args: &ScenarioArgs) -> Result<(Vec<PathBuf>, CheckReport), CliError> {
    let mut run = Run::new(cli, "check");
    let file = load_input(&mut run, args)?;
    run.preflight(&["check_report.txt", "verdict.toml"])?;
    let report = observability::check(&file.scenario, &rank_policy(cli)?).map_err(runtime)?;
    run.write("check_report.txt", check_text(&report).as_bytes())?;
    run.write("verdict.toml", check_toml(&report).as_bytes())?;
    Ok((run.finish()?, report))
}

pub struct CalibrateArgs<'a> {
    pub scenario: &'a ScenarioArgs,
    pub measurements: Option<&'a Path>,
    pub init: InitKind,
    pub init_file: Option<&'a Path>,
    pub init_seed: u64,
    pub start: Vector3<f64>,
    pub solver: &'a SolverArgs,
}

/// Writes the estimate and logs even when the solver fails; the failure is
/// then reported as a runtime error after the files are on disk.
pub fn run_calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<(Vec<PathBuf>, String), CliError> {
    let mut run = Run::new(cli, "calibrate");
    let file = load_input(&mut run, a.scenario)?;
    let sc = &file.scenario;
    let nm = file.noise_model().map_err(input_error)?;
    let meas = match a.measurements {
        Some(p) => {
            let text = io::read_text(p).map_err(input_error)?;
            run.input(&file_label(p), text.as_bytes());
            io::parse_measurements(&text, &p.display().to_string()).map_err(input_error)?
        }
        None => scenario::synthesize(sc, &nm).map_err(runtime)?,
    };
    let strategy = match a.init {
        InitKind::Perturbed => {
            run.flag("init_seed", a.init_seed);
            InitStrategy::TruthPerturbed {
                truth: StateVector::from_scenario(sc),
                bounds: PerturbationBounds::default(),
                seed: a.init_seed,
            }
        }
        InitKind::DeadReckoning => {
            run.flag(
                "start",
                format!("{},{},{}", a.start.x, a.start.y, a.start.z),
            );
            InitStrategy::DeadReckoning { start: a.start }
        }
        InitKind::File => {
            let p = a
                .init_file
                .ok_or_else(|| CliError::Usage("--init file needs --init-file".into()))?;
            let text = io::read_text(p).map_err(input_error)?;
            run.input(&file_label(p), text.as_bytes());
            InitStrategy::Given(
                io::parse_state(&text, &p.display().to_string()).map_err(input_error)?,
            )
        }
    };
    run.flag("init", format!("{:?}", a.init).to_lowercase());
    let options = SolverOptions {
        gtol: a.solver.gtol,
        xtol: a.solver.xtol,
        max_iterations: a.solver.max_iter,
        initial_damping: a.solver.initial_damping,
        rank_policy: rank_policy(cli)?,
        ..SolverOptions::default()
    };
    run.flag("gtol", io::fmt_f64(options.gtol));
    run.flag("xtol", io::fmt_f64(options.xtol));
    run.flag("max_iter", options.max_iterations);
    run.flag("initial_damping", io::fmt_f64(options.initial_damping));
    run.preflight(&[
        "estimate.toml",
        "convergence.csv",
        "covariance.csv",
        "null_space.csv",
    ])?;

    let init = calibrate::initial_guess_builder(&meas, &strategy).map_err(input_error)?;
    let prob = CalibrationProblem::for_scenario(sc, meas, nm, init).map_err(input_error)?;
    let (result, failure) = match calibrate::solve(&prob, &options) {
        Ok(r) => (r, None),
        Err(CalibrationError::Model(e)) => return Err(runtime(e)),
        Err(e) => {
            let msg = e.to_string();
            match e {
                CalibrationError::NonConvergence(r)
                | CalibrationError::SingularNormalEquations(r) => (*r, Some(msg)),
                CalibrationError::Model(_) => unreachable!("handled above"),
            }
        }
    };
    run.write(
        "estimate.toml",
        io::state_to_toml(&result.estimate).as_bytes(),
    )?;
    run.write(
        "convergence.csv",
        convergence_csv(&result.history).as_bytes(),
    )?;
    match &result.covariance {
        Some(c) => run.write("covariance.csv", io::matrix_to_csv(c).as_bytes())?,
        None => {
            let bundle =
                jacobian::assemble_at(&result.estimate, sc.dt(), sc.c()).map_err(runtime)?;
            if let Covariance::Singular { null_space, .. } =
                calibrate::covariance_from_bundle(&bundle, prob.noise(), &options.rank_policy)
                    .map_err(runtime)?
            {
                run.write("null_space.csv", io::matrix_to_csv(&null_space).as_bytes())?;
            }
        }
    }
    let files = run.finish()?;
    match failure {
        None => Ok((
            files,
            format!(
                "converged after {} iterations, cost {}",
                result.iterations,
                io::fmt_f64(result.final_cost)
            ),
        )),
        Some(msg) => Err(CliError::Runtime(format!(
            "{msg} (best iterate written to {})",
            files[0].display()
        ))),
    }
}

pub struct CrlbArgs<'a> {
    pub scenario: &'a ScenarioArgs,
    pub dump_jacobian: bool,
    pub dump_fim: bool,
    pub dump_singular_values: bool,
}

pub fn run_crlb(cli: &Cli, a: &CrlbArgs) -> Result<(Vec<PathBuf>, Covariance), CliError> {
    let mut run = Run::new(cli, "crlb");
    let file = load_input(&mut run, a.scenario)?;
    let policy = rank_policy(cli)?;
    let nm = file.noise_model().map_err(input_error)?;
    run.flag("dump_jacobian", a.dump_jacobian);
    run.flag("dump_fim", a.dump_fim);
    run.flag("dump_singular_values", a.dump_singular_values);
    run.preflight(&[
        "covariance.csv",
        "null_space.csv",
        "jacobian.csv",
        "fim.csv",
        "singular_values.csv",
    ])?;
    let bundle = jacobian::assemble(&file.scenario).map_err(runtime)?;
    let cov = calibrate::covariance_from_bundle(&bundle, &nm, &policy).map_err(runtime)?;
    match &cov {
        Covariance::Full(c) => run.write("covariance.csv", io::matrix_to_csv(c).as_bytes())?,
        Covariance::Singular { null_space, .. } => {
            run.write("null_space.csv", io::matrix_to_csv(null_space).as_bytes())?
        }
    }
    if a.dump_jacobian {
        run.write("jacobian.csv", io::matrix_to_csv(&bundle.j).as_bytes())?;
    }
    if a.dump_fim {
        let f: DMatrix<f64> = jacobian::fim(&bundle, &nm).map_err(runtime)?;
        run.write("fim.csv", io::matrix_to_csv(&f).as_bytes())?;
    }
    if a.dump_singular_values {
        run.write(
            "singular_values.csv",
            singular_values_csv(&linalg::singular_values(&bundle.j)).as_bytes(),
        )?;
    }
    Ok((run.finish()?, cov))
}

/// A bundled scenario's name and its rank trace.
pub type NamedTrace = (String, RankReport);

pub fn run_repro_fig(
    cli: &Cli,
    figure: Figure,
) -> Result<(Vec<PathBuf>, Vec<NamedTrace>), CliError> {
    let mut run = Run::new(cli, "repro-fig");
    run.flag("figure", figure.name());
    let names: Vec<String> = figure
        .scenarios()
        .iter()
        .map(|n| format!("{n}.csv"))
        .collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    run.preflight(&name_refs)?;
    let policy = rank_policy(cli)?;
    let mut reports = Vec::new();
    for name in figure.scenarios() {
        let text = bundled_scenario(name).expect("figure scenarios are bundled");
        run.input(&format!("bundled:{name}"), text.as_bytes());
        let file = load_bundled(name).map_err(runtime)?;
        let report = observability::rank_trace(&file.scenario, &policy).map_err(runtime)?;
        run.write(&format!("{name}.csv"), rank_trace_csv(&report).as_bytes())?;
        reports.push((name.to_string(), report));
    }
    Ok((run.finish()?, reports))
}

/// Dispatch a parsed command line; returns text for stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let mut out = String::new();
    let list = |out: &mut String, files: &[PathBuf]| {
        for f in files {
            let _ = writeln!(out, "wrote {}", f.display());
        }
    };
    match &cli.command {
        Command::Simulate {
            scenario,
            noise_free,
        } => {
            let files = run_simulate(cli, scenario, *noise_free)?;
            list(&mut out, &files);
        }
        Command::RankTrace { scenario } => {
            let (files, report) = run_rank_trace(cli, scenario)?;
            let last = report.final_row();
            let _ = writeln!(
                out,
                "final rank {} of {} (deficit {}); first full-rank step: {}",
                last.rank,
                last.g2,
                last.deficit(),
                report
                    .first_full_rank
                    .map_or_else(|| "never".to_string(), |k| k.to_string())
            );
            list(&mut out, &files);
        }
        Command::Check { scenario } => {
            let (files, report) = run_check(cli, scenario)?;
            out.push_str(&check_text(&report));
            list(&mut out, &files);
        }
        Command::Calibrate {
            scenario,
            measurements,
            init,
            init_file,
            init_seed,
            start,
            solver,
        } => {
            let (files, summary) = run_calibrate(
                cli,
                &CalibrateArgs {
                    scenario,
                    measurements: measurements.as_deref(),
                    init: *init,
                    init_file: init_file.as_deref(),
                    init_seed: *init_seed,
                    start: *start,
                    solver,
                },
            )?;
            let _ = writeln!(out, "{summary}");
            list(&mut out, &files);
        }
        Command::Crlb {
            scenario,
            dump_jacobian,
            dump_fim,
            dump_singular_values,
        } => {
            let (files, cov) = run_crlb(
                cli,
                &CrlbArgs {
                    scenario,
                    dump_jacobian: *dump_jacobian,
                    dump_fim: *dump_fim,
                    dump_singular_values: *dump_singular_values,
                },
            )?;
            match cov {
                Covariance::Full(_) => {
                    let _ = writeln!(out, "FIM nonsingular; covariance written");
                }
                Covariance::Singular { rank, null_space } => {
                    let _ = writeln!(
                        out,
                        "FIM singular (rank {rank}, null space dimension {}); null space written",
                        null_space.ncols()
                    );
                }
            }
            list(&mut out, &files);
        }
        Command::ReproFig { figure } => {
            let (files, reports) = run_repro_fig(cli, *figure)?;
            for (name, r) in &reports {
                let last = r.final_row();
                let _ = writeln!(out, "{name}: final deficit {}", last.deficit());
            }
            list(&mut out, &files);
        }
    }
    Ok(out)
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, _) in BUNDLED_SCENARIOS {
            let f = load_bundled(name).unwrap();
            assert_eq!(f.scenario.n_arrays(), 8, "{name}");
            assert_eq!(f.scenario.n_steps(), 20, "{name}");
        }
        assert!(bundled_scenario("nope").is_none());
    }

    #[test]
    fn vec3_parser() {
        assert_eq!(parse_vec3("1, 2,3.5").unwrap(), Vector3::new(1.0, 2.0, 3.5));
        assert!(parse_vec3("1,2").is_err());
        assert!(parse_vec3("1,x,2").is_err());
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(main_with_args(["arraycal", "no-such-command"]), 1);
        assert_eq!(main_with_args(["arraycal", "check"]), 1);
    }

    #[test]
    fn trace_csv_columns() {
        let f = load_bundled("fig2_a").unwrap();
        let r = observability::rank_trace(&f.scenario.prefix(6).unwrap(), &RankPolicy::default())
            .unwrap();
        let csv = rank_trace_csv(&r);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,rank,g2,deficit,full_rank_flag"));
        assert_eq!(lines.count(), 6);
    }
}
