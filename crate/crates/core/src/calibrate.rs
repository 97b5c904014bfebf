//! Joint calibration and localization by weighted nonlinear least squares.
//!
//! Minimizes `‖m − g(x)‖²_{W⁻¹}` over the state with Levenberg-Marquardt
//! iterations on the analytic Jacobian. The FIM at the estimate gives the
//! Cramér-Rao covariance when it is nonsingular.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{wrap_pi, wrap_two_pi, ArrayParams};
use crate::jacobian::{self, JacobianBundle, StateLayout, StateVector};
use crate::linalg::RankPolicy;
use crate::observability::{self, RankReport};
use crate::scenario::{self, MeasurementSet, NoiseModel, Scenario};

/// Measurements, noise model, timing and a starting point.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    measurements: MeasurementSet,
    noise: NoiseModel,
    dt: f64,
    c: f64,
    initial_guess: StateVector,
    stacked: DVector<f64>,
}

impl CalibrationProblem {
    pub fn new(
        measurements: MeasurementSet,
        noise: NoiseModel,
        dt: f64,
        c: f64,
        initial_guess: StateVector,
    ) -> Result<Self> {
        let layout = initial_guess.layout();
        if measurements.n_arrays() != layout.n_arrays || measurements.n_steps() != layout.n_steps {
            return Err(Error::DimensionMismatch(format!(
                "measurements are for N={}, K={} but the initial guess is for N={}, K={}",
                measurements.n_arrays(),
                measurements.n_steps(),
                layout.n_arrays,
                layout.n_steps
            )));
        }
        if noise.n_arrays() != layout.n_arrays {
            return Err(Error::DimensionMismatch(format!(
                "noise model is for N={}, problem has N={}",
                noise.n_arrays(),
                layout.n_arrays
            )));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "speed of sound must be positive, got {c}"
            )));
        }
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dt must be finite and >= 0, got {dt}"
            )));
        }
        let stacked = measurements.stacked();
        Ok(Self {
            measurements,
            noise,
            dt,
            c,
            initial_guess,
            stacked,
        })
    }

    /// Problem on a scenario's timing with the given measurements and start.
    pub fn for_scenario(
        sc: &Scenario,
        measurements: MeasurementSet,
        noise: NoiseModel,
        initial_guess: StateVector,
    ) -> Result<Self> {
        Self::new(measurements, noise, sc.dt(), sc.c(), initial_guess)
    }

    pub fn layout(&self) -> StateLayout {
        self.initial_guess.layout()
    }

    pub fn measurements(&self) -> &MeasurementSet {
        &self.measurements
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn initial_guess(&self) -> &StateVector {
        &self.initial_guess
    }

    pub fn with_initial_guess(mut self, x: StateVector) -> Result<Self> {
        if x.layout() != self.layout() {
            return Err(Error::DimensionMismatch(
                "initial guess has a different layout".into(),
            ));
        }
        self.initial_guess = x;
        Ok(self)
    }
}

/// `r = m − g(x)` and `rᵀ W⁻¹ r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub r: DVector<f64>,
    pub cost: f64,
}

fn whitened_column(
    v: &DVector<f64>,
    layout: &StateLayout,
    nm: &NoiseModel,
) -> Result<DVector<f64>> {
    let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    Ok(jacobian::whiten(&m, layout, nm)?.column(0).into_owned())
}

pub fn residual(x: &StateVector, prob: &CalibrationProblem) -> Result<Residual> {
    if x.layout() != prob.layout() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries, problem needs {}",
            x.values().len(),
            prob.layout().state_dim()
        )));
    }
    let g = jacobian::observation_model(x, prob.dt, prob.c)?;
    let r = &prob.stacked - g;
    let w = whitened_column(&r, &x.layout(), &prob.noise)?;
    Ok(Residual {
        cost: w.norm_squared(),
        r,
    })
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub initial_damping: f64,
    /// Damping is multiplied by this on a rejected step and divided by it on
    /// an accepted one.
    pub damping_factor: f64,
    /// Damping above this counts as exhausted.
    pub max_damping: f64,
    /// Stop when `‖Jᵀ W⁻¹ r‖ < gtol`.
    pub gtol: f64,
    /// Stop when `‖Δx‖ < xtol · (‖x‖ + xtol)`.
    pub xtol: f64,
    pub max_iterations: usize,
    pub rank_policy: RankPolicy,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_factor: 10.0,
            max_damping: 1e16,
            gtol: 1e-10,
            xtol: 1e-12,
            max_iterations: 200,
            rank_policy: RankPolicy::default(),
        }
    }
}

/// One line of the convergence log, taken at the start of an iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub damping: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    DampingExhausted,
}

/// FIM inverse, or the null space that prevents it.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Singular {
        rank: usize,
        null_space: DMatrix<f64>,
    },
}

impl Covariance {
    pub fn full(&self) -> Option<&DMatrix<f64>> {
        match self {
            Covariance::Full(c) => Some(c),
            Covariance::Singular { .. } => None,
        }
    }

    pub fn is_singular(&self) -> bool {
        matches!(self, Covariance::Singular { .. })
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub estimate: StateVector,
    pub final_cost: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// CRLB at the estimate; `None` when the FIM is singular.
    pub covariance: Option<DMatrix<f64>>,
    pub rank_report: RankReport,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("no convergence after {} iterations (cost {:.6e}, gradient norm {:.3e})", .0.iterations, .0.final_cost, .0.gradient_norm)]
    NonConvergence(Box<CalibrationResult>),

    #[error("normal equations are singular: {}", singular_detail(.0))]
    SingularNormalEquations(Box<CalibrationResult>),

    #[error(transparent)]
    Model(#[from] Error),
}

fn singular_detail(res: &CalibrationResult) -> String {
    let row = res.rank_report.final_row();
    let mut s = format!(
        "rank(J) = {} of {} (deficit {})",
        row.rank,
        row.g2,
        row.deficit()
    );
    for c in &res.rank_report.degenerate {
        s.push_str("; ");
        s.push_str(&c.describe());
    }
    for v in &res.rank_report.necessary {
        s.push_str("; ");
        s.push_str(&v.describe());
    }
    s
}

impl CalibrationError {
    /// The best iterate, when the solver got that far.
    pub fn result(&self) -> Option<&CalibrationResult> {
        match self {
            CalibrationError::NonConvergence(r) | CalibrationError::SingularNormalEquations(r) => {
                Some(r)
            }
            CalibrationError::Model(_) => None,
        }
    }
}

/// Wrap `θx, θz` into `[0, 2π)` and `θy` into `(−π, π]`.
pub fn normalize_angles(x: &mut StateVector) {
    let layout = x.layout();
    for i in 2..=layout.n_arrays {
        let o = layout.array_offset(i) + 3;
        let v = x.values_mut();
        v[o] = wrap_two_pi(v[o]);
        v[o + 1] = wrap_pi(v[o + 1]);
        v[o + 2] = wrap_two_pi(v[o + 2]);
    }
}

/// Difference `a − b` with angle entries reduced into `(−π, π]`.
pub fn state_difference(a: &StateVector, b: &StateVector) -> DVector<f64> {
    let layout = a.layout();
    let mut d = a.values() - b.values();
    for i in 2..=layout.n_arrays {
        let o = layout.array_offset(i) + 3;
        for a in 0..3 {
            d[o + a] = wrap_pi(d[o + a]);
        }
    }
    d
}

struct Linearization {
    bundle: JacobianBundle,
    gradient: DVector<f64>,
    /// Column norms of the whitened Jacobian (1 for zero columns).
    scale: DVector<f64>,
    /// Thin SVD of the column-scaled whitened Jacobian: `σ`, `V`, `Uᵀ r_w`.
    sigma: DVector<f64>,
    v: DMatrix<f64>,
    ut_r: DVector<f64>,
}

fn linearize(x: &StateVector, res: &Residual, prob: &CalibrationProblem) -> Result<Linearization> {
    let bundle = jacobian::assemble_at(x, prob.dt, prob.c)?;
    let layout = x.layout();
    let jw = jacobian::whiten(&bundle.j, &layout, &prob.noise)?;
    let rw = whitened_column(&res.r, &layout, &prob.noise)?;
    let gradient = jw.transpose() * &rw;
    let scale = DVector::from_fn(jw.ncols(), |j, _| {
        let n = jw.column(j).norm();
        if n > 0.0 {
            n
        } else {
            1.0
        }
    });
    let mut js = jw;
    for (j, mut col) in js.column_iter_mut().enumerate() {
        col /= scale[j];
    }
    let svd = js.svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V").transpose();
    Ok(Linearization {
        bundle,
        gradient,
        scale,
        ut_r: u.transpose() * rw,
        sigma: svd.singular_values,
        v,
    })
}

/// Levenberg-Marquardt step with Marquardt scaling `D = diag(Jᵀ W⁻¹ J)`.
///
/// In the column-scaled variables `D = I`, so the damped solution is
/// `Σ v_i σ_i/(σ_i² + λ) (u_iᵀ r_w)`, mapped back through the scaling.
/// Working from the SVD avoids forming the normal equations, whose
/// condition number is the square of the Jacobian's.
fn damped_step(lin: &Linearization, lambda: f64) -> Option<DVector<f64>> {
    let coeffs = DVector::from_fn(lin.sigma.len(), |i, _| {
        let s = lin.sigma[i];
        let den = s * s + lambda;
        if den > 0.0 {
            s / den * lin.ut_r[i]
        } else {
            0.0
        }
    });
    let step = (&lin.v * coeffs).component_div(&lin.scale);
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Levenberg-Marquardt from the problem's initial guess.
///
/// Returns `Ok` when a tolerance is met and `J` has full column rank at the
/// estimate. Exhausting the iteration budget gives `NonConvergence`; damping
/// escalation without an acceptable step, or a rank-deficient `J` at the
/// end, gives `SingularNormalEquations`. Both carry the best iterate.
pub fn solve(
    prob: &CalibrationProblem,
    options: &SolverOptions,
) -> std::result::Result<CalibrationResult, CalibrationError> {
    let mut x = prob.initial_guess.clone();
    normalize_angles(&mut x);
    let mut res = residual(&x, prob)?;
    let mut lambda = options.initial_damping;
    let mut history = Vec::new();
    let mut lin = linearize(&x, &res, prob)?;
    let mut iterations = 0;

    let stop = loop {
        let gnorm = lin.gradient.norm();
        history.push(IterationRecord {
            iteration: iterations,
            cost: res.cost,
            damping: lambda,
            gradient_norm: gnorm,
        });
        if gnorm < options.gtol {
            break StopReason::GradientTolerance;
        }
        if iterations >= options.max_iterations {
            break StopReason::MaxIterations;
        }
        iterations += 1;

        let xnorm = x.values().norm();
        let mut outcome = None;
        while lambda <= options.max_damping {
            let Some(step) = damped_step(&lin, lambda) else {
                lambda *= options.damping_factor;
                continue;
            };
            let small = step.norm() < options.xtol * (xnorm + options.xtol);
            let mut trial = x.clone();
            *trial.values_mut() += &step;
            normalize_angles(&mut trial);
            // a trial that puts a source on an array is simply rejected
            match residual(&trial, prob) {
                Ok(tres) if tres.cost <= res.cost => {
                    outcome = Some((trial, tres, small));
                    break;
                }
                _ if small => {
                    outcome = Some((x.clone(), res.clone(), true));
                    break;
                }
                _ => lambda *= options.damping_factor,
            }
        }
        let Some((nx, nres, small)) = outcome else {
            break StopReason::DampingExhausted;
        };
        lambda = (lambda / options.damping_factor).max(f64::MIN_POSITIVE);
        let moved = nx != x;
        x = nx;
        res = nres;
        if moved {
            lin = linearize(&x, &res, prob)?;
        }
        if small {
            let gnorm = lin.gradient.norm();
            history.push(IterationRecord {
                iteration: iterations,
                cost: res.cost,
                damping: lambda,
                gradient_norm: gnorm,
            });
            break StopReason::StepTolerance;
        }
    };

    let rank_report = observability::rank_trace_at(&x, prob.dt, prob.c, &options.rank_policy)?;
    let covariance = match covariance_from_bundle(&lin.bundle, &prob.noise, &options.rank_policy)? {
        Covariance::Full(c) => Some(c),
        Covariance::Singular { .. } => None,
    };
    let converged = matches!(
        stop,
        StopReason::GradientTolerance | StopReason::StepTolerance
    );
    let result = CalibrationResult {
        estimate: x,
        final_cost: res.cost,
        gradient_norm: lin.gradient.norm(),
        iterations,
        converged,
        stop_reason: stop,
        covariance,
        rank_report,
        history,
    };
    let full_rank = result.rank_report.full_column_rank();
    match stop {
        StopReason::DampingExhausted => {
            Err(CalibrationError::SingularNormalEquations(Box::new(result)))
        }
        _ if !full_rank => Err(CalibrationError::SingularNormalEquations(Box::new(result))),
        StopReason::MaxIterations => Err(CalibrationError::NonConvergence(Box::new(result))),
        _ => Ok(result),
    }
}

/// CRLB from an assembled Jacobian.
///
/// Works on the column-scaled square-root factor of the FIM, so the inverse
/// is `S⁻¹ V Σ⁻² Vᵀ S⁻¹` and null directions are `S⁻¹ v_i` for the
/// singular values under the rank threshold.
pub fn covariance_from_bundle(
    bundle: &JacobianBundle,
    nm: &NoiseModel,
    policy: &RankPolicy,
) -> Result<Covariance> {
    let f = jacobian::fim_factor(bundle, nm)?;
    let n = f.v.ncols();
    let t = f.threshold(policy);
    let rank = f.rank(policy);
    if rank == n {
        let w =
            f.v.map_with_location(|i, j, v| v / (f.scale[i] * f.sigma[j]));
        let cov = &w * w.transpose();
        return Ok(Covariance::Full((&cov + cov.transpose()) * 0.5));
    }
    let mut weak: Vec<usize> = (0..n).filter(|&i| f.sigma[i] <= t).collect();
    weak.sort_by(|&a, &b| f.sigma[a].total_cmp(&f.sigma[b]));
    let cols: Vec<DVector<f64>> = weak
        .iter()
        .map(|&i| f.v.column(i).component_div(&f.scale).normalize())
        .collect();
    Ok(Covariance::Singular {
        rank,
        null_space: DMatrix::from_columns(&cols),
    })
}

/// CRLB at a scenario's ground truth.
pub fn covariance_from_fim(
    sc: &Scenario,
    nm: &NoiseModel,
    policy: &RankPolicy,
) -> Result<Covariance> {
    covariance_from_bundle(&jacobian::assemble(sc)?, nm, policy)
}

/// Half-widths of the uniform perturbation used by
/// [`InitStrategy::TruthPerturbed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationBounds {
    /// Metres; applied to array and source positions.
    pub position: f64,
    pub angle: f64,
    pub tau: f64,
    pub delta: f64,
}

impl Default for PerturbationBounds {
    fn default() -> Self {
        Self {
            position: 0.2,
            angle: 0.1,
            tau: 0.02,
            delta: 2e-5,
        }
    }
}

impl PerturbationBounds {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            angle: 0.0,
            tau: 0.0,
            delta: 0.0,
        }
    }
}

/// How to pick the solver's starting point.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Ground truth plus seeded uniform noise. Only meaningful on synthetic
    /// data.
    TruthPerturbed {
        truth: StateVector,
        bounds: PerturbationBounds,
        seed: u64,
    },
    /// Zero extrinsics for every array; sources integrated from odometry
    /// starting at `start`.
    DeadReckoning { start: Vector3<f64> },
    /// A state read from elsewhere, used as is.
    Given(StateVector),
}

fn symmetric(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

pub fn initial_guess_builder(
    measurements: &MeasurementSet,
    strategy: &InitStrategy,
) -> Result<StateVector> {
    let layout = StateLayout::new(measurements.n_arrays(), measurements.n_steps());
    match strategy {
        InitStrategy::TruthPerturbed {
            truth,
            bounds,
            seed,
        } => {
            if truth.layout() != layout {
                return Err(Error::DimensionMismatch(
                    "ground truth does not match the measurements".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let arrays: Vec<ArrayParams> = truth
                .arrays()
                .into_iter()
                .map(|a| ArrayParams {
                    position: a.position.map(|v| v + symmetric(&mut rng, bounds.position)),
                    angles: a.angles.map(|v| v + symmetric(&mut rng, bounds.angle)),
                    tau: a.tau + symmetric(&mut rng, bounds.tau),
                    delta: a.delta + symmetric(&mut rng, bounds.delta),
                })
                .collect();
            let sources: Vec<Vector3<f64>> = truth
                .sources()
                .into_iter()
                .map(|s| s.map(|v| v + symmetric(&mut rng, bounds.position)))
                .collect();
            let mut x = StateVector::from_parts(&arrays, &sources);
            normalize_angles(&mut x);
            Ok(x)
        }
        InitStrategy::DeadReckoning { start } => {
            let arrays = vec![
                ArrayParams {
                    position: Vector3::zeros(),
                    angles: [0.0; 3],
                    tau: 0.0,
                    delta: 0.0,
                };
                layout.n_arrays - 1
            ];
            let mut sources = Vec::with_capacity(layout.n_steps);
            let mut s = *start;
            sources.push(s);
            for d in measurements.odometry() {
                s += d;
                sources.push(s);
            }
            Ok(StateVector::from_parts(&arrays, &sources))
        }
        InitStrategy::Given(x) => {
            if x.layout() != layout {
                return Err(Error::DimensionMismatch(format!(
                    "given state is for N={}, K={}; measurements are for N={}, K={}",
                    x.layout().n_arrays,
                    x.layout().n_steps,
                    layout.n_arrays,
                    layout.n_steps
                )));
            }
            Ok(x.clone())
        }
    }
}

/// Per-parameter statistics of repeated noisy calibrations.
#[derive(Debug, Clone)]
pub struct MonteCarloSummary {
    pub runs: usize,
    /// Mean of `estimate − truth`.
    pub mean_error: DVector<f64>,
    /// Sample standard deviation of the estimates.
    pub std: DVector<f64>,
    /// Square root of the CRLB diagonal at the truth.
    pub crlb_std: DVector<f64>,
    /// Runs that did not return `Ok`.
    pub failures: usize,
}

/// Calibrate `runs` noisy realizations of a scenario, realization `r` using
/// seed `scenario.seed() + r` and starting from the truth.
pub fn monte_carlo(
    sc: &Scenario,
    nm: &NoiseModel,
    runs: usize,
    options: &SolverOptions,
) -> Result<MonteCarloSummary> {
    let truth = StateVector::from_scenario(sc);
    let crlb = covariance_from_fim(sc, nm, &options.rank_policy)?;
    let Some(cov) = crlb.full() else {
        return Err(Error::InvalidConfig(
            "the FIM is singular at the truth; no CRLB to compare against".into(),
        ));
    };
    let n = truth.values().len();
    let run = |r: usize| -> Result<Option<DVector<f64>>> {
        let real = sc.clone().with_seed(sc.seed().wrapping_add(r as u64));
        let meas = scenario::synthesize(&real, nm)?;
        let prob = CalibrationProblem::for_scenario(sc, meas, nm.clone(), truth.clone())?;
        match solve(&prob, options) {
            Ok(res) => Ok(Some(state_difference(&res.estimate, &truth))),
            Err(CalibrationError::Model(e)) => Err(e),
            Err(_) => Ok(None),
        }
    };
    // realizations are independent; results are gathered in index order so
    // the summary does not depend on the thread count
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(runs.max(1));
    let outcomes: Vec<Result<Option<DVector<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run = &run;
                scope.spawn(move || {
                    (w..runs)
                        .step_by(workers)
                        .map(|r| (r, run(r)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<(usize, Result<Option<DVector<f64>>>)> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("Monte-Carlo worker panicked"))
            .collect();
        all.sort_by_key(|(r, _)| *r);
        all.into_iter().map(|(_, o)| o).collect()
    });
    let mut errors: Vec<DVector<f64>> = Vec::with_capacity(runs);
    let mut failures = 0;
    for o in outcomes {
        match o? {
            Some(e) => errors.push(e),
            None => failures += 1,
        }
    }
    let m = errors.len().max(1) as f64;
    let mean = errors.iter().fold(DVector::zeros(n), |acc, e| acc + e) / m;
    let var = errors
        .iter()
        .fold(DVector::zeros(n), |acc: DVector<f64>, e| {
            acc + (e - &mean).map(|v| v * v)
        })
        / (m - 1.0).max(1.0);
    Ok(MonteCarloSummary {
        runs,
        mean_error: mean,
        std: var.map(f64::sqrt),
        crlb_std: DVector::from_fn(n, |i, _| cov[(i, i)].sqrt()),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::scenario::{
        gen_collinear_origin, gen_observable_trajectory, random_extrinsics, ExtrinsicsBounds,
        NoiseSigmas, ObservableTrajectory,
    };

    fn world(n: usize, k: usize, seed: u64) -> Scenario {
        let traj = gen_observable_trajectory(&ObservableTrajectory {
            steps: k,
            ..Default::default()
        })
        .unwrap();
        let arrays = random_extrinsics(n, &ExtrinsicsBounds::default(), seed).unwrap();
        Scenario::new(arrays, traj, 1.0, 343.0, seed).unwrap()
    }

    fn noise(n: usize) -> NoiseModel {
        NoiseModel::diagonal(n, &NoiseSigmas::default()).unwrap()
    }

    fn noise_free_problem(sc: &Scenario, init: StateVector) -> CalibrationProblem {
        let meas = scenario::ideal_measurements(sc).unwrap();
        CalibrationProblem::for_scenario(sc, meas, noise(sc.n_arrays()), init).unwrap()
    }

    #[test]
    fn residual_zero_at_truth() {
        let sc = world(3, 8, 1);
        let truth = StateVector::from_scenario(&sc);
        let prob = noise_free_problem(&sc, truth.clone());
        let r = residual(&truth, &prob).unwrap();
        assert_eq!(r.r.len(), prob.layout().observation_dim());
        assert!(r.cost < 1e-20, "{}", r.cost);
    }

    #[test]
    fn residual_cost_scales_inversely_with_w() {
        let sc = world(3, 6, 2);
        let meas = scenario::synthesize(&sc, &noise(3)).unwrap();
        let truth = StateVector::from_scenario(&sc);
        let p1 =
            CalibrationProblem::for_scenario(&sc, meas.clone(), noise(3), truth.clone()).unwrap();
        let p2 = CalibrationProblem::for_scenario(
            &sc,
            meas,
            noise(3).scaled(4.0).unwrap(),
            truth.clone(),
        )
        .unwrap();
        let c1 = residual(&truth, &p1).unwrap().cost;
        let c2 = residual(&truth, &p2).unwrap().cost;
        assert!((c2 - c1 / 4.0).abs() < 1e-12 * c1);
    }

    #[test]
    fn tau_shift_moves_tdoa_residuals() {
        let sc = world(3, 5, 3);
        let truth = StateVector::from_scenario(&sc);
        let prob = noise_free_problem(&sc, truth.clone());
        let mut x = truth.clone();
        let layout = x.layout();
        let eps = 1e-3;
        x.values_mut()[layout.array_offset(3) + 6] += eps;
        let r0 = residual(&truth, &prob).unwrap().r;
        let r1 = residual(&x, &prob).unwrap().r;
        for k in 1..=5 {
            let row = layout.measurement_row(k);
            assert!((r1[row + 4] - r0[row + 4] + eps).abs() < 1e-12);
            assert!((r1[row] - r0[row]).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_rejects_layout_mismatch_and_coincidence() {
        let sc = world(3, 5, 4);
        let prob = noise_free_problem(&sc, StateVector::from_scenario(&sc));
        let other = StateVector::from_scenario(&world(3, 6, 4));
        assert!(matches!(
            residual(&other, &prob),
            Err(Error::DimensionMismatch(_))
        ));
        let mut x = StateVector::from_scenario(&sc);
        let p2 = x.array(2).position;
        let o = x.layout().source_offset(3);
        x.values_mut().fixed_rows_mut::<3>(o).copy_from(&p2);
        assert!(matches!(
            residual(&x, &prob),
            Err(Error::DegenerateGeometry { step: Some(3), .. })
        ));
    }

    #[test]
    fn fixed_point_at_truth() {
        let sc = world(3, 10, 5);
        let prob = noise_free_problem(&sc, StateVector::from_scenario(&sc));
        let res = solve(&prob, &SolverOptions::default()).unwrap();
        assert!(res.iterations <= 2);
        assert!(res.final_cost < 1e-18);
        assert!(res.converged);
        assert!(res.covariance.is_some());
    }

    #[test]
    fn round_trip_small() {
        let sc = world(3, 12, 6);
        let truth = StateVector::from_scenario(&sc);
        let meas = scenario::ideal_measurements(&sc).unwrap();
        let init = initial_guess_builder(
            &meas,
            &InitStrategy::TruthPerturbed {
                truth: truth.clone(),
                bounds: PerturbationBounds::default(),
                seed: 1,
            },
        )
        .unwrap();
        let prob = CalibrationProblem::for_scenario(&sc, meas, noise(3), init).unwrap();
        let res = solve(&prob, &SolverOptions::default()).unwrap();
        let err = state_difference(&res.estimate, &truth).amax();
        assert!(err < 1e-6, "max error {err}");
        for w in res.history.windows(2) {
            assert!(w[1].cost <= w[0].cost);
        }
    }

    #[test]
    fn collinear_scenario_reports_deficiency() {
        let arrays = random_extrinsics(3, &ExtrinsicsBounds::default(), 7).unwrap();
        let traj = gen_collinear_origin(8, &Vector3::new(0.1, 0.07, 0.05)).unwrap();
        let sc = Scenario::new(arrays, traj, 1.0, 343.0, 0).unwrap();
        let truth = StateVector::from_scenario(&sc);
        let meas = scenario::ideal_measurements(&sc).unwrap();
        let init = initial_guess_builder(
            &meas,
            &InitStrategy::TruthPerturbed {
                truth,
                bounds: PerturbationBounds {
                    position: 0.05,
                    angle: 0.02,
                    tau: 1e-3,
                    delta: 1e-6,
                },
                seed: 2,
            },
        )
        .unwrap();
        let prob = CalibrationProblem::for_scenario(&sc, meas, noise(3), init).unwrap();
        match solve(&prob, &SolverOptions::default()) {
            Err(CalibrationError::SingularNormalEquations(r))
            | Err(CalibrationError::NonConvergence(r)) => {
                assert!(!r.rank_report.full_column_rank());
                assert!(r.covariance.is_none());
            }
            other => panic!("expected a deficiency error, got {other:?}"),
        }
    }

    #[test]
    fn covariance_examples() {
        let sc = world(3, 10, 8);
        let cov = covariance_from_fim(&sc, &noise(3), &RankPolicy::default()).unwrap();
        let c = cov.full().expect("observable");
        assert_eq!(c.nrows(), 8 * 2 + 30);
        assert!((0..c.nrows()).all(|i| c[(i, i)] > 0.0));

        let sc4 = world(3, 4, 8);
        let cov = covariance_from_fim(&sc4, &noise(3), &RankPolicy::default()).unwrap();
        match cov {
            Covariance::Singular { rank, null_space } => {
                assert!(rank < 8 * 2 + 12);
                let j = jacobian::assemble(&sc4).unwrap().j;
                let rel = (&j * &null_space).abs().max() / j.abs().max();
                assert!(rel < 1e-6, "{rel}");
            }
            Covariance::Full(_) => panic!("K=4 must be singular"),
        }
    }

    #[test]
    fn covariance_inverts_fim() {
        let sc = world(2, 8, 9);
        let nm = noise(2);
        let bundle = jacobian::assemble(&sc).unwrap();
        let fim = jacobian::fim(&bundle, &nm).unwrap();
        let cov = covariance_from_bundle(&bundle, &nm, &RankPolicy::default()).unwrap();
        let c = cov.full().unwrap();
        // check in equilibrated coordinates where the product is well scaled
        let (_, d) = linalg::equilibrate_symmetric(&fim);
        let prod = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| {
            (0..c.nrows()).map(|l| fim[(i, l)] * c[(l, j)]).sum::<f64>() * d[i] / d[j]
        });
        let err = (prod - DMatrix::identity(c.nrows(), c.ncols())).abs().max();
        // the equilibrated FIM still has a condition number near 1e10
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn dead_reckoning_integrates_odometry() {
        let sc = world(3, 6, 10);
        let meas = scenario::synthesize(&sc, &noise(3)).unwrap();
        let x = initial_guess_builder(
            &meas,
            &InitStrategy::DeadReckoning {
                start: Vector3::zeros(),
            },
        )
        .unwrap();
        let mut acc = Vector3::zeros();
        assert_eq!(x.source(1), acc);
        for k in 2..=6 {
            acc += meas.odometry()[k - 2];
            assert_eq!(x.source(k), acc);
        }
        assert!(x.arrays().iter().all(|a| a.to_array() == [0.0; 8]));
    }

    #[test]
    fn perturbation_strategies() {
        let sc = world(3, 6, 11);
        let meas = scenario::ideal_measurements(&sc).unwrap();
        let truth = StateVector::from_scenario(&sc);
        let zero = initial_guess_builder(
            &meas,
            &InitStrategy::TruthPerturbed {
                truth: truth.clone(),
                bounds: PerturbationBounds::zero(),
                seed: 3,
            },
        )
        .unwrap();
        assert!(state_difference(&zero, &truth).amax() < 1e-15);
        let given = initial_guess_builder(&meas, &InitStrategy::Given(truth.clone())).unwrap();
        assert_eq!(given, truth);
        let wrong = StateVector::from_scenario(&world(3, 7, 11));
        assert!(initial_guess_builder(&meas, &InitStrategy::Given(wrong)).is_err());
    }

    #[test]
    fn angles_wrapped_after_normalize() {
        let sc = world(2, 5, 12);
        let mut x = StateVector::from_scenario(&sc);
        let o = x.layout().array_offset(2) + 3;
        x.values_mut()[o] = -0.5;
        x.values_mut()[o + 1] = 4.0;
        x.values_mut()[o + 2] = 7.0;
        normalize_angles(&mut x);
        let a = x.array(2).angles;
        assert!((0.0..std::f64::consts::TAU).contains(&a[0]));
        assert!(a[1] > -std::f64::consts::PI && a[1] <= std::f64::consts::PI);
        assert!((a[2] - (7.0 - std::f64::consts::TAU)).abs() < 1e-15);
    }
}
