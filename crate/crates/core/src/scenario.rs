//! Ground-truth worlds, trajectory generators and noisy measurement synthesis.
//!
//! Measurements at step `k` are stacked as
//! `z^k = [T_21; d_21; T_31; d_31; …; T_N1; d_N1]` (4 values per non-reference
//! array), and the odometry between steps `k` and `k+1` is
//! `sΔ^k = s^{k+1} − s^k`, each with additive Gaussian noise.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{self, ArrayExtrinsics, ArrayPose, EulerAngles};
use crate::linalg;

/// Default TDOA noise standard deviation, seconds.
pub const DEFAULT_SIGMA_TDOA: f64 = 1e-4;
/// Default DOA noise standard deviation per direction component.
pub const DEFAULT_SIGMA_DOA: f64 = 0.01;
/// Default odometry noise standard deviation per axis, meters.
pub const DEFAULT_SIGMA_ODOMETRY: f64 = 1e-3;

/// Full ground-truth world: arrays (index 0 is the reference), source
/// trajectory `s^1..s^K`, emission interval, speed of sound and RNG seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    arrays: Vec<ArrayExtrinsics>,
    trajectory: Vec<Vector3<f64>>,
    dt: f64,
    c: f64,
    seed: u64,
}

impl Scenario {
    pub fn new(
        arrays: Vec<ArrayExtrinsics>,
        trajectory: Vec<Vector3<f64>>,
        dt: f64,
        c: f64,
        seed: u64,
    ) -> Result<Self> {
        if arrays.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 arrays, got {}",
                arrays.len()
            )));
        }
        if !arrays[0].is_reference() {
            return Err(Error::InvalidConfig(
                "the reference array (index 1) must have all-zero extrinsics".into(),
            ));
        }
        for (i, a) in arrays.iter().enumerate() {
            if !(a.position.iter().all(|v| v.is_finite())
                && a.tau.is_finite()
                && a.delta.is_finite())
            {
                return Err(Error::InvalidConfig(format!(
                    "array {} has non-finite fields",
                    i + 1
                )));
            }
            for (j, b) in arrays.iter().enumerate().skip(i + 1) {
                if a.position == b.position {
                    return Err(Error::InvalidConfig(format!(
                        "arrays {} and {} share the same position",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        if trajectory.is_empty() {
            return Err(Error::InvalidConfig(
                "trajectory needs at least one point".into(),
            ));
        }
        for (k, s) in trajectory.iter().enumerate() {
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "trajectory point {} is not finite",
                    k + 1
                )));
            }
            for (i, a) in arrays.iter().enumerate() {
                if *s == a.position {
                    return Err(Error::DegenerateGeometry {
                        step: Some(k + 1),
                        detail: format!("source coincides with array {}", i + 1),
                    });
                }
            }
        }
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dt must be non-negative, got {dt}"
            )));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "speed of sound must be positive, got {c}"
            )));
        }
        Ok(Self {
            arrays,
            trajectory,
            dt,
            c,
            seed,
        })
    }

    /// Number of arrays `N`, including the reference.
    pub fn n_arrays(&self) -> usize {
        self.arrays.len()
    }

    /// Number of emissions `K`.
    pub fn n_steps(&self) -> usize {
        self.trajectory.len()
    }

    pub fn arrays(&self) -> &[ArrayExtrinsics] {
        &self.arrays
    }

    /// Arrays `2..N` (everything except the reference).
    pub fn free_arrays(&self) -> &[ArrayExtrinsics] {
        &self.arrays[1..]
    }

    pub fn trajectory(&self) -> &[Vector3<f64>] {
        &self.trajectory
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_trajectory(&self, trajectory: Vec<Vector3<f64>>) -> Result<Self> {
        Scenario::new(self.arrays.clone(), trajectory, self.dt, self.c, self.seed)
    }

    /// The same world restricted to the first `k` emissions.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.n_steps() {
            return Err(Error::InvalidConfig(format!(
                "prefix length {k} outside 1..={}",
                self.n_steps()
            )));
        }
        Ok(Self {
            trajectory: self.trajectory[..k].to_vec(),
            ..self.clone()
        })
    }

    /// Number of measurement rows per step, `4(N−1)`.
    pub fn rows_per_step(&self) -> usize {
        4 * (self.n_arrays() - 1)
    }
}

/// Noise-free measurement vector `z^k` for one step.
///
/// `free_arrays` are arrays `2..N`; `k` is the 1-based step index.
pub fn ideal_measurement<A: ArrayPose>(
    free_arrays: &[A],
    source: &Vector3<f64>,
    k: usize,
    dt: f64,
    c: f64,
) -> Result<DVector<f64>> {
    let d1 = geometry::distance(source, &Vector3::zeros()).map_err(|e| e.at_step(k))?;
    let mut z = DVector::zeros(4 * free_arrays.len());
    for (j, arr) in free_arrays.iter().enumerate() {
        z[4 * j] = geometry::tdoa(arr, d1, source, k, dt, c).map_err(|e| e.at_step(k))?;
        let u = geometry::doa(arr, source).map_err(|e| e.at_step(k))?;
        z.fixed_rows_mut::<3>(4 * j + 1).copy_from(&u);
    }
    Ok(z)
}

/// Measurement covariances: `P` for each stacked TDOA/DOA vector and `Q` for
/// each odometry displacement.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    p: DMatrix<f64>,
    q: DMatrix<f64>,
    chol_p: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    chol_q: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl NoiseModel {
    /// Both covariances must be symmetric positive definite; `Q` is 3×3.
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        if q.shape() != (3, 3) {
            return Err(Error::InvalidConfig(format!(
                "Q must be 3x3, got {:?}",
                q.shape()
            )));
        }
        if p.nrows() == 0 || !p.nrows().is_multiple_of(4) {
            return Err(Error::InvalidConfig(format!(
                "P must be 4(N-1) square, got {:?}",
                p.shape()
            )));
        }
        let chol_p = linalg::cholesky(&p, "P")?;
        let chol_q = linalg::cholesky(&q, "Q")?;
        Ok(Self {
            p,
            q,
            chol_p,
            chol_q,
        })
    }

    /// `P = diag(σ_T², σ_d²·I₃, …)` over `n_arrays − 1` arrays and
    /// `Q = σ_q²·I₃`.
    pub fn diagonal(n_arrays: usize, sigmas: &NoiseSigmas) -> Result<Self> {
        if n_arrays < 2 {
            return Err(Error::InvalidConfig("need at least 2 arrays".into()));
        }
        let n = 4 * (n_arrays - 1);
        let p = DMatrix::from_fn(n, n, |i, j| {
            if i != j {
                0.0
            } else if i % 4 == 0 {
                sigmas.tdoa * sigmas.tdoa
            } else {
                sigmas.doa * sigmas.doa
            }
        });
        let q = DMatrix::identity(3, 3) * (sigmas.odometry * sigmas.odometry);
        Self::new(p, q)
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Lower Cholesky factor of `P`.
    pub fn p_factor(&self) -> DMatrix<f64> {
        self.chol_p.l()
    }

    pub fn q_factor(&self) -> DMatrix<f64> {
        self.chol_q.l()
    }

    pub(crate) fn chol_p(&self) -> &nalgebra::Cholesky<f64, nalgebra::Dyn> {
        &self.chol_p
    }

    pub(crate) fn chol_q(&self) -> &nalgebra::Cholesky<f64, nalgebra::Dyn> {
        &self.chol_q
    }

    /// Number of arrays implied by the size of `P`.
    pub fn n_arrays(&self) -> usize {
        self.p.nrows() / 4 + 1
    }

    /// A copy with both covariances multiplied by `alpha > 0`.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(&self.p * alpha, &self.q * alpha)
    }
}

/// Standard deviations for the diagonal noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSigmas {
    pub tdoa: f64,
    pub doa: f64,
    pub odometry: f64,
}

impl Default for NoiseSigmas {
    fn default() -> Self {
        Self {
            tdoa: DEFAULT_SIGMA_TDOA,
            doa: DEFAULT_SIGMA_DOA,
            odometry: DEFAULT_SIGMA_ODOMETRY,
        }
    }
}

/// Stacked TDOA/DOA measurements `y^1..y^K` and odometry `sΔ^1..sΔ^{K−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    n_arrays: usize,
    y: Vec<DVector<f64>>,
    odometry: Vec<Vector3<f64>>,
}

impl MeasurementSet {
    pub fn new(n_arrays: usize, y: Vec<DVector<f64>>, odometry: Vec<Vector3<f64>>) -> Result<Self> {
        if n_arrays < 2 {
            return Err(Error::DimensionMismatch("need at least 2 arrays".into()));
        }
        if y.is_empty() {
            return Err(Error::DimensionMismatch("need at least one step".into()));
        }
        let rows = 4 * (n_arrays - 1);
        if let Some((k, bad)) = y.iter().enumerate().find(|(_, v)| v.len() != rows) {
            return Err(Error::DimensionMismatch(format!(
                "step {} has {} values, expected {rows}",
                k + 1,
                bad.len()
            )));
        }
        if odometry.len() + 1 != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} steps need {} odometry entries, got {}",
                y.len(),
                y.len() - 1,
                odometry.len()
            )));
        }
        Ok(Self {
            n_arrays,
            y,
            odometry,
        })
    }

    pub fn n_arrays(&self) -> usize {
        self.n_arrays
    }

    pub fn n_steps(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[DVector<f64>] {
        &self.y
    }

    pub fn odometry(&self) -> &[Vector3<f64>] {
        &self.odometry
    }

    /// The combined vector `m = [y^1; sΔ^1; y^2; …; sΔ^{K−1}; y^K]`.
    pub fn stacked(&self) -> DVector<f64> {
        let rows = 4 * (self.n_arrays - 1);
        let k = self.n_steps();
        let mut m = DVector::zeros(rows * k + 3 * (k - 1));
        let mut r = 0;
        for (step, y) in self.y.iter().enumerate() {
            m.rows_mut(r, rows).copy_from(y);
            r += rows;
            if let Some(o) = self.odometry.get(step) {
                m.fixed_rows_mut::<3>(r).copy_from(o);
                r += 3;
            }
        }
        m
    }
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, factor: &DMatrix<f64>) -> DVector<f64> {
    let xi = DVector::from_fn(factor.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * xi
}

/// Noise-free measurements: every `y^k = z^k` and `sΔ^k = s^{k+1} − s^k`.
pub fn ideal_measurements(sc: &Scenario) -> Result<MeasurementSet> {
    let y = sc
        .trajectory()
        .iter()
        .enumerate()
        .map(|(i, s)| ideal_measurement(sc.free_arrays(), s, i + 1, sc.dt(), sc.c()))
        .collect::<Result<Vec<_>>>()?;
    let odometry = sc.trajectory().windows(2).map(|w| w[1] - w[0]).collect();
    MeasurementSet::new(sc.n_arrays(), y, odometry)
}

/// Draw noisy measurements from the scenario's ground truth.
///
/// Noise for `y^k` comes from RNG stream `2k` and noise for `sΔ^k` from
/// stream `2k+1` of a ChaCha8 generator keyed by the scenario seed, so the
/// output depends only on (scenario, noise model, seed).
pub fn synthesize(sc: &Scenario, nm: &NoiseModel) -> Result<MeasurementSet> {
    if nm.p().nrows() != sc.rows_per_step() {
        return Err(Error::DimensionMismatch(format!(
            "P is {}x{}, scenario needs {}",
            nm.p().nrows(),
            nm.p().ncols(),
            sc.rows_per_step()
        )));
    }
    let ideal = ideal_measurements(sc)?;
    let lp = nm.p_factor();
    let lq = nm.q_factor();
    let y = ideal
        .y()
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let k = (i + 1) as u64;
            z + gaussian(&mut step_rng(sc.seed(), 2 * k), &lp)
        })
        .collect();
    let odometry = ideal
        .odometry()
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let k = (i + 1) as u64;
            let w = gaussian(&mut step_rng(sc.seed(), 2 * k + 1), &lq);
            o + Vector3::new(w[0], w[1], w[2])
        })
        .collect();
    MeasurementSet::new(sc.n_arrays(), y, odometry)
}

/// Parameters of the default observable trajectory: a 3D zig-zag that turns
/// after every emission, cycling through `directions`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableTrajectory {
    pub steps: usize,
    pub start: Vector3<f64>,
    /// Source speed, m/s.
    pub speed: f64,
    /// Time between emissions, s.
    pub dt: f64,
    /// Heading sequence; normalized internally. The first three must be
    /// linearly independent.
    pub directions: Vec<Vector3<f64>>,
}

impl Default for ObservableTrajectory {
    fn default() -> Self {
        Self {
            steps: 20,
            start: Vector3::new(1.2, 0.9, 0.6),
            speed: 0.1,
            dt: 1.0,
            directions: vec![
                Vector3::new(1.0, 0.3, 0.2),
                Vector3::new(0.2, 1.0, -0.3),
                Vector3::new(-0.3, 0.25, 1.0),
                Vector3::new(0.4, -1.0, 0.1),
            ],
        }
    }
}

/// Rank of the centered point matrix (dimension of the affine hull).
pub fn affine_dimension(points: &[Vector3<f64>], rel_tol: f64) -> usize {
    if points.len() < 2 {
        return 0;
    }
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let m = DMatrix::from_fn(points.len(), 3, |r, c| points[r][c] - mean[c]);
    let sv = linalg::singular_values(&m);
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

pub fn gen_observable_trajectory(params: &ObservableTrajectory) -> Result<Vec<Vector3<f64>>> {
    if !(params.speed > 0.0 && params.dt > 0.0) {
        return Err(Error::InvalidConfig("speed and dt must be positive".into()));
    }
    if params.steps == 0 {
        return Err(Error::InvalidConfig("need at least one step".into()));
    }
    if params.directions.len() < 3 {
        return Err(Error::InvalidConfig("need at least three headings".into()));
    }
    let dirs: Vec<Vector3<f64>> = params
        .directions
        .iter()
        .map(|d| {
            let n = d.norm();
            if n > 0.0 {
                Ok(d / n)
            } else {
                Err(Error::InvalidConfig("zero heading".into()))
            }
        })
        .collect::<Result<_>>()?;
    let det = nalgebra::Matrix3::from_columns(&[dirs[0], dirs[1], dirs[2]]).determinant();
    if det.abs() < 1e-6 {
        return Err(Error::InvalidConfig(
            "first three headings must be linearly independent".into(),
        ));
    }
    let stride = params.speed * params.dt;
    let mut out = Vec::with_capacity(params.steps);
    let mut s = params.start;
    out.push(s);
    for k in 1..params.steps {
        s += dirs[(k - 1) % dirs.len()] * stride;
        out.push(s);
    }
    Ok(out)
}

fn unit_direction(direction: &Vector3<f64>) -> Result<()> {
    if direction.norm() > 0.0 && direction.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(
            "direction must be a nonzero vector".into(),
        ))
    }
}

/// Points `s^k = k·direction` on a ray from the reference origin.
pub fn gen_collinear_origin(k: usize, direction: &Vector3<f64>) -> Result<Vec<Vector3<f64>>> {
    unit_direction(direction)?;
    Ok((1..=k).map(|i| direction * i as f64).collect())
}

/// A plane through the reference origin containing one coordinate axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Plane {
    /// `x = α·y`
    XAlphaY(f64),
    /// `x = β·z`
    XBetaZ(f64),
    /// `y = γ·z`
    YGammaZ(f64),
}

impl Plane {
    pub fn residual(&self, s: &Vector3<f64>) -> f64 {
        match *self {
            Plane::XAlphaY(a) => s.x - a * s.y,
            Plane::XBetaZ(b) => s.x - b * s.z,
            Plane::YGammaZ(g) => s.y - g * s.z,
        }
    }

    pub fn coefficient(&self) -> f64 {
        match *self {
            Plane::XAlphaY(v) | Plane::XBetaZ(v) | Plane::YGammaZ(v) => v,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Plane::XAlphaY(_) => "x=alpha*y",
            Plane::XBetaZ(_) => "x=beta*z",
            Plane::YGammaZ(_) => "y=gamma*z",
        }
    }
}

/// Zig-zag path lying exactly in `plane`, otherwise in general position.
pub fn gen_planar(k: usize, plane: Plane) -> Vec<Vector3<f64>> {
    (1..=k)
        .map(|i| {
            let t = i as f64;
            // in-plane coordinates (u, v): a drifting zig-zag that never
            // lines up with the origin
            let u = 0.8 + 0.07 * t + 0.01 * t * t;
            let v = 0.5 + 0.03 * t + if i % 2 == 0 { 0.07 } else { 0.0 };
            match plane {
                Plane::XAlphaY(a) => Vector3::new(a * u, u, v),
                Plane::XBetaZ(b) => Vector3::new(b * v, u, v),
                Plane::YGammaZ(g) => Vector3::new(u, g * v, v),
            }
        })
        .collect()
}

/// Points `s^k = p_i + k·direction` on a ray from array `i`'s position.
pub fn gen_collinear_with_array(
    k: usize,
    arr: &ArrayExtrinsics,
    direction: &Vector3<f64>,
) -> Result<Vec<Vector3<f64>>> {
    unit_direction(direction)?;
    Ok((1..=k)
        .map(|i| arr.position + direction * i as f64)
        .collect())
}

/// Sampling box for [`random_extrinsics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrinsicsBounds {
    pub position_min: Vector3<f64>,
    pub position_max: Vector3<f64>,
    /// Minimum pairwise distance between array positions (and to the origin).
    pub min_separation: f64,
    pub tau_max: f64,
    pub delta_max: f64,
}

impl Default for ExtrinsicsBounds {
    fn default() -> Self {
        Self {
            position_min: Vector3::new(-3.0, -3.0, -1.0),
            position_max: Vector3::new(3.0, 3.0, 2.0),
            min_separation: 0.5,
            tau_max: 0.1,
            delta_max: 1e-4,
        }
    }
}

/// Random array extrinsics; entry 0 is the all-zero reference.
///
/// `τ ~ U[0, tau_max]`, `δ ~ U[0, delta_max]`, `θx, θz ~ U[0, 2π)`,
/// `θy ~ U[0, π]`, positions uniform in the box with rejection sampling for
/// the separation constraint.
pub fn random_extrinsics(
    n: usize,
    bounds: &ExtrinsicsBounds,
    seed: u64,
) -> Result<Vec<ArrayExtrinsics>> {
    if n < 2 {
        return Err(Error::InvalidConfig("need at least 2 arrays".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![ArrayExtrinsics::reference()];
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidConfig(
                "could not place arrays with the requested separation".into(),
            ));
        }
        let p = Vector3::from_fn(|i, _| {
            rng.random_range(bounds.position_min[i]..=bounds.position_max[i])
        });
        let angles = [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..=std::f64::consts::PI),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        let tau = rng.random_range(0.0..=bounds.tau_max);
        let delta = rng.random_range(0.0..=bounds.delta_max);
        if out
            .iter()
            .any(|a| (a.position - p).norm() < bounds.min_separation)
        {
            continue;
        }
        let euler = EulerAngles::new(angles[0], angles[1], angles[2])?;
        out.push(ArrayExtrinsics::new(p, euler, tau, delta));
    }
    Ok(out)
}
