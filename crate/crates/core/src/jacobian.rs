//! Analytic Jacobian of the stacked observation model, its blocks, the Fisher
//! information matrix and a finite-difference oracle.
//!
//! The state is `x = [x_arr_2; …; x_arr_N; s^1; …; s^K]` with each array block
//! `[p(3); θ(3); τ; δ]`, so `dim x = 8(N−1) + 3K`. The stacked observation is
//! `m = [y^1; sΔ^1; y^2; …; sΔ^{K−1}; y^K]` with `4(N−1)K + 3(K−1)` rows.
//!
//! Per array `i` and step `k`, with `Δ = s^k − p_i` and `d = ‖Δ‖`:
//!
//! ```text
//! h = −Δᵀ / (c d)                          ∂T_i1/∂p_i
//! A = (d² I − Δ Δᵀ) / d³
//! U = −Rᵀ A                                ∂d_i1/∂p_i
//! V = [∂Rxᵀ Ryᵀ Rzᵀ Δ, Rxᵀ ∂Ryᵀ Rzᵀ Δ, Rxᵀ Ryᵀ ∂Rzᵀ Δ] / d
//! H = [h 0 1 kΔt; U V 0 0]                 4×8 block of L^k
//! T^k rows for array i = [−h − (s/(c d_1))ᵀ; −U]
//! ```

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{self, ArrayParams, ArrayPose};
use crate::linalg::{self, RankPolicy};
use crate::scenario::{self, NoiseModel, Scenario};

/// Dimensions of the state and observation vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n_arrays: usize,
    pub n_steps: usize,
}

impl StateLayout {
    pub fn new(n_arrays: usize, n_steps: usize) -> Self {
        Self { n_arrays, n_steps }
    }

    /// `g₂ = 8(N−1) + 3K`
    pub fn state_dim(&self) -> usize {
        8 * (self.n_arrays - 1) + 3 * self.n_steps
    }

    /// `g₁ = 4(N−1)K + 3(K−1)`
    pub fn observation_dim(&self) -> usize {
        self.rows_per_step() * self.n_steps + 3 * (self.n_steps - 1)
    }

    pub fn rows_per_step(&self) -> usize {
        4 * (self.n_arrays - 1)
    }

    pub fn array_cols(&self) -> usize {
        8 * (self.n_arrays - 1)
    }

    /// Column offset of array `i` (1-based, `i ≥ 2`).
    pub fn array_offset(&self, i: usize) -> usize {
        assert!(
            i >= 2 && i <= self.n_arrays,
            "array index {i} out of 2..={}",
            self.n_arrays
        );
        8 * (i - 2)
    }

    /// Column offset of source position `s^k` (1-based).
    pub fn source_offset(&self, k: usize) -> usize {
        assert!(
            k >= 1 && k <= self.n_steps,
            "step {k} out of 1..={}",
            self.n_steps
        );
        self.array_cols() + 3 * (k - 1)
    }

    /// Row offset of `y^k` in the stacked observation.
    pub fn measurement_row(&self, k: usize) -> usize {
        (k - 1) * (self.rows_per_step() + 3)
    }

    /// Row offset of `sΔ^k` (1 ≤ k < K).
    pub fn odometry_row(&self, k: usize) -> usize {
        self.measurement_row(k) + self.rows_per_step()
    }
}

/// The unknowns `[x_arr_2; …; x_arr_N; s^1; …; s^K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    layout: StateLayout,
    values: DVector<f64>,
}

impl StateVector {
    pub fn new(layout: StateLayout, values: DVector<f64>) -> Result<Self> {
        if values.len() != layout.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} entries, layout needs {}",
                values.len(),
                layout.state_dim()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn from_parts(arrays: &[ArrayParams], sources: &[Vector3<f64>]) -> Self {
        let layout = StateLayout::new(arrays.len() + 1, sources.len());
        let mut values = DVector::zeros(layout.state_dim());
        for (j, a) in arrays.iter().enumerate() {
            values.rows_mut(8 * j, 8).copy_from_slice(&a.to_array());
        }
        for (k, s) in sources.iter().enumerate() {
            values
                .fixed_rows_mut::<3>(layout.source_offset(k + 1))
                .copy_from(s);
        }
        Self { layout, values }
    }

    /// Ground truth of a scenario.
    pub fn from_scenario(sc: &Scenario) -> Self {
        let arrays: Vec<ArrayParams> = sc.free_arrays().iter().map(|a| a.params()).collect();
        Self::from_parts(&arrays, sc.trajectory())
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DVector<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    /// Parameters of array `i` (1-based, `i ≥ 2`).
    pub fn array(&self, i: usize) -> ArrayParams {
        let o = self.layout.array_offset(i);
        ArrayParams::from_slice(self.values.rows(o, 8).as_slice())
    }

    /// Arrays `2..N`.
    pub fn arrays(&self) -> Vec<ArrayParams> {
        (2..=self.layout.n_arrays).map(|i| self.array(i)).collect()
    }

    pub fn source(&self, k: usize) -> Vector3<f64> {
        self.values
            .fixed_rows::<3>(self.layout.source_offset(k))
            .into_owned()
    }

    pub fn sources(&self) -> Vec<Vector3<f64>> {
        (1..=self.layout.n_steps).map(|k| self.source(k)).collect()
    }
}

/// `g(x)`: the noise-free stacked observation at a state.
pub fn observation_model(x: &StateVector, dt: f64, c: f64) -> Result<DVector<f64>> {
    let layout = x.layout();
    let arrays = x.arrays();
    let sources = x.sources();
    let mut g = DVector::zeros(layout.observation_dim());
    for (idx, s) in sources.iter().enumerate() {
        let k = idx + 1;
        let z = scenario::ideal_measurement(&arrays, s, k, dt, c)?;
        g.rows_mut(layout.measurement_row(k), layout.rows_per_step())
            .copy_from(&z);
        if k < layout.n_steps {
            let o = sources[idx + 1] - s;
            g.fixed_rows_mut::<3>(layout.odometry_row(k)).copy_from(&o);
        }
    }
    Ok(g)
}

fn offset_and_distance<A: ArrayPose + ?Sized>(
    arr: &A,
    s: &Vector3<f64>,
) -> Result<(Vector3<f64>, f64)> {
    let p = arr.position();
    let d = geometry::distance(s, &p)?;
    Ok((s - p, d))
}

/// `h = −(s − p)ᵀ / (c d)`: derivative of the TDOA w.r.t. the array position.
pub fn block_h<A: ArrayPose + ?Sized>(
    arr: &A,
    s: &Vector3<f64>,
    c: f64,
) -> Result<RowVector3<f64>> {
    let (delta, d) = offset_and_distance(arr, s)?;
    Ok(-delta.transpose() / (c * d))
}

/// The matrix `A = (d² I − Δ Δᵀ) / d³`, whose null space is spanned by `Δ`.
pub fn block_a(delta: &Vector3<f64>, d: f64) -> Matrix3<f64> {
    (Matrix3::identity() * (d * d) - delta * delta.transpose()) / (d * d * d)
}

/// `U = −Rᵀ A`: derivative of the DOA w.r.t. the array position.
pub fn block_u<A: ArrayPose + ?Sized>(arr: &A, s: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let (delta, d) = offset_and_distance(arr, s)?;
    Ok(-(arr.rotation().transpose() * block_a(&delta, d)))
}

/// Derivative of the DOA w.r.t. the Euler angles `(θx, θy, θz)`, one column
/// per angle.
pub fn block_v<A: ArrayPose + ?Sized>(arr: &A, s: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let (delta, d) = offset_and_distance(arr, s)?;
    let [ax, ay, az] = arr.angles();
    let (rxt, ryt, rzt) = (
        geometry::rot_x(ax).transpose(),
        geometry::rot_y(ay).transpose(),
        geometry::rot_z(az).transpose(),
    );
    let u = delta / d;
    let cx = geometry::d_rot_x_t(ax) * ryt * rzt * u;
    let cy = rxt * geometry::d_rot_y_t(ay) * rzt * u;
    let cz = rxt * ryt * geometry::d_rot_z_t(az) * u;
    Ok(Matrix3::from_columns(&[cx, cy, cz]))
}

/// The 4×8 block `H = [h 0₁ₓ₃ 1 kΔt; U V 0 0]` of array `i` at step `k`.
pub fn block_hi<A: ArrayPose + ?Sized>(
    arr: &A,
    s: &Vector3<f64>,
    k: usize,
    dt: f64,
    c: f64,
) -> Result<SMatrix<f64, 4, 8>> {
    let mut out = SMatrix::<f64, 4, 8>::zeros();
    out.fixed_view_mut::<1, 3>(0, 0)
        .copy_from(&block_h(arr, s, c)?);
    out[(0, 6)] = 1.0;
    out[(0, 7)] = k as f64 * dt;
    out.fixed_view_mut::<3, 3>(1, 0)
        .copy_from(&block_u(arr, s)?);
    out.fixed_view_mut::<3, 3>(1, 3)
        .copy_from(&block_v(arr, s)?);
    Ok(out)
}

/// `T^k = ∂z^k/∂s^k`, `4(N−1)×3`, for arrays `2..N`.
pub fn block_tk<A: ArrayPose>(free_arrays: &[A], s: &Vector3<f64>, c: f64) -> Result<DMatrix<f64>> {
    let d1 = geometry::distance(s, &Vector3::zeros())?;
    let ref_term = s.transpose() / (c * d1);
    let mut t = DMatrix::zeros(4 * free_arrays.len(), 3);
    for (j, arr) in free_arrays.iter().enumerate() {
        let h = block_h(arr, s, c)?;
        let u = block_u(arr, s)?;
        t.fixed_view_mut::<1, 3>(4 * j, 0)
            .copy_from(&(-h - ref_term));
        t.fixed_view_mut::<3, 3>(4 * j + 1, 0).copy_from(&(-u));
    }
    Ok(t)
}

/// The assembled Jacobian together with the blocks it was built from.
///
/// Block vectors are indexed `[k−1]` for steps and `[k−1][i−2]` for
/// per-array-per-step blocks.
#[derive(Debug, Clone)]
pub struct JacobianBundle {
    pub layout: StateLayout,
    pub j: DMatrix<f64>,
    pub l: Vec<DMatrix<f64>>,
    pub t: Vec<DMatrix<f64>>,
    pub h: Vec<Vec<RowVector3<f64>>>,
    pub u: Vec<Vec<Matrix3<f64>>>,
    pub v: Vec<Vec<Matrix3<f64>>>,
    pub dt: f64,
}

impl JacobianBundle {
    /// The 4×8 block `H_arr_i^k` read back out of `L^k`.
    pub fn hi(&self, i: usize, k: usize) -> SMatrix<f64, 4, 8> {
        let r = 4 * (i - 2);
        let c = 8 * (i - 2);
        self.l[k - 1].fixed_view::<4, 8>(r, c).into_owned()
    }
}

/// Analytic Jacobian at an arbitrary state.
pub fn assemble_at(x: &StateVector, dt: f64, c: f64) -> Result<JacobianBundle> {
    let layout = x.layout();
    let arrays = x.arrays();
    let sources = x.sources();
    let rows = layout.rows_per_step();
    let mut j = DMatrix::zeros(layout.observation_dim(), layout.state_dim());
    let mut l_blocks = Vec::with_capacity(layout.n_steps);
    let mut t_blocks = Vec::with_capacity(layout.n_steps);
    let (mut hs, mut us, mut vs) = (Vec::new(), Vec::new(), Vec::new());

    for (idx, s) in sources.iter().enumerate() {
        let k = idx + 1;
        let at = |e: Error| e.at_step(k);
        let mut l = DMatrix::zeros(rows, layout.array_cols());
        let (mut h_k, mut u_k, mut v_k) = (Vec::new(), Vec::new(), Vec::new());
        for (jdx, arr) in arrays.iter().enumerate() {
            let h = block_h(arr, s, c).map_err(at)?;
            let u = block_u(arr, s).map_err(at)?;
            let v = block_v(arr, s).map_err(at)?;
            let mut hi = SMatrix::<f64, 4, 8>::zeros();
            hi.fixed_view_mut::<1, 3>(0, 0).copy_from(&h);
            hi[(0, 6)] = 1.0;
            hi[(0, 7)] = k as f64 * dt;
            hi.fixed_view_mut::<3, 3>(1, 0).copy_from(&u);
            hi.fixed_view_mut::<3, 3>(1, 3).copy_from(&v);
            l.fixed_view_mut::<4, 8>(4 * jdx, 8 * jdx).copy_from(&hi);
            h_k.push(h);
            u_k.push(u);
            v_k.push(v);
        }
        let t = block_tk(&arrays, s, c).map_err(at)?;

        let r0 = layout.measurement_row(k);
        j.view_mut((r0, 0), (rows, layout.array_cols()))
            .copy_from(&l);
        j.view_mut((r0, layout.source_offset(k)), (rows, 3))
            .copy_from(&t);
        if k < layout.n_steps {
            let ro = layout.odometry_row(k);
            for a in 0..3 {
                j[(ro + a, layout.source_offset(k) + a)] = -1.0;
                j[(ro + a, layout.source_offset(k + 1) + a)] = 1.0;
            }
        }
        l_blocks.push(l);
        t_blocks.push(t);
        hs.push(h_k);
        us.push(u_k);
        vs.push(v_k);
    }
    Ok(JacobianBundle {
        layout,
        j,
        l: l_blocks,
        t: t_blocks,
        h: hs,
        u: us,
        v: vs,
        dt,
    })
}

/// Analytic Jacobian at a scenario's ground truth.
pub fn assemble(sc: &Scenario) -> Result<JacobianBundle> {
    assemble_at(&StateVector::from_scenario(sc), sc.dt(), sc.c())
}

/// Apply `W^{-1/2}` (via the Cholesky factors of `P` and `Q`) to the rows of
/// a matrix laid out like the stacked observation.
pub fn whiten(m: &DMatrix<f64>, layout: &StateLayout, nm: &NoiseModel) -> Result<DMatrix<f64>> {
    if nm.p().nrows() != layout.rows_per_step() {
        return Err(Error::DimensionMismatch(format!(
            "P is {}x{}, layout needs {}",
            nm.p().nrows(),
            nm.p().ncols(),
            layout.rows_per_step()
        )));
    }
    if m.nrows() != layout.observation_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows, observation has {}",
            m.nrows(),
            layout.observation_dim()
        )));
    }
    let rows = layout.rows_per_step();
    let lp = nm.chol_p().l();
    let lq = nm.chol_q().l();
    let mut out = m.clone();
    for k in 1..=layout.n_steps {
        let r = layout.measurement_row(k);
        let block = m.rows(r, rows).into_owned();
        let solved = lp
            .solve_lower_triangular(&block)
            .expect("Cholesky factor is nonsingular");
        out.rows_mut(r, rows).copy_from(&solved);
        if k < layout.n_steps {
            let r = layout.odometry_row(k);
            let block = m.rows(r, 3).into_owned();
            let solved = lq
                .solve_lower_triangular(&block)
                .expect("Cholesky factor is nonsingular");
            out.rows_mut(r, 3).copy_from(&solved);
        }
    }
    Ok(out)
}

/// `I_FIM = Jᵀ W⁻¹ J` with `W = diag(P, Q, P, …, Q, P)`.
pub fn fim(bundle: &JacobianBundle, nm: &NoiseModel) -> Result<DMatrix<f64>> {
    let jw = whiten(&bundle.j, &bundle.layout, nm)?;
    let f = jw.transpose() * &jw;
    // symmetrize away roundoff in the product
    Ok((&f + f.transpose()) * 0.5)
}

/// SVD of the FIM's square-root factor `W^{-1/2} J`, with columns scaled to
/// unit norm: `FIM = S V Σ² Vᵀ S`, `S = diag(scale)`.
///
/// Forming `Jᵀ W⁻¹ J` squares the condition number, and weakly observable
/// directions of a full-rank `J` can fall below double precision in the
/// product. Rank and inverse are therefore read from this factor instead.
#[derive(Debug, Clone)]
pub struct FimFactor {
    /// Column norms of `W^{-1/2} J` (1 for zero columns).
    pub scale: DVector<f64>,
    /// One singular value per column of `V`; zero for padding.
    pub sigma: DVector<f64>,
    /// Square, orthogonal.
    pub v: DMatrix<f64>,
    rows: usize,
}

impl FimFactor {
    pub fn threshold(&self, policy: &RankPolicy) -> f64 {
        let smax = self.sigma.iter().copied().fold(0.0, f64::max);
        policy.threshold(smax, self.rows, self.v.ncols())
    }

    pub fn rank(&self, policy: &RankPolicy) -> usize {
        let t = self.threshold(policy);
        self.sigma.iter().filter(|&&s| s > t).count()
    }
}

pub fn fim_factor(bundle: &JacobianBundle, nm: &NoiseModel) -> Result<FimFactor> {
    let jw = whiten(&bundle.j, &bundle.layout, nm)?;
    let (rows, n) = jw.shape();
    let scale = DVector::from_fn(n, |j, _| {
        let v = jw.column(j).norm();
        if v > 0.0 {
            v
        } else {
            1.0
        }
    });
    // zero rows keep Jᵀ J and make V square when J is wide
    let mut js = DMatrix::zeros(rows.max(n), n);
    for j in 0..n {
        js.view_mut((0, j), (rows, 1))
            .copy_from(&(jw.column(j) / scale[j]));
    }
    let svd = js.svd(false, true);
    Ok(FimFactor {
        scale,
        sigma: svd.singular_values,
        v: svd.v_t.expect("requested V").transpose(),
        rows,
    })
}

/// Numerical rank of the FIM, read from its scaled square-root factor.
pub fn fim_rank(bundle: &JacobianBundle, nm: &NoiseModel, policy: &RankPolicy) -> Result<usize> {
    Ok(fim_factor(bundle, nm)?.rank(policy))
}

/// Central-difference Jacobian of `g` at `x` with step `h`.
pub fn finite_difference_at(x: &StateVector, dt: f64, c: f64, h: f64) -> Result<DMatrix<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "step must be positive, got {h}"
        )));
    }
    let layout = x.layout();
    let mut out = DMatrix::zeros(layout.observation_dim(), layout.state_dim());
    let mut probe = x.clone();
    for col in 0..layout.state_dim() {
        let orig = probe.values()[col];
        probe.values_mut()[col] = orig + h;
        let plus = observation_model(&probe, dt, c)?;
        probe.values_mut()[col] = orig - h;
        let minus = observation_model(&probe, dt, c)?;
        probe.values_mut()[col] = orig;
        out.set_column(col, &((plus - minus) / (2.0 * h)));
    }
    Ok(out)
}

/// Central-difference Jacobian at a scenario's ground truth.
pub fn finite_difference_jacobian(sc: &Scenario, h: f64) -> Result<DMatrix<f64>> {
    finite_difference_at(&StateVector::from_scenario(sc), sc.dt(), sc.c(), h)
}

/// Numerical rank of `J`.
pub fn jacobian_rank(bundle: &JacobianBundle, policy: &RankPolicy) -> usize {
    linalg::numeric_rank(&bundle.j, policy)
}
