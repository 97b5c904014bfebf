//! Observability analysis: rank-preserving reductions of the Jacobian and the
//! necessary, sufficient and degenerate-case conditions built on them.
//!
//! Eliminating the odometry rows of `J` leaves the information core
//!
//! ```text
//! F = [L^1 T^1; L^2 T^2; …; L^K T^K]        4(N−1)K × (8(N−1)+3)
//! ```
//!
//! where all `T^k` share one 3-column block (the odometry ties every `s^k` to a
//! single unknown offset). `J` has full column rank iff `F` does, and in
//! general `rank(J) = rank(F) + 3(K−1)`.
//!
//! Elementary row/column operations turn `F` into
//!
//! ```text
//! F̄′ = [L̄_2          T̄]
//!      [     L̄_3     T̄]
//!      [         ⋱   ⋮]
//!      [          L̄_N T̄]
//! ```
//!
//! with `L̄_i` (4K×8, columns `[τ, δ, p, θ]`) and `T̄` (4K×3) given in closed
//! form by [`reduce_lbar`] and [`reduce_tbar`]. They are built directly from
//! those closed forms; the rank equality with `F` is checked by tests rather
//! than assumed.

use nalgebra::{DMatrix, Matrix3, RowVector3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{self, ArrayPose};
use crate::jacobian::{self, JacobianBundle, StateVector};
use crate::linalg::{self, RankPolicy};
use crate::scenario::{Plane, Scenario};

/// Minimum number of emissions for the source-geometry block to reach rank 3.
pub const MIN_STEPS_FOR_SOURCE_RANK: usize = 5;

/// Relative tolerance for the geometric degeneracy detectors.
pub const GEOMETRY_TOL: f64 = 1e-9;

/// Tolerance on `|cos θy|` for flagging `θy = π/2`.
pub const GIMBAL_TOL: f64 = 1e-9;

/// Columns of `F`: `8(N−1) + 3`.
pub fn f_cols(n_arrays: usize) -> usize {
    8 * (n_arrays - 1) + 3
}

/// Smallest `K` for which `J` has at least as many rows as columns:
/// `⌈2 + 3/(4(N−1))⌉`.
pub fn min_steps_for_row_count(n_arrays: usize) -> usize {
    let n1 = n_arrays - 1;
    2 + 3usize.div_ceil(4 * n1)
}

/// `F` from an assembled Jacobian.
pub fn f_from_bundle(bundle: &JacobianBundle) -> DMatrix<f64> {
    let layout = bundle.layout;
    let rows = layout.rows_per_step();
    let cols = f_cols(layout.n_arrays);
    let mut f = DMatrix::zeros(rows * layout.n_steps, cols);
    for (idx, (l, t)) in bundle.l.iter().zip(&bundle.t).enumerate() {
        f.view_mut((idx * rows, 0), (rows, layout.array_cols()))
            .copy_from(l);
        f.view_mut((idx * rows, layout.array_cols()), (rows, 3))
            .copy_from(t);
    }
    f
}

/// `F = [L^k T^k]` stacked over all steps.
pub fn build_f(sc: &Scenario) -> Result<DMatrix<f64>> {
    Ok(f_from_bundle(&jacobian::assemble(sc)?))
}

fn source_terms(sources: &[Vector3<f64>], c: f64) -> Result<Vec<RowVector3<f64>>> {
    sources
        .iter()
        .enumerate()
        .map(|(idx, s)| {
            let d1 = geometry::distance(s, &Vector3::zeros()).map_err(|e| e.at_step(idx + 1))?;
            Ok(s.transpose() / (c * d1))
        })
        .collect()
}

/// `T̄`: two zero rows, then for `k = 3..K` the row
/// `−(k−2)·t_1 + (k−1)·t_2 − t_k` with `t_k = (s^k / (c d_1^k))ᵀ`, then `3K`
/// zero rows.
pub fn reduce_tbar(sc: &Scenario) -> Result<DMatrix<f64>> {
    let t = source_terms(sc.trajectory(), sc.c())?;
    Ok(tbar_from_terms(&t))
}

fn tbar_from_terms(t: &[RowVector3<f64>]) -> DMatrix<f64> {
    let k_total = t.len();
    let mut out = DMatrix::zeros(4 * k_total, 3);
    for k in 3..=k_total {
        let kf = k as f64;
        let row = -(kf - 2.0) * t[0] + (kf - 1.0) * t[1] - t[k - 1];
        out.fixed_view_mut::<1, 3>(k - 1, 0).copy_from(&row);
    }
    out
}

fn check_dt(dt: f64) -> Result<()> {
    if dt == 0.0 {
        Err(Error::InvalidConfig(
            "the reduction divides the drift column by dt; dt must be nonzero".into(),
        ))
    } else {
        Ok(())
    }
}

fn lbar_from_bundle(bundle: &JacobianBundle, i: usize) -> DMatrix<f64> {
    let k_total = bundle.layout.n_steps;
    let j = i - 2;
    let h: Vec<RowVector3<f64>> = bundle.h.iter().map(|hk| hk[j]).collect();
    let mut out = DMatrix::zeros(4 * k_total, 8);
    out[(0, 0)] = 1.0;
    if k_total >= 2 {
        out[(1, 1)] = 1.0;
    }
    for k in 3..=k_total {
        let kf = k as f64;
        let row = (kf - 2.0) * h[0] - (kf - 1.0) * h[1] + h[k - 1];
        out.fixed_view_mut::<1, 3>(k - 1, 2).copy_from(&row);
    }
    for k in 1..=k_total {
        let r = k_total + 3 * (k - 1);
        out.fixed_view_mut::<3, 3>(r, 2)
            .copy_from(&bundle.u[k - 1][j]);
        out.fixed_view_mut::<3, 3>(r, 5)
            .copy_from(&bundle.v[k - 1][j]);
    }
    out
}

fn check_array_index(sc: &Scenario, i: usize) -> Result<()> {
    if i < 2 || i > sc.n_arrays() {
        Err(Error::InvalidConfig(format!(
            "array index {i} outside 2..={}",
            sc.n_arrays()
        )))
    } else {
        Ok(())
    }
}

/// `L̄_i` for array `i ∈ 2..=N`: a 2×2 identity on the clock columns, `K−2`
/// rows `(k−2)h¹ − (k−1)h² + h^k` on the position columns, then `[U^k V^k]`
/// for every step.
pub fn reduce_lbar(sc: &Scenario, i: usize) -> Result<DMatrix<f64>> {
    check_array_index(sc, i)?;
    check_dt(sc.dt())?;
    let bundle = jacobian::assemble(sc)?;
    Ok(lbar_from_bundle(&bundle, i))
}

/// `F̄′` and the blocks it is made of.
#[derive(Debug, Clone)]
pub struct ReducedMatrices {
    pub f: DMatrix<f64>,
    pub fbar_prime: DMatrix<f64>,
    pub tbar: DMatrix<f64>,
    /// `L̄_i` for `i = 2..N`, in order.
    pub lbar: Vec<DMatrix<f64>>,
}

impl ReducedMatrices {
    pub fn n_arrays(&self) -> usize {
        self.lbar.len() + 1
    }

    pub fn lbar(&self, i: usize) -> &DMatrix<f64> {
        &self.lbar[i - 2]
    }

    /// `M_{j_T} = [L̄_j T̄; −L̄_j 0; …; −L̄_j 0]` with `N−2` lower blocks.
    pub fn mjt(&self, j: usize) -> DMatrix<f64> {
        let lj = self.lbar(j);
        let rows = lj.nrows();
        let n1 = self.lbar.len();
        let mut m = DMatrix::zeros(n1 * rows, 11);
        m.view_mut((0, 0), (rows, 8)).copy_from(lj);
        m.view_mut((0, 8), (rows, 3)).copy_from(&self.tbar);
        for b in 1..n1 {
            m.view_mut((b * rows, 0), (rows, 8)).copy_from(&(-lj));
        }
        m
    }

    /// `diag(L̄_i)` over the given array indices.
    pub fn lbar_diag(&self, indices: impl IntoIterator<Item = usize>) -> DMatrix<f64> {
        let blocks: Vec<&DMatrix<f64>> = indices.into_iter().map(|i| self.lbar(i)).collect();
        linalg::block_diag(&blocks)
    }
}

/// Reduced blocks from a Jacobian assembled at a state with the given
/// source positions.
pub fn reduced_from_bundle(
    bundle: &JacobianBundle,
    sources: &[Vector3<f64>],
    c: f64,
) -> Result<ReducedMatrices> {
    check_dt(bundle.dt)?;
    let layout = bundle.layout;
    let n1 = layout.n_arrays - 1;
    let tbar = tbar_from_terms(&source_terms(sources, c)?);
    let lbar: Vec<DMatrix<f64>> = (2..=layout.n_arrays)
        .map(|i| lbar_from_bundle(bundle, i))
        .collect();
    let rows = 4 * layout.n_steps;
    let mut fbar = DMatrix::zeros(n1 * rows, f_cols(layout.n_arrays));
    for (b, l) in lbar.iter().enumerate() {
        fbar.view_mut((b * rows, 8 * b), (rows, 8)).copy_from(l);
        fbar.view_mut((b * rows, 8 * n1), (rows, 3))
            .copy_from(&tbar);
    }
    Ok(ReducedMatrices {
        f: f_from_bundle(bundle),
        fbar_prime: fbar,
        tbar,
        lbar,
    })
}

pub fn build_fbar_prime(sc: &Scenario) -> Result<ReducedMatrices> {
    let bundle = jacobian::assemble(sc)?;
    reduced_from_bundle(&bundle, sc.trajectory(), sc.c())
}

/// `M_{j_T}` for array `j ∈ 2..=N` (11 columns).
pub fn build_mjt(sc: &Scenario, j: usize) -> Result<DMatrix<f64>> {
    check_array_index(sc, j)?;
    Ok(build_fbar_prime(sc)?.mjt(j))
}

/// A failed necessary condition for full column rank.
#[derive(Debug, Clone, PartialEq)]
pub enum NecessaryViolation {
    /// Fewer rows than columns: `K < ⌈2 + 3/(4(N−1))⌉`.
    RowCount { steps: usize, required: usize },
    /// `K < 5`: `T̄` has at most two nonzero rows.
    TooFewSteps { steps: usize },
    /// `rank(T̄) < 3`.
    SourceBlockDeficient { rank: usize },
    /// `rank(L̄_i) < 8`.
    ArrayBlockDeficient { array: usize, rank: usize },
}

impl NecessaryViolation {
    pub fn code(&self) -> &'static str {
        match self {
            NecessaryViolation::RowCount { .. } => "row-count",
            NecessaryViolation::TooFewSteps { .. } => "too-few-steps",
            NecessaryViolation::SourceBlockDeficient { .. } => "tbar-rank",
            NecessaryViolation::ArrayBlockDeficient { .. } => "lbar-rank",
        }
    }

    pub fn describe(&self) -> String {
        match self {
            NecessaryViolation::RowCount { steps, required } => format!(
                "K = {steps} gives fewer measurement rows than unknowns; need K >= {required}"
            ),
            NecessaryViolation::TooFewSteps { steps } => format!(
                "K = {steps} < {MIN_STEPS_FOR_SOURCE_RANK}: the source-geometry block cannot reach rank 3"
            ),
            NecessaryViolation::SourceBlockDeficient { rank } => {
                format!("rank(Tbar) = {rank} < 3")
            }
            NecessaryViolation::ArrayBlockDeficient { array, rank } => {
                format!("rank(Lbar_{array}) = {rank} < 8")
            }
        }
    }
}

/// Ranks of the reduced blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRanks {
    pub tbar: usize,
    /// `(i, rank(L̄_i))` for `i = 2..N`.
    pub lbar: Vec<(usize, usize)>,
}

pub fn block_ranks(red: &ReducedMatrices, policy: &RankPolicy) -> BlockRanks {
    BlockRanks {
        tbar: linalg::numeric_rank(&red.tbar, policy),
        lbar: red
            .lbar
            .iter()
            .enumerate()
            .map(|(b, l)| (b + 2, linalg::numeric_rank(l, policy)))
            .collect(),
    }
}

fn necessary_from(n_arrays: usize, k: usize, ranks: &BlockRanks) -> Vec<NecessaryViolation> {
    let mut out = Vec::new();
    let required = min_steps_for_row_count(n_arrays);
    if k < required {
        out.push(NecessaryViolation::RowCount { steps: k, required });
    }
    if k < MIN_STEPS_FOR_SOURCE_RANK {
        out.push(NecessaryViolation::TooFewSteps { steps: k });
    }
    if ranks.tbar < 3 {
        out.push(NecessaryViolation::SourceBlockDeficient { rank: ranks.tbar });
    }
    for &(array, rank) in &ranks.lbar {
        if rank < 8 {
            out.push(NecessaryViolation::ArrayBlockDeficient { array, rank });
        }
    }
    out
}

/// All failed necessary conditions; an empty list means every necessary
/// condition holds.
pub fn check_necessary(sc: &Scenario, policy: &RankPolicy) -> Result<Vec<NecessaryViolation>> {
    let red = build_fbar_prime(sc)?;
    Ok(necessary_from(
        sc.n_arrays(),
        sc.n_steps(),
        &block_ranks(&red, policy),
    ))
}

/// Outcome of the sufficient-condition test for one candidate `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficiencyCandidate {
    pub j: usize,
    pub rank_mjt: usize,
    /// `rank(diag(L̄_i, i ≠ j))`.
    pub rank_other_lbar: usize,
    pub other_lbar_full: bool,
}

impl SufficiencyCandidate {
    pub fn passes(&self) -> bool {
        self.rank_mjt == 11 && self.other_lbar_full
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficiencyVerdict {
    pub candidates: Vec<SufficiencyCandidate>,
    /// First `j` for which both conditions hold.
    pub witness: Option<usize>,
}

impl SufficiencyVerdict {
    pub fn sufficient(&self) -> bool {
        self.witness.is_some()
    }
}

fn sufficient_from(
    red: &ReducedMatrices,
    ranks: &BlockRanks,
    policy: &RankPolicy,
) -> SufficiencyVerdict {
    let n = red.n_arrays();
    let candidates: Vec<SufficiencyCandidate> = (2..=n)
        .map(|j| {
            let rank_mjt = linalg::numeric_rank(&red.mjt(j), policy);
            let others: Vec<usize> = (2..=n).filter(|&i| i != j).collect();
            let other_lbar_full = ranks
                .lbar
                .iter()
                .filter(|(i, _)| *i != j)
                .all(|&(_, r)| r == 8);
            let rank_other_lbar = if others.is_empty() {
                0
            } else {
                linalg::numeric_rank(&red.lbar_diag(others.iter().copied()), policy)
            };
            SufficiencyCandidate {
                j,
                rank_mjt,
                rank_other_lbar,
                other_lbar_full,
            }
        })
        .collect();
    let witness = candidates.iter().find(|c| c.passes()).map(|c| c.j);
    SufficiencyVerdict {
        candidates,
        witness,
    }
}

/// Sufficient condition: some `j` with `rank(M_{j_T}) = 11` and
/// `rank(L̄_i) = 8` for every `i ≠ j`.
pub fn check_sufficient(sc: &Scenario, policy: &RankPolicy) -> Result<SufficiencyVerdict> {
    let red = build_fbar_prime(sc)?;
    let ranks = block_ranks(&red, policy);
    Ok(sufficient_from(&red, &ranks, policy))
}

/// A plane through the reference origin fitted to the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    /// The matching axis-containing family, when the normal has a zero
    /// component.
    pub family: Option<Plane>,
}

/// A geometric configuration known to make the Jacobian rank deficient.
#[derive(Debug, Clone, PartialEq)]
pub enum DegenerateCase {
    /// `K < 5`.
    TooFewSteps { steps: usize },
    /// All source positions on one line through the reference origin.
    CollinearWithOrigin { direction: Vector3<f64> },
    /// All source positions on one plane through the reference origin.
    PlanarThroughOrigin(PlaneFit),
    /// All source positions on one line through array `i`'s position.
    CollinearWithArray {
        array: usize,
        direction: Vector3<f64>,
    },
    /// `θy = π/2` for array `i`.
    GimbalLock { array: usize },
}

impl DegenerateCase {
    pub fn code(&self) -> &'static str {
        match self {
            DegenerateCase::TooFewSteps { .. } => "too-few-steps",
            DegenerateCase::CollinearWithOrigin { .. } => "collinear-origin",
            DegenerateCase::PlanarThroughOrigin(_) => "planar-origin",
            DegenerateCase::CollinearWithArray { .. } => "collinear-array",
            DegenerateCase::GimbalLock { .. } => "gimbal-lock",
        }
    }

    /// Which reduced block the case makes rank deficient.
    pub fn affected_block(&self) -> String {
        match self {
            DegenerateCase::TooFewSteps { .. }
            | DegenerateCase::CollinearWithOrigin { .. }
            | DegenerateCase::PlanarThroughOrigin(_) => "Tbar".into(),
            DegenerateCase::CollinearWithArray { array, .. }
            | DegenerateCase::GimbalLock { array } => format!("Lbar_{array}"),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DegenerateCase::TooFewSteps { steps } => {
                format!("only {steps} emissions; at least {MIN_STEPS_FOR_SOURCE_RANK} are needed")
            }
            DegenerateCase::CollinearWithOrigin { direction } => format!(
                "source stays on the line through the reference array along [{:.6}, {:.6}, {:.6}]",
                direction.x, direction.y, direction.z
            ),
            DegenerateCase::PlanarThroughOrigin(fit) => match fit.family {
                Some(p) => format!(
                    "source stays in the plane {} through the reference array (coefficient {:.6})",
                    p.label(),
                    p.coefficient()
                ),
                None => format!(
                    "source stays in a plane through the reference array with normal [{:.6}, {:.6}, {:.6}]",
                    fit.normal.x, fit.normal.y, fit.normal.z
                ),
            },
            DegenerateCase::CollinearWithArray { array, direction } => format!(
                "source stays on a line through array {array} along [{:.6}, {:.6}, {:.6}]",
                direction.x, direction.y, direction.z
            ),
            DegenerateCase::GimbalLock { array } => {
                format!("array {array} has theta_y = pi/2 (gimbal singularity)")
            }
        }
    }
}

/// Singular values and right singular vectors of the row-normalized offsets
/// `(s^k − origin)/‖s^k − origin‖`.
fn direction_spread(
    points: &[Vector3<f64>],
    origin: &Vector3<f64>,
) -> Option<(Vec<f64>, Matrix3<f64>)> {
    let rows: Vec<Vector3<f64>> = points
        .iter()
        .map(|s| s - origin)
        .filter(|d| d.norm() > 0.0)
        .map(|d| d.normalize())
        .collect();
    if rows.is_empty() {
        return None;
    }
    let m = DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    sv.resize(3, 0.0);
    // with fewer than three rows the missing right vectors complete the basis
    let mut cols: Vec<Vector3<f64>> = order
        .iter()
        .map(|&i| v_t.row(i).transpose().fixed_rows::<3>(0).into_owned())
        .collect();
    if cols.len() == 2 {
        cols.push(cols[0].cross(&cols[1]).normalize());
    }
    if cols.len() < 3 {
        return None;
    }
    let vecs = Matrix3::from_columns(&cols);
    Some((sv, vecs))
}

fn classify_plane(n: Vector3<f64>, tol: f64) -> Option<Plane> {
    let n = n.normalize();
    if n.z.abs() < tol && n.x.abs() >= tol {
        // a x + b y = 0  ⇒  x = −(b/a) y
        Some(Plane::XAlphaY(-n.y / n.x))
    } else if n.y.abs() < tol && n.x.abs() >= tol {
        Some(Plane::XBetaZ(-n.z / n.x))
    } else if n.x.abs() < tol && n.y.abs() >= tol {
        Some(Plane::YGammaZ(-n.z / n.y))
    } else {
        None
    }
}

/// Geometric tests for the known degenerate families.
///
/// Collinearity and planarity are judged from the singular values of the
/// unit offset directions: the second (third) singular value relative to the
/// first below `tol` means the points span a line (plane) through the origin.
pub fn detect_degenerate(sc: &Scenario, tol: f64) -> Vec<DegenerateCase> {
    detect_degenerate_in(sc.trajectory(), sc.free_arrays(), tol)
}

/// [`detect_degenerate`] on explicit sources and non-reference arrays
/// (`free_arrays[0]` is array 2). A pitch with `|cos θy| ≤` [`GIMBAL_TOL`]
/// counts as gimbal lock.
pub fn detect_degenerate_in<A: ArrayPose>(
    traj: &[Vector3<f64>],
    free_arrays: &[A],
    tol: f64,
) -> Vec<DegenerateCase> {
    let mut out = Vec::new();
    let k = traj.len();
    if k < MIN_STEPS_FOR_SOURCE_RANK {
        out.push(DegenerateCase::TooFewSteps { steps: k });
    }
    if k >= 2 {
        if let Some((sv, vecs)) = direction_spread(traj, &Vector3::zeros()) {
            if sv[1] <= tol * sv[0] {
                out.push(DegenerateCase::CollinearWithOrigin {
                    direction: vecs.column(0).into_owned(),
                });
            } else if k >= 3 && sv[2] <= tol * sv[0] {
                let normal: Vector3<f64> = vecs.column(2).into_owned();
                out.push(DegenerateCase::PlanarThroughOrigin(PlaneFit {
                    normal,
                    family: classify_plane(normal, 1e3 * tol),
                }));
            }
        }
    }
    for (idx, arr) in free_arrays.iter().enumerate() {
        let array = idx + 2;
        if k >= 2 {
            if let Some((sv, vecs)) = direction_spread(traj, &arr.position()) {
                if sv[1] <= tol * sv[0] {
                    out.push(DegenerateCase::CollinearWithArray {
                        array,
                        direction: vecs.column(0).into_owned(),
                    });
                }
            }
        }
        if arr.angles()[1].cos().abs() <= GIMBAL_TOL {
            out.push(DegenerateCase::GimbalLock { array });
        }
    }
    out
}

/// One row of a rank-versus-step trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRow {
    pub step: usize,
    /// `rank(F)` over the first `step` emissions.
    pub rank_f: usize,
    /// `rank(J)` over the first `step` emissions, `rank(F) + 3(step−1)`.
    pub rank: usize,
    /// Columns of `J`, `8(N−1) + 3·step`.
    pub g2: usize,
}

impl TraceRow {
    pub fn deficit(&self) -> usize {
        self.g2 - self.rank
    }

    pub fn full_rank(&self) -> bool {
        self.deficit() == 0
    }
}

/// Per-step rank trace plus the block ranks and failed conditions at the
/// final step.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub n_arrays: usize,
    pub trace: Vec<TraceRow>,
    pub first_full_rank: Option<usize>,
    pub block_ranks: BlockRanks,
    pub necessary: Vec<NecessaryViolation>,
    pub degenerate: Vec<DegenerateCase>,
}

impl RankReport {
    pub fn final_row(&self) -> &TraceRow {
        self.trace.last().expect("trace has at least one step")
    }

    pub fn full_column_rank(&self) -> bool {
        self.final_row().full_rank()
    }
}

/// Ranks of `F` restricted to the first `k` emissions, for every `k`.
pub fn prefix_ranks(f: &DMatrix<f64>, rows_per_step: usize, policy: &RankPolicy) -> Vec<usize> {
    let k_total = f.nrows() / rows_per_step;
    (1..=k_total)
        .map(|k| linalg::numeric_rank(&f.rows(0, k * rows_per_step).into_owned(), policy))
        .collect()
}

/// Rank trace over all prefixes `1..=K`. One SVD per prefix, so the total
/// cost grows quadratically with `K`.
pub fn rank_trace(sc: &Scenario, policy: &RankPolicy) -> Result<RankReport> {
    rank_trace_at(&StateVector::from_scenario(sc), sc.dt(), sc.c(), policy)
}

/// [`rank_trace`] evaluated at an arbitrary state, e.g. a solver estimate.
pub fn rank_trace_at(x: &StateVector, dt: f64, c: f64, policy: &RankPolicy) -> Result<RankReport> {
    let bundle = jacobian::assemble_at(x, dt, c)?;
    let f = f_from_bundle(&bundle);
    let n = bundle.layout.n_arrays;
    let cols = f_cols(n);
    let trace: Vec<TraceRow> = prefix_ranks(&f, bundle.layout.rows_per_step(), policy)
        .into_iter()
        .enumerate()
        .map(|(idx, rank_f)| {
            let step = idx + 1;
            debug_assert!(rank_f <= cols);
            TraceRow {
                step,
                rank_f,
                rank: rank_f + 3 * (step - 1),
                g2: 8 * (n - 1) + 3 * step,
            }
        })
        .collect();
    let first_full_rank = trace.iter().find(|r| r.full_rank()).map(|r| r.step);
    let sources = x.sources();
    let red = reduced_from_bundle(&bundle, &sources, c)?;
    let ranks = block_ranks(&red, policy);
    let necessary = necessary_from(n, bundle.layout.n_steps, &ranks);
    Ok(RankReport {
        n_arrays: n,
        trace,
        first_full_rank,
        block_ranks: ranks,
        necessary,
        degenerate: detect_degenerate_in(&sources, &x.arrays(), GEOMETRY_TOL),
    })
}

/// Everything `check` reports: necessary and sufficient verdicts, geometric
/// diagnoses and the direct ranks of `J`, `F` and `F̄′`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub n_arrays: usize,
    pub n_steps: usize,
    pub rank_j: usize,
    pub g2: usize,
    pub rank_f: usize,
    pub rank_fbar_prime: usize,
    pub block_ranks: BlockRanks,
    pub necessary: Vec<NecessaryViolation>,
    pub sufficient: SufficiencyVerdict,
    pub degenerate: Vec<DegenerateCase>,
}

impl CheckReport {
    pub fn observable(&self) -> bool {
        self.rank_j == self.g2
    }
}

pub fn check(sc: &Scenario, policy: &RankPolicy) -> Result<CheckReport> {
    let bundle = jacobian::assemble(sc)?;
    let red = reduced_from_bundle(&bundle, sc.trajectory(), sc.c())?;
    let ranks = block_ranks(&red, policy);
    let necessary = necessary_from(sc.n_arrays(), sc.n_steps(), &ranks);
    let sufficient = sufficient_from(&red, &ranks, policy);
    Ok(CheckReport {
        n_arrays: sc.n_arrays(),
        n_steps: sc.n_steps(),
        rank_j: linalg::numeric_rank(&bundle.j, policy),
        g2: bundle.layout.state_dim(),
        rank_f: linalg::numeric_rank(&red.f, policy),
        rank_fbar_prime: linalg::numeric_rank(&red.fbar_prime, policy),
        block_ranks: ranks,
        necessary,
        sufficient,
        degenerate: detect_degenerate(sc, GEOMETRY_TOL),
    })
}
