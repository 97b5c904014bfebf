//! Rotation conventions, distances and the DOA/TDOA forward models.
//!
//! # Rotation convention
//!
//! An array's orientation is given by three Euler angles `(θx, θy, θz)`.
//! The rotation taking the reference frame to the array frame is
//!
//! ```text
//! R = Rz(θz) · Ry(θy) · Rx(θx),      Rᵀ = Rxᵀ · Ryᵀ · Rzᵀ
//! ```
//!
//! with the elemental matrices
//!
//! ```text
//! Rx = [1 0 0; 0 cx -sx; 0 sx cx]
//! Ry = [cy 0 sy; 0 1 0; -sy 0 cy]
//! Rz = [cz -sz 0; sz cz 0; 0 0 1]
//! ```
//!
//! A direction measured by an array is expressed in its local frame, so the
//! forward model applies `Rᵀ` to the world-frame offset.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Default speed of sound in air, m/s.
pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

/// Euler angles in radians, normalized so that `θx, θz ∈ [0, 2π)` and
/// `θy ∈ [0, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    x: f64,
    y: f64,
    z: f64,
}

/// Reduce an angle into `[0, 2π)`.
pub fn wrap_two_pi(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can return exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Reduce an angle into `(-π, π]`.
pub fn wrap_pi(a: f64) -> f64 {
    let r = wrap_two_pi(a);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

impl EulerAngles {
    /// Build normalized Euler angles.
    ///
    /// `θx` and `θz` are reduced modulo 2π. `θy` is reduced modulo 2π and must
    /// then lie in `[0, π]`; no rotation-preserving reduction exists for
    /// values in `(π, 2π)` under this convention, so those are rejected.
    /// `θy = π/2` is accepted (it is the gimbal-singular configuration).
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::InvalidConfig("Euler angles must be finite".into()));
        }
        let mut yw = wrap_two_pi(y);
        // values a hair above π from roundoff are snapped back
        if yw > PI && yw - PI < 1e-12 {
            yw = PI;
        }
        if yw > PI {
            return Err(Error::InvalidConfig(format!(
                "theta_y = {y} reduces to {yw}, outside [0, pi]"
            )));
        }
        Ok(Self {
            x: wrap_two_pi(x),
            y: yw,
            z: wrap_two_pi(z),
        })
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl TryFrom<[f64; 3]> for EulerAngles {
    type Error = Error;

    fn try_from(a: [f64; 3]) -> Result<Self> {
        EulerAngles::new(a[0], a[1], a[2])
    }
}

impl From<EulerAngles> for [f64; 3] {
    fn from(e: EulerAngles) -> Self {
        e.as_array()
    }
}

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Matrix3<f64> {
        self.0.transpose()
    }
}

pub(crate) fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub(crate) fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub(crate) fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Derivative of `Rx(a)ᵀ` with respect to `a`.
pub(crate) fn d_rot_x_t(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, c, 0.0, -c, -s)
}

/// Derivative of `Ry(a)ᵀ` with respect to `a`.
pub(crate) fn d_rot_y_t(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, -c, 0.0, 0.0, 0.0, c, 0.0, -s)
}

/// Derivative of `Rz(a)ᵀ` with respect to `a`.
pub(crate) fn d_rot_z_t(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `R = Rz(θz)·Ry(θy)·Rx(θx)` for arbitrary (not necessarily normalized)
/// angles.
pub fn rotation_from_angles(angles: [f64; 3]) -> Rotation3 {
    Rotation3(rot_z(angles[2]) * rot_y(angles[1]) * rot_x(angles[0]))
}

pub fn rotation_from_euler(e: &EulerAngles) -> Rotation3 {
    rotation_from_angles(e.as_array())
}

/// Anything that carries one array's extrinsic parameters.
///
/// Implemented by the validated [`ArrayExtrinsics`] and by the raw
/// [`ArrayParams`] blocks the solver iterates on.
pub trait ArrayPose {
    fn position(&self) -> Vector3<f64>;
    /// Raw Euler angles `[θx, θy, θz]`.
    fn angles(&self) -> [f64; 3];
    fn tau(&self) -> f64;
    fn delta(&self) -> f64;

    fn rotation(&self) -> Rotation3 {
        rotation_from_angles(self.angles())
    }
}

/// One array's unknowns: position (m), orientation, start offset τ (s) and
/// clock drift δ (s/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayExtrinsics {
    pub position: Vector3<f64>,
    pub euler: EulerAngles,
    pub tau: f64,
    pub delta: f64,
}

impl ArrayExtrinsics {
    /// The reference array: every field identically zero.
    pub fn reference() -> Self {
        Self {
            position: Vector3::zeros(),
            euler: EulerAngles::zero(),
            tau: 0.0,
            delta: 0.0,
        }
    }

    pub fn new(position: Vector3<f64>, euler: EulerAngles, tau: f64, delta: f64) -> Self {
        Self {
            position,
            euler,
            tau,
            delta,
        }
    }

    pub fn is_reference(&self) -> bool {
        self.position == Vector3::zeros()
            && self.euler == EulerAngles::zero()
            && self.tau == 0.0
            && self.delta == 0.0
    }

    pub fn params(&self) -> ArrayParams {
        ArrayParams {
            position: self.position,
            angles: self.euler.as_array(),
            tau: self.tau,
            delta: self.delta,
        }
    }
}

impl ArrayPose for ArrayExtrinsics {
    fn position(&self) -> Vector3<f64> {
        self.position
    }
    fn angles(&self) -> [f64; 3] {
        self.euler.as_array()
    }
    fn tau(&self) -> f64 {
        self.tau
    }
    fn delta(&self) -> f64 {
        self.delta
    }
}

/// Raw 8-parameter block `[p; θ; τ; δ]` as laid out in the state vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayParams {
    pub position: Vector3<f64>,
    pub angles: [f64; 3],
    pub tau: f64,
    pub delta: f64,
}

impl ArrayParams {
    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), 8, "array parameter block has 8 entries");
        Self {
            position: Vector3::new(v[0], v[1], v[2]),
            angles: [v[3], v[4], v[5]],
            tau: v[6],
            delta: v[7],
        }
    }

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.angles[0],
            self.angles[1],
            self.angles[2],
            self.tau,
            self.delta,
        ]
    }

    /// Convert to validated extrinsics, normalizing the angles.
    pub fn to_extrinsics(&self) -> Result<ArrayExtrinsics> {
        Ok(ArrayExtrinsics {
            position: self.position,
            euler: EulerAngles::new(self.angles[0], self.angles[1], self.angles[2])?,
            tau: self.tau,
            delta: self.delta,
        })
    }
}

impl ArrayPose for ArrayParams {
    fn position(&self) -> Vector3<f64> {
        self.position
    }
    fn angles(&self) -> [f64; 3] {
        self.angles
    }
    fn tau(&self) -> f64 {
        self.tau
    }
    fn delta(&self) -> f64 {
        self.delta
    }
}

/// Euclidean distance between a source and an array position. Coincident
/// points are a [`Error::DegenerateGeometry`].
pub fn distance(source: &Vector3<f64>, array_pos: &Vector3<f64>) -> Result<f64> {
    let d = (source - array_pos).norm();
    if d > 0.0 && d.is_finite() {
        Ok(d)
    } else {
        Err(Error::degenerate(format!(
            "source {:?} coincides with array position {:?}",
            source.as_slice(),
            array_pos.as_slice()
        )))
    }
}

/// Direction of arrival in the array frame: `Rᵀ (s − p) / d`.
///
/// The result is not re-normalized beyond the division by `d`.
pub fn doa<A: ArrayPose + ?Sized>(arr: &A, source: &Vector3<f64>) -> Result<Vector3<f64>> {
    let p = arr.position();
    let d = distance(source, &p)?;
    Ok(arr.rotation().transpose() * ((source - p) / d))
}

/// Time difference of arrival between array `i` and the reference array at
/// step `k`:
///
/// `d_i/c − d_1/c + τ_i + k·Δt·δ_i`
///
/// `ref_dist` is the source distance to the reference array, `d_1`.
pub fn tdoa<A: ArrayPose + ?Sized>(
    arr: &A,
    ref_dist: f64,
    source: &Vector3<f64>,
    k: usize,
    dt: f64,
    c: f64,
) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "speed of sound must be positive, got {c}"
        )));
    }
    let d = distance(source, &arr.position())?;
    Ok(d / c - ref_dist / c + arr.tau() + k as f64 * dt * arr.delta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    /// Rotate a vector with Rodrigues' formula; independent of the elemental
    /// matrices above.
    fn rodrigues(axis: Vector3<f64>, angle: f64, v: Vector3<f64>) -> Vector3<f64> {
        let k = axis.normalize();
        v * angle.cos() + k.cross(&v) * angle.sin() + k * k.dot(&v) * (1.0 - angle.cos())
    }

    fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
        (r.transpose() * r - Matrix3::identity()).abs().max()
    }

    #[test]
    fn zero_angles_give_identity() {
        let r = rotation_from_euler(&EulerAngles::zero());
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotation_from_euler(&EulerAngles::new(0.0, 0.0, FRAC_PI_2).unwrap());
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r.matrix() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn composition_order_is_z_y_x() {
        let (ax, ay, az) = (0.3, 1.1, 2.2);
        let r = rotation_from_angles([ax, ay, az]);
        let v = Vector3::new(0.2, -0.7, 1.3);
        // R v = Rz(Ry(Rx v))
        let expected = rodrigues(
            Vector3::z(),
            az,
            rodrigues(Vector3::y(), ay, rodrigues(Vector3::x(), ax, v)),
        );
        assert!((r.matrix() * v - expected).norm() < 1e-14);
    }

    #[test]
    fn euler_normalization() {
        let e = EulerAngles::new(-0.5, 2.0 * TAU + 0.25, 7.0).unwrap();
        assert_close!(e.x(), TAU - 0.5, 1e-12);
        assert_close!(e.y(), 0.25, 1e-12);
        assert_close!(e.z(), 7.0 - TAU, 1e-12);
        assert!(EulerAngles::new(0.0, FRAC_PI_2, 0.0).is_ok());
        assert!(EulerAngles::new(0.0, PI, 0.0).is_ok());
        assert!(matches!(
            EulerAngles::new(0.0, 4.0, 0.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(EulerAngles::new(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn distance_examples() {
        let d = distance(&Vector3::new(3.0, 4.0, 0.0), &Vector3::zeros()).unwrap();
        assert_eq!(d, 5.0);
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert!(matches!(
            distance(&p, &p),
            Err(Error::DegenerateGeometry { .. })
        ));
    }

    #[test]
    fn doa_reference_frame() {
        let arr = ArrayExtrinsics::reference();
        let u = doa(&arr, &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(u, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn doa_rotated_about_z() {
        let arr = ArrayExtrinsics::new(
            Vector3::zeros(),
            EulerAngles::new(0.0, 0.0, FRAC_PI_2).unwrap(),
            0.0,
            0.0,
        );
        let u = doa(&arr, &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        // the array frame is the world frame rotated by +π/2 about z, so a
        // world-frame vector is seen rotated by −π/2
        let oracle = rodrigues(Vector3::z(), -FRAC_PI_2, Vector3::x());
        assert!((u - oracle).norm() < 1e-15);
        assert!((u - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn doa_coincident_is_error() {
        let arr = ArrayExtrinsics::reference();
        assert!(doa(&arr, &Vector3::zeros()).is_err());
    }

    fn equidistant_pair(delta: f64, tau: f64) -> (ArrayExtrinsics, Vector3<f64>) {
        // array 2 mirrored through the plane x = 1 relative to the origin
        let arr =
            ArrayExtrinsics::new(Vector3::new(2.0, 0.0, 0.0), EulerAngles::zero(), tau, delta);
        (arr, Vector3::new(1.0, 0.7, -0.3))
    }

    #[test]
    fn tdoa_examples() {
        let (arr, s) = equidistant_pair(0.0, 0.0);
        let d1 = s.norm();
        assert_close!(tdoa(&arr, d1, &s, 1, 1.0, 343.0).unwrap(), 0.0, 1e-15);

        let (arr, s) = equidistant_pair(0.0, 0.05);
        assert_close!(tdoa(&arr, d1, &s, 1, 1.0, 343.0).unwrap(), 0.05, 1e-15);

        let (arr, s) = equidistant_pair(1e-4, 0.0);
        let got = tdoa(&arr, d1, &s, 3, 1.0, 343.0).unwrap();
        let oracle = (s - arr.position).norm() / 343.0 - d1 / 343.0 + 0.0 + 3.0 * 1.0 * 1e-4;
        assert_close!(got, oracle, 1e-18);
        assert_close!(got, 3e-4, 1e-15);
    }

    #[test]
    fn tdoa_rejects_bad_speed() {
        let (arr, s) = equidistant_pair(0.0, 0.0);
        assert!(matches!(
            tdoa(&arr, 1.0, &s, 1, 1.0, 0.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(tdoa(&arr, 1.0, &s, 1, 1.0, -1.0).is_err());
    }

    fn angle() -> impl Strategy<Value = f64> {
        -10.0..10.0f64
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn rotation_is_proper(ax in angle(), ay in angle(), az in angle()) {
            let r = rotation_from_angles([ax, ay, az]);
            prop_assert!(orthonormality_error(r.matrix()) < 1e-12);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn distance_matches_component_sum(s in vec3(), p in vec3()) {
            prop_assume!((s - p).norm() > 1e-9);
            let oracle = ((s.x - p.x).powi(2) + (s.y - p.y).powi(2) + (s.z - p.z).powi(2)).sqrt();
            prop_assert!((distance(&s, &p).unwrap() - oracle).abs() <= 1e-14 * oracle.max(1.0));
        }

        #[test]
        fn doa_unit_norm_and_scale_invariant(
            ax in angle(), ay in 0.0..PI, az in angle(),
            p in vec3(), s in vec3(), lambda in 0.01..100.0f64,
        ) {
            prop_assume!((s - p).norm() > 1e-6);
            let arr = ArrayExtrinsics::new(p, EulerAngles::new(ax, ay, az).unwrap(), 0.0, 0.0);
            let u = doa(&arr, &s).unwrap();
            prop_assert!((u.norm() - 1.0).abs() < 1e-12);
            let scaled = p + (s - p) * lambda;
            let v = doa(&arr, &scaled).unwrap();
            prop_assert!((u - v).norm() < 1e-12);
        }

        #[test]
        fn tdoa_affine_in_clock_terms(
            p in vec3(), s in vec3(), tau in -0.1..0.1f64, delta in -1e-3..1e-3f64,
            a in -0.1..0.1f64, b in -1e-3..1e-3f64, k in 1usize..50, dt in 0.1..2.0f64,
        ) {
            prop_assume!((s - p).norm() > 1e-6 && s.norm() > 1e-6);
            let base = ArrayParams { position: p, angles: [0.0; 3], tau, delta };
            let moved = ArrayParams { tau: tau + a, delta: delta + b, ..base };
            let d1 = s.norm();
            let t0 = tdoa(&base, d1, &s, k, dt, 343.0).unwrap();
            let t1 = tdoa(&moved, d1, &s, k, dt, 343.0).unwrap();
            prop_assert!(((t1 - t0) - (a + k as f64 * dt * b)).abs() < 1e-14);
        }
    }
}
