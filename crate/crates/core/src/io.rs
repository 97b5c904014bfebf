//! File formats: TOML for scenarios, measurements and states; CSV for
//! matrices and traces.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! file parses back to bit-identical values.
//!
//! Scenario file:
//!
//! ```toml
//! dt = 1.0              # seconds between emissions
//! c = 343.0             # speed of sound, m/s (optional, default 343)
//! seed = 7              # noise seed (optional, default 0)
//!
//! [noise]               # optional; either sigmas or full p/q matrices
//! sigma_tdoa = 1e-4
//! sigma_doa = 0.01
//! sigma_odometry = 1e-3
//!
//! [[arrays]]            # first entry is the reference: all zeros
//! position = [0.0, 0.0, 0.0]
//! euler = [0.0, 0.0, 0.0]
//! tau = 0.0
//! delta = 0.0
//!
//! [trajectory]          # kind = points | observable | collinear-origin
//! kind = "points"       #        | planar | collinear-array
//! points = [[1.0, 0.5, 0.2], [1.1, 0.5, 0.3]]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ArrayExtrinsics, ArrayParams, EulerAngles, DEFAULT_SPEED_OF_SOUND};
use crate::jacobian::StateVector;
use crate::scenario::{
    self, MeasurementSet, NoiseModel, NoiseSigmas, ObservableTrajectory, Plane, Scenario,
};

/// How the trajectory of a scenario file is given.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectorySpec {
    Points(Vec<Vector3<f64>>),
    Observable(ObservableTrajectory),
    CollinearOrigin {
        steps: usize,
        direction: Vector3<f64>,
    },
    Planar {
        steps: usize,
        plane: Plane,
    },
    /// Ray from array `array` (1-based) along `direction`.
    CollinearArray {
        steps: usize,
        array: usize,
        direction: Vector3<f64>,
    },
}

impl TrajectorySpec {
    pub fn generate(&self, arrays: &[ArrayExtrinsics]) -> Result<Vec<Vector3<f64>>> {
        match self {
            TrajectorySpec::Points(p) => Ok(p.clone()),
            TrajectorySpec::Observable(o) => scenario::gen_observable_trajectory(o),
            TrajectorySpec::CollinearOrigin { steps, direction } => {
                scenario::gen_collinear_origin(*steps, direction)
            }
            TrajectorySpec::Planar { steps, plane } => Ok(scenario::gen_planar(*steps, *plane)),
            TrajectorySpec::CollinearArray {
                steps,
                array,
                direction,
            } => {
                let arr = arrays.get(array.wrapping_sub(1)).ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "trajectory.array = {array} but there are {} arrays",
                        arrays.len()
                    ))
                })?;
                scenario::gen_collinear_with_array(*steps, arr, direction)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Sigmas(NoiseSigmas),
    Full { p: DMatrix<f64>, q: DMatrix<f64> },
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Sigmas(NoiseSigmas::default())
    }
}

impl NoiseSpec {
    pub fn model(&self, n_arrays: usize) -> Result<NoiseModel> {
        match self {
            NoiseSpec::Sigmas(s) => NoiseModel::diagonal(n_arrays, s),
            NoiseSpec::Full { p, q } => {
                let nm = NoiseModel::new(p.clone(), q.clone())?;
                if nm.n_arrays() != n_arrays {
                    return Err(Error::InvalidConfig(format!(
                        "noise.p is {0}x{0}, expected {1}x{1}",
                        p.nrows(),
                        4 * (n_arrays - 1)
                    )));
                }
                Ok(nm)
            }
        }
    }
}

/// A parsed scenario file: the world plus how it was specified.
#[derive(Debug, Clone)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub noise: NoiseSpec,
    pub trajectory: TrajectorySpec,
}

impl ScenarioFile {
    pub fn noise_model(&self) -> Result<NoiseModel> {
        self.noise.model(self.scenario.n_arrays())
    }

    pub fn to_toml_string(&self) -> String {
        let sc = &self.scenario;
        let dto = ScenarioDto {
            n_arrays: Some(sc.n_arrays()),
            n_steps: Some(sc.n_steps()),
            dt: sc.dt(),
            c: Some(sc.c()),
            seed: Some(sc.seed()),
            noise: Some(NoiseDto::from(&self.noise)),
            arrays: sc
                .arrays()
                .iter()
                .map(|a| ArrayDto {
                    position: a.position.into(),
                    euler: a.euler.as_array(),
                    tau: a.tau,
                    delta: a.delta,
                })
                .collect(),
            trajectory: TrajectoryDto::from(&self.trajectory),
        };
        toml::to_string(&dto).expect("scenario serializes")
    }

    /// Same scenario with a different noise seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario = self.scenario.with_seed(seed);
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_arrays: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_steps: Option<usize>,
    dt: f64,
    #[serde(default)]
    c: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    noise: Option<NoiseDto>,
    arrays: Vec<ArrayDto>,
    trajectory: TrajectoryDto,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_tdoa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_doa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_odometry: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<Vec<f64>>>,
}

impl From<&NoiseSpec> for NoiseDto {
    fn from(n: &NoiseSpec) -> Self {
        match n {
            NoiseSpec::Sigmas(s) => NoiseDto {
                sigma_tdoa: Some(s.tdoa),
                sigma_doa: Some(s.doa),
                sigma_odometry: Some(s.odometry),
                p: None,
                q: None,
            },
            NoiseSpec::Full { p, q } => NoiseDto {
                sigma_tdoa: None,
                sigma_doa: None,
                sigma_odometry: None,
                p: Some(matrix_rows(p)),
                q: Some(matrix_rows(q)),
            },
        }
    }
}

impl NoiseDto {
    fn into_spec(self) -> Result<NoiseSpec> {
        match (self.p, self.q) {
            (Some(p), Some(q)) => {
                if self.sigma_tdoa.is_some()
                    || self.sigma_doa.is_some()
                    || self.sigma_odometry.is_some()
                {
                    return Err(field_error("noise", "give either sigmas or p/q, not both"));
                }
                Ok(NoiseSpec::Full {
                    p: rows_matrix(&p, "noise.p")?,
                    q: rows_matrix(&q, "noise.q")?,
                })
            }
            (None, None) => {
                let d = NoiseSigmas::default();
                let s = NoiseSigmas {
                    tdoa: self.sigma_tdoa.unwrap_or(d.tdoa),
                    doa: self.sigma_doa.unwrap_or(d.doa),
                    odometry: self.sigma_odometry.unwrap_or(d.odometry),
                };
                for (name, v) in [
                    ("noise.sigma_tdoa", s.tdoa),
                    ("noise.sigma_doa", s.doa),
                    ("noise.sigma_odometry", s.odometry),
                ] {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(field_error(name, &format!("must be positive, got {v}")));
                    }
                }
                Ok(NoiseSpec::Sigmas(s))
            }
            _ => Err(field_error("noise", "p and q must be given together")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayDto {
    position: [f64; 3],
    #[serde(default)]
    euler: [f64; 3],
    #[serde(default)]
    tau: f64,
    #[serde(default)]
    delta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum TrajectoryDto {
    Points {
        points: Vec<[f64; 3]>,
    },
    /// Omitted fields take the default zig-zag's values.
    Observable {
        steps: usize,
        #[serde(default)]
        start: Option<[f64; 3]>,
        #[serde(default)]
        speed: Option<f64>,
        #[serde(default)]
        step_time: Option<f64>,
        #[serde(default)]
        directions: Option<Vec<[f64; 3]>>,
    },
    CollinearOrigin {
        steps: usize,
        direction: [f64; 3],
    },
    Planar {
        steps: usize,
        plane: PlaneKind,
        coefficient: f64,
    },
    CollinearArray {
        steps: usize,
        array: usize,
        direction: [f64; 3],
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PlaneKind {
    XAlphaY,
    XBetaZ,
    YGammaZ,
}

impl From<&TrajectorySpec> for TrajectoryDto {
    fn from(t: &TrajectorySpec) -> Self {
        match t {
            TrajectorySpec::Points(p) => TrajectoryDto::Points {
                points: p.iter().map(|v| (*v).into()).collect(),
            },
            TrajectorySpec::Observable(o) => TrajectoryDto::Observable {
                steps: o.steps,
                start: Some(o.start.into()),
                speed: Some(o.speed),
                step_time: Some(o.dt),
                directions: Some(o.directions.iter().map(|v| (*v).into()).collect()),
            },
            TrajectorySpec::CollinearOrigin { steps, direction } => {
                TrajectoryDto::CollinearOrigin {
                    steps: *steps,
                    direction: (*direction).into(),
                }
            }
            TrajectorySpec::Planar { steps, plane } => {
                let kind = match plane {
                    Plane::XAlphaY(_) => PlaneKind::XAlphaY,
                    Plane::XBetaZ(_) => PlaneKind::XBetaZ,
                    Plane::YGammaZ(_) => PlaneKind::YGammaZ,
                };
                TrajectoryDto::Planar {
                    steps: *steps,
                    plane: kind,
                    coefficient: plane.coefficient(),
                }
            }
            TrajectorySpec::CollinearArray {
                steps,
                array,
                direction,
            } => TrajectoryDto::CollinearArray {
                steps: *steps,
                array: *array,
                direction: (*direction).into(),
            },
        }
    }
}

impl From<TrajectoryDto> for TrajectorySpec {
    fn from(t: TrajectoryDto) -> Self {
        match t {
            TrajectoryDto::Points { points } => {
                TrajectorySpec::Points(points.into_iter().map(Vector3::from).collect())
            }
            TrajectoryDto::Observable {
                steps,
                start,
                speed,
                step_time,
                directions,
            } => {
                let d = ObservableTrajectory::default();
                TrajectorySpec::Observable(ObservableTrajectory {
                    steps,
                    start: start.map_or(d.start, Vector3::from),
                    speed: speed.unwrap_or(d.speed),
                    dt: step_time.unwrap_or(d.dt),
                    directions: directions
                        .map_or(d.directions, |v| v.into_iter().map(Vector3::from).collect()),
                })
            }
            TrajectoryDto::CollinearOrigin { steps, direction } => {
                TrajectorySpec::CollinearOrigin {
                    steps,
                    direction: direction.into(),
                }
            }
            TrajectoryDto::Planar {
                steps,
                plane,
                coefficient,
            } => TrajectorySpec::Planar {
                steps,
                plane: match plane {
                    PlaneKind::XAlphaY => Plane::XAlphaY(coefficient),
                    PlaneKind::XBetaZ => Plane::XBetaZ(coefficient),
                    PlaneKind::YGammaZ => Plane::YGammaZ(coefficient),
                },
            },
            TrajectoryDto::CollinearArray {
                steps,
                array,
                direction,
            } => TrajectorySpec::CollinearArray {
                steps,
                array,
                direction: direction.into(),
            },
        }
    }
}

fn field_error(field: &str, detail: &str) -> Error {
    Error::InvalidConfig(format!("{field}: {detail}"))
}

fn with_field(field: String) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidConfig(d) => Error::InvalidConfig(format!("{field}: {d}")),
        other => other,
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(field_error(field, "rows have different lengths"));
    }
    Ok(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        what: what.to_string(),
        detail: e.to_string().trim_end().to_string(),
    })
}

/// Parse a scenario file's text. `what` names the source in messages.
pub fn parse_scenario(text: &str, what: &str) -> Result<ScenarioFile> {
    let dto: ScenarioDto = parse_toml(text, what)?;
    let arrays: Vec<ArrayExtrinsics> = dto
        .arrays
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let euler = EulerAngles::new(a.euler[0], a.euler[1], a.euler[2])
                .map_err(with_field(format!("arrays[{i}].euler")))?;
            Ok(ArrayExtrinsics::new(
                a.position.into(),
                euler,
                a.tau,
                a.delta,
            ))
        })
        .collect::<Result<_>>()?;
    if let Some(n) = dto.n_arrays {
        if n != arrays.len() {
            return Err(field_error(
                "n_arrays",
                &format!("{n} does not match the {} [[arrays]] entries", arrays.len()),
            ));
        }
    }
    let trajectory = TrajectorySpec::from(dto.trajectory);
    let points = trajectory
        .generate(&arrays)
        .map_err(with_field("trajectory".into()))?;
    if let Some(k) = dto.n_steps {
        if k != points.len() {
            return Err(field_error(
                "n_steps",
                &format!(
                    "{k} does not match the trajectory's {} points",
                    points.len()
                ),
            ));
        }
    }
    let noise = dto
        .noise
        .map_or(Ok(NoiseSpec::default()), NoiseDto::into_spec)?;
    let scenario = Scenario::new(
        arrays,
        points,
        dto.dt,
        dto.c.unwrap_or(DEFAULT_SPEED_OF_SOUND),
        dto.seed.unwrap_or(0),
    )?;
    noise.model(scenario.n_arrays())?;
    Ok(ScenarioFile {
        scenario,
        noise,
        trajectory,
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn load_scenario(path: &Path) -> Result<ScenarioFile> {
    parse_scenario(&read_text(path)?, &path.display().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasurementDto {
    n_arrays: usize,
    n_steps: usize,
    /// One row per step: `[T_21, d_21 (3), …, T_N1, d_N1 (3)]`.
    y: Vec<Vec<f64>>,
    /// One row per step transition.
    odometry: Vec<[f64; 3]>,
}

pub fn measurements_to_toml(m: &MeasurementSet) -> String {
    let dto = MeasurementDto {
        n_arrays: m.n_arrays(),
        n_steps: m.n_steps(),
        y: m.y().iter().map(|v| v.iter().copied().collect()).collect(),
        odometry: m.odometry().iter().map(|v| (*v).into()).collect(),
    };
    toml::to_string(&dto).expect("measurements serialize")
}

pub fn parse_measurements(text: &str, what: &str) -> Result<MeasurementSet> {
    let dto: MeasurementDto = parse_toml(text, what)?;
    if dto.y.len() != dto.n_steps {
        return Err(field_error(
            "y",
            &format!("{} rows but n_steps = {}", dto.y.len(), dto.n_steps),
        ));
    }
    MeasurementSet::new(
        dto.n_arrays,
        dto.y.into_iter().map(DVector::from_vec).collect(),
        dto.odometry.into_iter().map(Vector3::from).collect(),
    )
}

pub fn load_measurements(path: &Path) -> Result<MeasurementSet> {
    parse_measurements(&read_text(path)?, &path.display().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDto {
    n_arrays: usize,
    n_steps: usize,
    arrays: Vec<StateArrayDto>,
    sources: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateArrayDto {
    index: usize,
    position: [f64; 3],
    euler: [f64; 3],
    tau: f64,
    delta: f64,
}

/// State file: one `[[arrays]]` entry per non-reference array (angles kept
/// exactly as in the state vector) and the source track.
pub fn state_to_toml(x: &StateVector) -> String {
    let layout = x.layout();
    let dto = StateDto {
        n_arrays: layout.n_arrays,
        n_steps: layout.n_steps,
        arrays: (2..=layout.n_arrays)
            .map(|i| {
                let a = x.array(i);
                StateArrayDto {
                    index: i,
                    position: a.position.into(),
                    euler: a.angles,
                    tau: a.tau,
                    delta: a.delta,
                }
            })
            .collect(),
        sources: x.sources().into_iter().map(Into::into).collect(),
    };
    toml::to_string(&dto).expect("state serializes")
}

pub fn parse_state(text: &str, what: &str) -> Result<StateVector> {
    let dto: StateDto = parse_toml(text, what)?;
    if dto.n_arrays < 2 || dto.arrays.len() != dto.n_arrays - 1 {
        return Err(field_error(
            "arrays",
            &format!("need n_arrays - 1 entries, got {}", dto.arrays.len()),
        ));
    }
    if dto.sources.len() != dto.n_steps {
        return Err(field_error(
            "sources",
            &format!("{} points but n_steps = {}", dto.sources.len(), dto.n_steps),
        ));
    }
    let arrays: Vec<ArrayParams> = dto
        .arrays
        .iter()
        .enumerate()
        .map(|(j, a)| {
            if a.index != j + 2 {
                return Err(field_error(
                    &format!("arrays[{j}].index"),
                    &format!("expected {}, got {}", j + 2, a.index),
                ));
            }
            Ok(ArrayParams {
                position: a.position.into(),
                angles: a.euler,
                tau: a.tau,
                delta: a.delta,
            })
        })
        .collect::<Result<_>>()?;
    let sources: Vec<Vector3<f64>> = dto.sources.into_iter().map(Vector3::from).collect();
    Ok(StateVector::from_parts(&arrays, &sources))
}

pub fn load_state(path: &Path) -> Result<StateVector> {
    parse_state(&read_text(path)?, &path.display().to_string())
}

/// Shortest decimal that parses back to the same `f64`; exponent form for
/// very large or small magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io {
        path: "<csv>".into(),
        detail: e.to_string(),
    }
}

/// CSV writer over any sink, optionally with a header row.
pub fn write_csv<W: Write>(
    sink: W,
    header: Option<&[&str]>,
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(sink);
    if let Some(h) = header {
        w.write_record(h).map_err(csv_error)?;
    }
    for r in rows {
        w.write_record(&r).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<csv>".into(),
        detail: e.to_string(),
    })
}

/// Row-major matrix dump without a header.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut buf = Vec::new();
    write_csv(
        &mut buf,
        None,
        m.row_iter()
            .map(|r| r.iter().map(|&v| fmt_f64(v)).collect()),
    )
    .expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn parse_matrix_csv(text: &str, what: &str) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            what: what.into(),
            detail: e.to_string(),
        })?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    what: what.into(),
                    detail: format!("row {}, column {}: {e}", i + 1, j + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    rows_matrix(&rows, what)
}

/// Write `contents` to `path`, creating parent directories. Existing files
/// are only replaced when `force` is set.
pub fn write_output(path: &Path, contents: &[u8], force: bool) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    if path.exists() && !force {
        return Err(Error::Io {
            path: path.display().to_string(),
            detail: "file exists; pass --force to overwrite".into(),
        });
    }
    fs::write(path, contents).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ObservableTrajectory;
    use proptest::prelude::*;

    const SAMPLE: &str = r#"
dt = 1.0
c = 343.0
seed = 11

[noise]
sigma_tdoa = 1e-4
sigma_doa = 0.01
sigma_odometry = 1e-3

[[arrays]]
position = [0.0, 0.0, 0.0]

[[arrays]]
position = [2.0, -1.0, 0.5]
euler = [0.3, 1.2, 5.9]
tau = 0.02
delta = 3e-5

[[arrays]]
position = [-1.5, 2.0, 1.0]
euler = [-0.4, 0.7, 7.0]
tau = 0.05
delta = 1e-5

[trajectory]
kind = "observable"
steps = 8
start = [1.2, 0.9, 0.6]
speed = 0.1
step_time = 1.0
directions = [[1.0, 0.3, 0.2], [0.2, 1.0, -0.3], [-0.3, 0.25, 1.0]]
"#;

    #[test]
    fn scenario_parses_and_normalizes() {
        let f = parse_scenario(SAMPLE, "sample").unwrap();
        assert_eq!(f.scenario.n_arrays(), 3);
        assert_eq!(f.scenario.n_steps(), 8);
        assert_eq!(f.scenario.seed(), 11);
        let e = f.scenario.arrays()[2].euler;
        assert!((e.x() - (std::f64::consts::TAU - 0.4)).abs() < 1e-15);
        assert!(e.z() < std::f64::consts::TAU);
        assert!(matches!(f.trajectory, TrajectorySpec::Observable(_)));
    }

    #[test]
    fn scenario_round_trip_is_lossless() {
        let f = parse_scenario(SAMPLE, "sample").unwrap();
        let text = f.to_toml_string();
        let g = parse_scenario(&text, "round trip").unwrap();
        assert_eq!(g.to_toml_string(), text);
        assert_eq!(g.scenario.arrays(), f.scenario.arrays());
        assert_eq!(g.scenario.trajectory(), f.scenario.trajectory());
        assert_eq!(g.trajectory, f.trajectory);
        assert_eq!(g.noise, f.noise);
    }

    #[test]
    fn every_trajectory_kind_round_trips() {
        let base = parse_scenario(SAMPLE, "sample").unwrap();
        let specs = vec![
            TrajectorySpec::Points(vec![
                Vector3::new(1.0, 0.1, 0.2),
                Vector3::new(0.1 + 0.2, 1e-7, 3.0),
            ]),
            TrajectorySpec::Observable(ObservableTrajectory::default()),
            TrajectorySpec::CollinearOrigin {
                steps: 6,
                direction: Vector3::new(0.1, 0.2, 0.3),
            },
            TrajectorySpec::Planar {
                steps: 7,
                plane: Plane::YGammaZ(0.4),
            },
            TrajectorySpec::CollinearArray {
                steps: 5,
                array: 2,
                direction: Vector3::new(0.05, 0.1, -0.02),
            },
        ];
        for t in specs {
            let points = t.generate(base.scenario.arrays()).unwrap();
            let f = ScenarioFile {
                scenario: base.scenario.with_trajectory(points).unwrap(),
                noise: base.noise.clone(),
                trajectory: t.clone(),
            };
            let g = parse_scenario(&f.to_toml_string(), "kind").unwrap();
            assert_eq!(g.trajectory, t);
            assert_eq!(g.scenario.trajectory(), f.scenario.trajectory());
        }
    }

    #[test]
    fn full_noise_matrices_round_trip() {
        let base = parse_scenario(SAMPLE, "sample").unwrap();
        let p = DMatrix::from_fn(8, 8, |i, j| {
            if i == j {
                1e-4
            } else if i + j == 7 {
                1e-6
            } else {
                0.0
            }
        });
        let f = ScenarioFile {
            noise: NoiseSpec::Full {
                p: p.clone(),
                q: DMatrix::identity(3, 3) * 1e-6,
            },
            ..base
        };
        let g = parse_scenario(&f.to_toml_string(), "full").unwrap();
        assert_eq!(g.noise, f.noise);
        assert!(g.noise_model().is_ok());
    }

    #[test]
    fn field_level_errors() {
        let bad_euler = SAMPLE.replace("euler = [0.3, 1.2, 5.9]", "euler = [0.3, 4.0, 5.9]");
        let e = parse_scenario(&bad_euler, "s").unwrap_err().to_string();
        assert!(e.contains("arrays[1].euler"), "{e}");

        let typo = SAMPLE.replace("tau = 0.02", "tua = 0.02");
        let e = parse_scenario(&typo, "s").unwrap_err();
        match e {
            Error::Parse { detail, .. } => assert!(
                detail.contains("tua") && detail.contains("line"),
                "{detail}"
            ),
            other => panic!("{other:?}"),
        }

        let wrong_type = SAMPLE.replace("dt = 1.0", "dt = \"one\"");
        assert!(matches!(
            parse_scenario(&wrong_type, "s"),
            Err(Error::Parse { .. })
        ));

        let bad_sigma = SAMPLE.replace("sigma_doa = 0.01", "sigma_doa = -0.01");
        let e = parse_scenario(&bad_sigma, "s").unwrap_err().to_string();
        assert!(e.contains("noise.sigma_doa"), "{e}");

        let bad_ref = SAMPLE.replacen(
            "position = [0.0, 0.0, 0.0]",
            "position = [0.1, 0.0, 0.0]",
            1,
        );
        assert!(parse_scenario(&bad_ref, "s").is_err());

        let bad_count = format!("n_steps = 9\n{SAMPLE}");
        let e = parse_scenario(&bad_count, "s").unwrap_err().to_string();
        assert!(e.contains("n_steps"), "{e}");
    }

    #[test]
    fn measurement_and_state_round_trip() {
        let f = parse_scenario(SAMPLE, "sample").unwrap();
        let nm = f.noise_model().unwrap();
        let m = scenario::synthesize(&f.scenario, &nm).unwrap();
        let text = measurements_to_toml(&m);
        assert_eq!(parse_measurements(&text, "m").unwrap(), m);

        let mut x = StateVector::from_scenario(&f.scenario);
        x.values_mut()[3] = -0.25; // raw, un-normalized angle survives
        let text = state_to_toml(&x);
        assert_eq!(parse_state(&text, "x").unwrap(), x);
    }

    #[test]
    fn matrix_csv_round_trip_and_overwrite_guard() {
        let m = DMatrix::from_row_slice(
            2,
            3,
            &[1.0 / 3.0, -2.5e-12, 0.0, 1e300, 7.0, f64::MIN_POSITIVE],
        );
        let text = matrix_to_csv(&m);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_matrix_csv(&text, "m").unwrap(), m);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.csv");
        write_output(&p, b"a", false).unwrap();
        assert!(write_output(&p, b"b", false).is_err());
        write_output(&p, b"b", true).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"b");
    }

    proptest! {
        #[test]
        fn fmt_f64_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
