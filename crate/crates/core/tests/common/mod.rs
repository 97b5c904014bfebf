#![allow(dead_code)]

use arraycal::geometry::{ArrayExtrinsics, EulerAngles};
use arraycal::scenario::{self, ExtrinsicsBounds, ObservableTrajectory, Plane, Scenario};
use nalgebra::Vector3;

pub const C: f64 = 343.0;

pub fn arrays(n: usize, seed: u64) -> Vec<ArrayExtrinsics> {
    scenario::random_extrinsics(n, &ExtrinsicsBounds::default(), seed).unwrap()
}

pub fn observable(n: usize, k: usize, seed: u64) -> Scenario {
    let traj = scenario::gen_observable_trajectory(&ObservableTrajectory {
        steps: k,
        ..Default::default()
    })
    .unwrap();
    Scenario::new(arrays(n, seed), traj, 1.0, C, seed).unwrap()
}

pub fn collinear_origin(n: usize, k: usize, seed: u64) -> Scenario {
    let dir = Vector3::new(0.12, 0.08, 0.05);
    let traj = scenario::gen_collinear_origin(k, &dir).unwrap();
    Scenario::new(arrays(n, seed), traj, 1.0, C, seed).unwrap()
}

pub fn planar(n: usize, k: usize, plane: Plane, seed: u64) -> Scenario {
    let traj = scenario::gen_planar(k, plane);
    Scenario::new(arrays(n, seed), traj, 1.0, C, seed).unwrap()
}

pub fn collinear_array(n: usize, k: usize, array: usize, seed: u64) -> Scenario {
    let arrs = arrays(n, seed);
    let dir = Vector3::new(-0.06, 0.05, 0.04);
    let traj = scenario::gen_collinear_with_array(k, &arrs[array - 1], &dir).unwrap();
    Scenario::new(arrs, traj, 1.0, C, seed).unwrap()
}

/// Observable trajectory, but array `array` is pitched to exactly π/2.
pub fn gimbal(n: usize, k: usize, array: usize, seed: u64) -> Scenario {
    let mut arrs = arrays(n, seed);
    let e = arrs[array - 1].euler;
    arrs[array - 1].euler = EulerAngles::new(e.x(), std::f64::consts::FRAC_PI_2, e.z()).unwrap();
    let traj = scenario::gen_observable_trajectory(&ObservableTrajectory {
        steps: k,
        ..Default::default()
    })
    .unwrap();
    Scenario::new(arrs, traj, 1.0, C, seed).unwrap()
}
