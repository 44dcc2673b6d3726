//! Model catalog: the planar single integrator and the three-wheel omni robot.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Metric;
use crate::sde::{FrameSymmetry, SdeModel};

/// `dq = u dt + σ dW` in the plane.
pub fn single_integrator_2d(sigma: f64) -> SdeModel<2, 2> {
    SdeModel::new(
        "single_integrator_2d",
        |_| Vector2::zeros(),
        |_| Matrix2::identity(),
        move |_| Matrix2::identity() * sigma,
    )
    .with_symmetry(FrameSymmetry::Translation)
}

/// Geometry and noise of the omni-directional robot. `delta` and
/// `wheel_base` (L) are not pinned by any measurement; the defaults are
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmniParams {
    /// Wheel mounting angle δ (rad).
    pub delta: f64,
    /// Center-to-wheel distance L (m).
    pub wheel_base: f64,
    /// Diagonal entry of Σ.
    pub sigma: f64,
}

impl Default for OmniParams {
    fn default() -> Self {
        Self { delta: PI / 6.0, wheel_base: 0.2, sigma: 0.2 }
    }
}

/// Maps wheel velocities `(U1, U2, U3)` to `(ẋ, ẏ, θ̇)` at heading `theta`.
pub fn omni_control_matrix(theta: f64, delta: f64, wheel_base: f64) -> Matrix3<f64> {
    let k = 2.0 / 3.0;
    let w = 1.0 / (3.0 * wheel_base);
    Matrix3::new(
        k * (theta + delta).cos(),
        -k * (theta - delta).cos(),
        k * theta.sin(),
        k * (theta + delta).sin(),
        -k * (theta - delta).sin(),
        -k * theta.cos(),
        w,
        w,
        w,
    )
}

/// Omni robot with state `(x, y, θ)` and wheel-velocity inputs.
pub fn omni_robot(params: &OmniParams) -> SdeModel<3, 3> {
    let OmniParams { delta, wheel_base, sigma } = *params;
    SdeModel::new(
        "omni_robot",
        |_| Vector3::zeros(),
        move |q| omni_control_matrix(q[2], delta, wheel_base),
        move |_| Matrix3::identity() * sigma,
    )
    .with_symmetry(FrameSymmetry::PlanarRigid)
}

/// Metric natural to each catalog model's state space.
pub fn metric_for(name: &str) -> Option<Metric> {
    match name {
        "single_integrator_2d" => Some(Metric::Euclidean),
        "omni_robot" => Some(Metric::Se2Embedded),
        _ => None,
    }
}
