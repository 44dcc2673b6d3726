//! Fixtures shared by the benchmarks.

use srhc_core::control::{AnnulusSolutionMode, AnnulusValueField, ExitController};
use srhc_core::geometry::{AnnulusDomain, Metric, Obstacle, SphereWorld};
use srhc_core::models::single_integrator_2d;
use srhc_core::planner::NavFunction;

pub type PlanarController = ExitController<2, 2, AnnulusValueField>;

/// Unit annulus around the origin with goal radius 0.1.
pub fn unit_annulus() -> AnnulusDomain {
    AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).expect("valid annulus")
}

pub fn harmonic_controller(u_max: Option<f64>) -> PlanarController {
    let field = AnnulusValueField::new(unit_annulus(), AnnulusSolutionMode::Harmonic).expect("valid field");
    ExitController::new(single_integrator_2d(1.0), field, u_max).expect("valid controller")
}

/// Two small obstacles in a radius-10 disk.
pub fn two_obstacle_nav() -> NavFunction {
    let world = SphereWorld::new(
        10.0,
        vec![Obstacle { center: [-3.0, -1.0], radius: 0.2 }, Obstacle { center: [-2.0, -2.0], radius: 0.2 }],
    )
    .expect("valid world");
    NavFunction::new(world, 4, Metric::Euclidean).expect("valid navigation function")
}
