//! Exit-time optimal controllers.
//!
//! With the value function `V = −log g`, where `g(q)` is the probability that
//! the unforced process started at `q` leaves the domain through the goal
//! boundary `N` rather than the forbidden boundary `M`, the optimal feedback is
//!
//! ```text
//! u*(q) = −a(q) Gᵀ(q) ∂V(q) = a(q) Gᵀ(q) ∇g(q) / g(q),    a = Σ Σᵀ
//! ```
//!
//! On an annulus with the driftless isotropic model, `g` has a closed form.
//! Two are provided: the true harmonic measure and the linear profile
//! `(R − r)/(R − ε)`. The linear profile does not solve Laplace's equation in
//! the plane, so only the harmonic one is exit-time optimal there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{planar_distance, AnnulusDomain, Metric, SphereWorld};
use crate::sde::{Control, Controller, Input, SdeModel, State};

/// Floor applied to `g` before dividing or taking logs.
pub const G_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnnulusSolutionMode {
    /// `g(r) = (R − r)/(R − ε)`.
    PaperLinear,
    /// Radial harmonic function with `g(ε) = 1`, `g(R) = 0`.
    #[default]
    Harmonic,
}

impl AnnulusSolutionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnnulusSolutionMode::PaperLinear => "paper_linear",
            AnnulusSolutionMode::Harmonic => "harmonic",
        }
    }
}

fn radial_g(mode: AnnulusSolutionMode, eps: f64, outer: f64, r: f64, dim: usize) -> f64 {
    let r = r.clamp(eps, outer);
    match (mode, dim) {
        (AnnulusSolutionMode::PaperLinear, _) => (outer - r) / (outer - eps),
        (AnnulusSolutionMode::Harmonic, 2) => (outer / r).ln() / (outer / eps).ln(),
        (AnnulusSolutionMode::Harmonic, n) => {
            let p = 2.0 - n as f64;
            (r.powf(p) - outer.powf(p)) / (eps.powf(p) - outer.powf(p))
        }
    }
}

fn radial_slope(mode: AnnulusSolutionMode, eps: f64, outer: f64, r: f64, dim: usize) -> f64 {
    match (mode, dim) {
        (AnnulusSolutionMode::PaperLinear, _) => -1.0 / (outer - eps),
        (AnnulusSolutionMode::Harmonic, 2) => -1.0 / (r * (outer / eps).ln()),
        (AnnulusSolutionMode::Harmonic, n) => {
            let p = 2.0 - n as f64;
            p * r.powf(p - 1.0) / (eps.powf(p) - outer.powf(p))
        }
    }
}

/// Closed-form `g` at distance `r` from the annulus center.
pub fn annulus_g(mode: AnnulusSolutionMode, eps: f64, outer: f64, r: f64, dim: usize) -> Result<f64> {
    if !(eps > 0.0 && eps < outer) {
        return Err(Error::invalid(format!("need 0 < ε < R, got ε = {eps}, R = {outer}")));
    }
    if dim < 2 {
        return Err(Error::invalid("closed-form annulus solutions need dimension >= 2"));
    }
    if !(eps..=outer).contains(&r) {
        return Err(Error::invalid(format!("r = {r} outside [{eps}, {outer}]")));
    }
    Ok(radial_g(mode, eps, outer, r, dim))
}

/// A value function `g` paired with the domain it is posed on.
pub trait ValueField<const N: usize>: Sync {
    fn domain(&self) -> &AnnulusDomain;
    fn value(&self, q: &State<N>) -> f64;
    fn gradient(&self, q: &State<N>) -> State<N>;

    /// `V = −log g`, floored at [`G_MIN`].
    fn value_function(&self, q: &State<N>) -> f64 {
        -self.value(q).max(G_MIN).ln()
    }
}

/// Closed-form `g` on a Euclidean annulus.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnulusValueField {
    domain: AnnulusDomain,
    mode: AnnulusSolutionMode,
}

impl AnnulusValueField {
    pub fn new(domain: AnnulusDomain, mode: AnnulusSolutionMode) -> Result<Self> {
        if domain.metric != Metric::Euclidean {
            return Err(Error::invalid("closed-form annulus solutions exist only for the Euclidean metric"));
        }
        Ok(Self { domain, mode })
    }

    pub fn mode(&self) -> AnnulusSolutionMode {
        self.mode
    }
}

impl<const N: usize> ValueField<N> for AnnulusValueField {
    fn domain(&self) -> &AnnulusDomain {
        &self.domain
    }

    fn value(&self, q: &State<N>) -> f64 {
        let d = &self.domain;
        radial_g(self.mode, d.inner_radius, d.outer_radius, d.inner_distance(q.as_slice()), N)
    }

    fn gradient(&self, q: &State<N>) -> State<N> {
        let d = &self.domain;
        let offset = q - State::<N>::from_column_slice(&d.center);
        let r = offset.norm();
        if r == 0.0 {
            return State::zeros();
        }
        offset * (radial_slope(self.mode, d.inner_radius, d.outer_radius, r, N) / r)
    }
}

/// `a Gᵀ ∇g / max(g, G_MIN)`, flagged when the floor was hit.
pub fn optimal_control<const N: usize, const M: usize, V>(model: &SdeModel<N, M>, field: &V, q: &State<N>) -> Control<M>
where
    V: ValueField<N> + ?Sized,
{
    let g = field.value(q);
    let grad = field.gradient(q);
    control_from_gradient(model, q, g, &grad)
}

pub(crate) fn control_from_gradient<const N: usize, const M: usize>(
    model: &SdeModel<N, M>,
    q: &State<N>,
    g: f64,
    grad: &State<N>,
) -> Control<M> {
    let clamped = !(g >= G_MIN);
    let a = model.noise_covariance(q);
    let gt = model.control_matrix(q).transpose();
    Control { u: a * (gt * grad) / g.max(G_MIN), clamped }
}

/// Componentwise `u_max · tanh(u_i)`.
///
/// # Panics
/// If `u_max` is not positive.
pub fn saturate<const M: usize>(u: &Input<M>, u_max: f64) -> Input<M> {
    assert!(u_max > 0.0, "u_max must be positive");
    u.map(|x| u_max * x.tanh())
}

/// Optimal exit-time feedback on one domain, optionally saturated.
pub struct ExitController<const N: usize, const M: usize, V> {
    model: SdeModel<N, M>,
    field: V,
    u_max: Option<f64>,
}

impl<const N: usize, const M: usize, V: ValueField<N>> ExitController<N, M, V> {
    pub fn new(model: SdeModel<N, M>, field: V, u_max: Option<f64>) -> Result<Self> {
        if let Some(b) = u_max {
            if !(b > 0.0) {
                return Err(Error::invalid(format!("u_max must be positive, got {b}")));
            }
        }
        Ok(Self { model, field, u_max })
    }

    pub fn field(&self) -> &V {
        &self.field
    }
}

impl<const N: usize, const M: usize, V: ValueField<N>> Controller<N, M> for ExitController<N, M, V> {
    fn control(&self, q: &State<N>) -> Control<M> {
        let mut c = optimal_control(&self.model, &self.field, q);
        if let Some(b) = self.u_max {
            c.u = saturate(&c.u, b);
        }
        c
    }
}

/// Domain for the recovery controller after an exit through `M`.
///
/// Centered `2ε` inside the failed outer wall along the exit ray, with the
/// same goal radius and the largest obstacle-free outer radius not exceeding
/// the failed one. For the SE(2) metric the ray is planar and the center
/// keeps the exit heading.
pub fn recovery_domain(exit_point: &[f64], failed: &AnnulusDomain, world: &SphereWorld) -> Result<AnnulusDomain> {
    let eps = failed.inner_radius;
    let outer = failed.outer_radius;
    if exit_point.len() != failed.dim() {
        return Err(Error::invalid("exit point dimension does not match the domain"));
    }
    let reach = failed.outer_distance(exit_point);
    if !(reach >= outer * (1.0 - 1e-12)) {
        return Err(Error::invalid(format!("exit point at distance {reach} is inside the outer wall R = {outer}")));
    }
    let gamma = &failed.center;
    let along = outer - 2.0 * eps;
    let center: Vec<f64> = match failed.metric {
        Metric::Euclidean => gamma.iter().zip(exit_point).map(|(g, e)| g + along * (e - g) / reach).collect(),
        Metric::Se2Embedded => {
            let mut c = exit_point.to_vec();
            c[0] = gamma[0] + along * (exit_point[0] - gamma[0]) / reach;
            c[1] = gamma[1] + along * (exit_point[1] - gamma[1]) / reach;
            c
        }
    };
    let radius = outer.min(world.clearance(&center));
    let offset = match failed.metric {
        Metric::Euclidean => Metric::Euclidean.distance(exit_point, &center),
        Metric::Se2Embedded => planar_distance(exit_point, &center),
    };
    if !(radius >= offset + eps) || radius <= eps {
        return Err(Error::RecoveryInfeasible(format!(
            "recovery center {center:?} has clearance radius {radius}, needs at least {}",
            offset + eps
        )));
    }
    AnnulusDomain::new(center, eps, radius, failed.metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Obstacle;
    use crate::models::single_integrator_2d;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector2;
    use proptest::prelude::*;

    fn unit_annulus() -> AnnulusDomain {
        AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap()
    }

    fn field(mode: AnnulusSolutionMode) -> AnnulusValueField {
        AnnulusValueField::new(unit_annulus(), mode).unwrap()
    }

    #[test]
    fn boundary_values_both_modes() {
        for mode in [AnnulusSolutionMode::PaperLinear, AnnulusSolutionMode::Harmonic] {
            for dim in [2, 3] {
                assert_abs_diff_eq!(annulus_g(mode, 0.1, 1.0, 0.1, dim).unwrap(), 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(annulus_g(mode, 0.1, 1.0, 1.0, dim).unwrap(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_values() {
        let lin = annulus_g(AnnulusSolutionMode::PaperLinear, 0.1, 1.0, 0.5, 2).unwrap();
        assert_abs_diff_eq!(lin, 0.5 / 0.9, epsilon = 1e-12);
        assert!((lin - 0.5556).abs() < 5e-5);
        let harm = annulus_g(AnnulusSolutionMode::Harmonic, 0.1, 1.0, 0.5, 2).unwrap();
        assert_abs_diff_eq!(harm, 2f64.ln() / 10f64.ln(), epsilon = 1e-12);
        // three-dimensional harmonic: (1/r - 1/R)/(1/ε - 1/R)
        let h3 = annulus_g(AnnulusSolutionMode::Harmonic, 0.1, 1.0, 0.5, 3).unwrap();
        assert_abs_diff_eq!(h3, (2.0 - 1.0) / (10.0 - 1.0), epsilon = 1e-12);
    }

    #[test]
    fn annulus_g_rejects_out_of_range() {
        assert!(annulus_g(AnnulusSolutionMode::Harmonic, 0.1, 1.0, 1.5, 2).is_err());
        assert!(annulus_g(AnnulusSolutionMode::Harmonic, 0.1, 1.0, 0.05, 2).is_err());
        assert!(annulus_g(AnnulusSolutionMode::Harmonic, 0.5, 0.4, 0.45, 2).is_err());
    }

    #[test]
    fn paper_linear_control_example() {
        let m = single_integrator_2d(1.0);
        let c = optimal_control(&m, &field(AnnulusSolutionMode::PaperLinear), &Vector2::new(0.5, 0.0));
        assert_abs_diff_eq!(c.u[0], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.u[1], 0.0, epsilon = 1e-12);
        assert!(!c.clamped);
    }

    #[test]
    fn harmonic_control_example() {
        // ∇g/g = -q / (r² ln(R/r)) = (-1/(0.5 ln 2), 0)
        let m = single_integrator_2d(1.0);
        let c = optimal_control(&m, &field(AnnulusSolutionMode::Harmonic), &Vector2::new(0.5, 0.0));
        assert_abs_diff_eq!(c.u[0], -2.885_390_081_777_927, epsilon = 1e-12);
        assert_abs_diff_eq!(c.u[1], 0.0, epsilon = 1e-12);
        // cross-check against a central difference of g
        let f = field(AnnulusSolutionMode::Harmonic);
        let h = 1e-6;
        let gp = ValueField::<2>::value(&f, &Vector2::new(0.5 + h, 0.0));
        let gm = ValueField::<2>::value(&f, &Vector2::new(0.5 - h, 0.0));
        let g0 = ValueField::<2>::value(&f, &Vector2::new(0.5, 0.0));
        assert_abs_diff_eq!(c.u[0], (gp - gm) / (2.0 * h) / g0, epsilon = 1e-6);
    }

    #[test]
    fn control_points_at_the_center_along_rays() {
        let m = single_integrator_2d(1.0);
        for mode in [AnnulusSolutionMode::PaperLinear, AnnulusSolutionMode::Harmonic] {
            let f = field(mode);
            for q in [Vector2::new(0.3, 0.4), Vector2::new(-0.6, 0.1), Vector2::new(0.0, -0.9)] {
                let u = optimal_control(&m, &f, &q).u;
                let toward = -q;
                assert_abs_diff_eq!(u[0] * toward[1] - u[1] * toward[0], 0.0, epsilon = 1e-9);
                assert!(u.dot(&toward) > 0.0);
            }
        }
    }

    #[test]
    fn clamp_is_flagged_outside_the_wall() {
        let m = single_integrator_2d(1.0);
        let c = optimal_control(&m, &field(AnnulusSolutionMode::Harmonic), &Vector2::new(1.2, 0.0));
        assert!(c.clamped);
        assert!(c.u.iter().all(|x| x.is_finite()));
    }

    fn fd_log_control(f: &AnnulusValueField, q: &Vector2<f64>) -> Vector2<f64> {
        // -a Gᵀ ∇(-log g) with a = G = I, by central differences
        let h = 1e-6;
        let mut out = Vector2::zeros();
        for i in 0..2 {
            let mut qp = *q;
            let mut qm = *q;
            qp[i] += h;
            qm[i] -= h;
            let vp = ValueField::<2>::value_function(f, &qp);
            let vm = ValueField::<2>::value_function(f, &qm);
            out[i] = -(vp - vm) / (2.0 * h);
        }
        out
    }

    proptest! {
        #[test]
        fn control_law_identity(r in 0.12..0.95f64, phi in 0.0..std::f64::consts::TAU, linear in any::<bool>()) {
            let mode = if linear { AnnulusSolutionMode::PaperLinear } else { AnnulusSolutionMode::Harmonic };
            let f = field(mode);
            let m = single_integrator_2d(1.0);
            let q = Vector2::new(r * phi.cos(), r * phi.sin());
            let u = optimal_control(&m, &f, &q).u;
            let fd = fd_log_control(&f, &q);
            prop_assert!((u - fd).norm() / u.norm() < 1e-6);
        }

        #[test]
        fn saturation_is_strictly_bounded(x in -1e6..1e6f64, y in -1e3..1e3f64, b in 0.1..10.0f64) {
            let s = saturate(&Vector2::new(x, y), b);
            prop_assert!(s.amax() <= b);
            prop_assert!(s[0].abs() < b || x.abs() > 15.0);
        }

        #[test]
        fn value_function_nonnegative(r in 0.1..1.0f64, linear in any::<bool>()) {
            let mode = if linear { AnnulusSolutionMode::PaperLinear } else { AnnulusSolutionMode::Harmonic };
            let v = ValueField::<2>::value_function(&field(mode), &Vector2::new(r, 0.0));
            prop_assert!(v >= 0.0);
        }
    }

    fn laplace_residual(mode: AnnulusSolutionMode, x: f64, y: f64, h: f64) -> f64 {
        let g = |x: f64, y: f64| radial_g(mode, 0.1, 1.0, x.hypot(y), 2);
        (g(x + h, y) + g(x - h, y) + g(x, y + h) + g(x, y - h) - 4.0 * g(x, y)) / (h * h)
    }

    #[test]
    fn harmonic_mode_passes_discrete_laplacian() {
        for (x, y) in [(0.5, 0.0), (0.3, 0.3), (-0.2, 0.6)] {
            let coarse = laplace_residual(AnnulusSolutionMode::Harmonic, x, y, 0.02).abs();
            let fine = laplace_residual(AnnulusSolutionMode::Harmonic, x, y, 0.01).abs();
            let ratio = coarse / fine;
            assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio} at ({x}, {y})");
        }
    }

    #[test]
    fn paper_linear_mode_fails_discrete_laplacian() {
        // Δg = -1/((R - ε) r) for the linear profile.
        let coarse = laplace_residual(AnnulusSolutionMode::PaperLinear, 0.5, 0.0, 0.02);
        let fine = laplace_residual(AnnulusSolutionMode::PaperLinear, 0.5, 0.0, 0.01);
        assert!((fine - coarse).abs() < 1e-3);
        assert_abs_diff_eq!(fine, -1.0 / (0.9 * 0.5), epsilon = 1e-3);
    }

    #[test]
    fn g_decreasing_and_control_growing_toward_wall() {
        let m = single_integrator_2d(1.0);
        for mode in [AnnulusSolutionMode::PaperLinear, AnnulusSolutionMode::Harmonic] {
            let f = field(mode);
            let rs: Vec<f64> = (0..200).map(|k| 0.1 + 0.9 * (k as f64 + 0.5) / 200.0).collect();
            for w in rs.windows(2) {
                let g0 = ValueField::<2>::value(&f, &Vector2::new(w[0], 0.0));
                let g1 = ValueField::<2>::value(&f, &Vector2::new(w[1], 0.0));
                assert!(g1 < g0);
            }
            // The harmonic control magnitude 1/(r ln(R/r)) grows on (R/e, R).
            let start = match mode {
                AnnulusSolutionMode::PaperLinear => 0.1,
                AnnulusSolutionMode::Harmonic => 1.0 / std::f64::consts::E,
            };
            let mut last = 0.0;
            for r in rs.iter().filter(|&&r| r > start) {
                let u = optimal_control(&m, &f, &Vector2::new(*r, 0.0)).u.norm();
                assert!(u > last);
                last = u;
            }
        }
    }

    #[test]
    fn saturate_examples() {
        assert_abs_diff_eq!(saturate(&Vector2::new(1e9, 0.0), 5.0)[0], 5.0, epsilon = 1e-12);
        assert_eq!(saturate(&Vector2::zeros(), 5.0), Vector2::zeros());
        assert_abs_diff_eq!(saturate(&Vector2::new(0.2, 0.0), 5.0)[0], 0.986_876_601_124_52, epsilon = 1e-12);
        assert!((saturate(&Vector2::new(0.2, 0.0), 5.0)[0] - 0.9866).abs() < 5e-4);
    }

    #[test]
    fn recovery_domain_examples() {
        let world = SphereWorld::obstacle_free(10.0).unwrap();
        let rec = recovery_domain(&[1.01, 0.0], &unit_annulus(), &world).unwrap();
        assert_abs_diff_eq!(rec.center[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(rec.center[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rec.outer_radius, 1.0, epsilon = 1e-12);
        assert_eq!(rec.classify(&[1.01, 0.0]), crate::geometry::Region::Interior);

        let rec = recovery_domain(&[0.0, 1.0], &unit_annulus(), &world).unwrap();
        assert_abs_diff_eq!(rec.center[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rec.center[1], 0.8, epsilon = 1e-12);

        assert!(recovery_domain(&[0.5, 0.0], &unit_annulus(), &world).is_err());
    }

    #[test]
    fn recovery_radius_shrinks_to_obstacle_clearance() {
        let world = SphereWorld::new(10.0, vec![Obstacle { center: [1.3, 0.4], radius: 0.1 }]).unwrap();
        let rec = recovery_domain(&[1.02, 0.0], &unit_annulus(), &world).unwrap();
        // brute-force nearest obstacle surface distance from the center
        let brute = (0..3600)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 3600.0;
                let p = [1.3 + 0.1 * a.cos(), 0.4 + 0.1 * a.sin()];
                (p[0] - rec.center[0]).hypot(p[1] - rec.center[1])
            })
            .fold(f64::INFINITY, f64::min);
        assert!(rec.outer_radius < 1.0);
        assert_abs_diff_eq!(rec.outer_radius, brute, epsilon = 1e-5);

        let blocked = SphereWorld::new(10.0, vec![Obstacle { center: [1.1, 0.0], radius: 0.05 }]).unwrap();
        assert!(matches!(recovery_domain(&[1.0, 0.0], &unit_annulus(), &blocked), Err(Error::RecoveryInfeasible(_))));
    }

    #[test]
    fn closed_form_requires_euclidean_metric() {
        let d = AnnulusDomain::new(vec![0.0, 0.0, 0.0], 0.1, 1.0, Metric::Se2Embedded).unwrap();
        assert!(AnnulusValueField::new(d, AnnulusSolutionMode::Harmonic).is_err());
    }
}
