//! Controlled SDE models and seeded Euler-Maruyama integration.
//!
//! The model is `dq = b(q) dt + G(q) [u(q) dt + Σ(q) dW]` with state dimension
//! `N` and input/noise dimension `M`. Dimensions are const generics, so a
//! dimension mismatch between model and state is a compile error.
//!
//! Every random draw comes from an [`RngStream`]: a ChaCha8 generator keyed by
//! `base_seed` and positioned on an independent stream `stream_id`. Parallel
//! Monte Carlo drivers derive one stream per `(node, path)` pair through
//! [`stream_id`], so results never depend on scheduling.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnnulusDomain, Region};

/// Default integration step for desk-scale runs.
pub const DEFAULT_DT: f64 = 1e-3;

pub type State<const N: usize> = SVector<f64, N>;
pub type Input<const M: usize> = SVector<f64, M>;

/// SplitMix64 finalizer. A bijection on `u64` with full avalanche.
pub const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream id for the `(node, path)` work item of a batch keyed by `base_seed`:
/// `mix64(mix64(mix64(base_seed) ^ node) ^ path)`.
pub const fn stream_id(base_seed: u64, node: u64, path: u64) -> u64 {
    mix64(mix64(mix64(base_seed) ^ node) ^ path)
}

/// Identifies one reproducible sequence of random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub base_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub const fn new(base_seed: u64, stream_id: u64) -> Self {
        Self { base_seed, stream_id }
    }

    /// Stream for work item `(node, path)`.
    pub const fn derive(base_seed: u64, node: u64, path: u64) -> Self {
        Self::new(base_seed, stream_id(base_seed, node, path))
    }

    /// Sub-stream `index` of this stream, e.g. one per episode segment.
    pub const fn child(&self, index: u64) -> Self {
        Self::new(self.base_seed, mix64(self.stream_id ^ mix64(index)))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Draws Wiener increments `dW ~ N(0, dt I)` from a stream.
pub struct WienerSource {
    rng: ChaCha8Rng,
    sqrt_dt: f64,
}

impl WienerSource {
    pub fn new(stream: &RngStream, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { rng: stream.rng(), sqrt_dt: dt.sqrt() })
    }

    #[inline]
    pub fn draw<const M: usize>(&mut self) -> Input<M> {
        let mut dw = Input::<M>::zeros();
        self.fill(dw.as_mut_slice());
        dw
    }

    /// Increment over a step of length `h` instead of the source's `dt`.
    #[inline]
    pub fn next_over<const M: usize>(&mut self, h: f64) -> Input<M> {
        let scale = h.sqrt();
        Input::<M>::from_fn(|_, _| {
            let z: f64 = self.rng.sample(StandardNormal);
            z * scale
        })
    }

    #[inline]
    pub fn fill(&mut self, out: &mut [f64]) {
        for x in out {
            let z: f64 = self.rng.sample(StandardNormal);
            *x = z * self.sqrt_dt;
        }
    }
}

/// `n_steps` independent increments of an `dim`-dimensional Wiener process.
pub fn wiener_increments(stream: &RngStream, n_steps: usize, dim: usize, dt: f64) -> Result<Vec<Vec<f64>>> {
    if n_steps == 0 || dim == 0 {
        return Err(Error::invalid("n_steps and dim must be at least 1"));
    }
    let mut source = WienerSource::new(stream, dt)?;
    Ok((0..n_steps)
        .map(|_| {
            let mut v = vec![0.0; dim];
            source.fill(&mut v);
            v
        })
        .collect())
}

/// How a model transforms under rigid motions of the workspace. Used to reuse
/// one precomputed field for every waypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameSymmetry {
    /// Invariant under translation of the whole state.
    Translation,
    /// Equivariant under planar rigid motions acting on `(x, y, θ)`: the
    /// position rotates with the heading and inputs are body-frame quantities.
    PlanarRigid,
}

type Field<const N: usize, T> = Arc<dyn Fn(&State<N>) -> T + Send + Sync>;

/// `dq = b(q) dt + G(q) [u dt + Σ(q) dW]`.
#[derive(Clone)]
pub struct SdeModel<const N: usize, const M: usize> {
    name: String,
    drift: Field<N, State<N>>,
    control_matrix: Field<N, SMatrix<f64, N, M>>,
    diffusion: Field<N, SMatrix<f64, M, M>>,
    symmetry: FrameSymmetry,
}

impl<const N: usize, const M: usize> fmt::Debug for SdeModel<N, M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("dim_state", &N)
            .field("dim_input", &M)
            .field("symmetry", &self.symmetry)
            .finish()
    }
}

impl<const N: usize, const M: usize> SdeModel<N, M> {
    pub fn new(
        name: impl Into<String>,
        drift: impl Fn(&State<N>) -> State<N> + Send + Sync + 'static,
        control_matrix: impl Fn(&State<N>) -> SMatrix<f64, N, M> + Send + Sync + 'static,
        diffusion: impl Fn(&State<N>) -> SMatrix<f64, M, M> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            drift: Arc::new(drift),
            control_matrix: Arc::new(control_matrix),
            diffusion: Arc::new(diffusion),
            symmetry: FrameSymmetry::Translation,
        }
    }

    pub fn with_symmetry(mut self, symmetry: FrameSymmetry) -> Self {
        self.symmetry = symmetry;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub const fn dim_state(&self) -> usize {
        N
    }

    pub const fn dim_input(&self) -> usize {
        M
    }

    pub fn symmetry(&self) -> FrameSymmetry {
        self.symmetry
    }

    #[inline]
    pub fn drift(&self, q: &State<N>) -> State<N> {
        (self.drift)(q)
    }

    #[inline]
    pub fn control_matrix(&self, q: &State<N>) -> SMatrix<f64, N, M> {
        (self.control_matrix)(q)
    }

    #[inline]
    pub fn diffusion(&self, q: &State<N>) -> SMatrix<f64, M, M> {
        (self.diffusion)(q)
    }

    /// `a(q) = Σ(q) Σ(q)ᵀ`.
    #[inline]
    pub fn noise_covariance(&self, q: &State<N>) -> SMatrix<f64, M, M> {
        let s = self.diffusion(q);
        s * s.transpose()
    }

    /// Largest standard deviation any single noise channel injects per unit time.
    pub fn sigma_max(&self, q: &State<N>) -> f64 {
        self.noise_covariance(q).diagonal().iter().fold(0.0f64, |m, v| m.max(v.sqrt()))
    }

    /// Checks the diffusion assumptions at the given sample points: `Σ(q)` has
    /// a finite condition number and `a(q)` has a positive diagonal entry.
    pub fn validate_on(&self, points: &[State<N>]) -> Result<()> {
        for q in points {
            let sigma = self.diffusion(q);
            let inv = sigma
                .try_inverse()
                .ok_or_else(|| Error::invalid(format!("{}: diffusion is singular at {:?}", self.name, q.as_slice())))?;
            let cond = sigma.norm() * inv.norm();
            if !cond.is_finite() {
                return Err(Error::invalid(format!(
                    "{}: diffusion condition number is not finite at {:?}",
                    self.name,
                    q.as_slice()
                )));
            }
            let a = sigma * sigma.transpose();
            if !a.diagonal().iter().any(|&d| d > 0.0) {
                return Err(Error::invalid(format!(
                    "{}: noise covariance has no positive diagonal entry at {:?}",
                    self.name,
                    q.as_slice()
                )));
            }
        }
        Ok(())
    }
}

/// One Euler-Maruyama step: `q + b dt + G (u dt + Σ dW)`.
#[inline]
pub fn em_step<const N: usize, const M: usize>(
    model: &SdeModel<N, M>,
    q: &State<N>,
    u: &Input<M>,
    dt: f64,
    dw: &Input<M>,
) -> State<N> {
    let g = model.control_matrix(q);
    let sigma = model.diffusion(q);
    q + model.drift(q) * dt + g * (u * dt + sigma * dw)
}

/// Output of a feedback law at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control<const M: usize> {
    pub u: Input<M>,
    /// The value function hit its numeric floor while computing `u`.
    pub clamped: bool,
}

impl<const M: usize> Control<M> {
    pub fn exact(u: Input<M>) -> Self {
        Self { u, clamped: false }
    }
}

/// A state feedback law `q ↦ u`.
pub trait Controller<const N: usize, const M: usize>: Sync {
    fn control(&self, q: &State<N>) -> Control<M>;
}

impl<const N: usize, const M: usize, F> Controller<N, M> for F
where
    F: Fn(&State<N>) -> Input<M> + Sync,
{
    fn control(&self, q: &State<N>) -> Control<M> {
        Control::exact(self(q))
    }
}

impl<const N: usize, const M: usize> Controller<N, M> for Box<dyn Controller<N, M> + Send + Sync> {
    fn control(&self, q: &State<N>) -> Control<M> {
        (**self).control(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitKind {
    None,
    GoalN,
    ForbiddenM,
    Timeout,
}

impl ExitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExitKind::None => "none",
            ExitKind::GoalN => "goal_N",
            ExitKind::ForbiddenM => "forbidden_M",
            ExitKind::Timeout => "timeout",
        }
    }
}

impl fmt::Display for ExitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sampled path of one run. `inputs[k]` is the control applied on
/// `[times[k], times[k+1])`, so there is one input fewer than states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const N: usize, const M: usize> {
    pub times: Vec<f64>,
    pub states: Vec<State<N>>,
    pub inputs: Vec<Input<M>>,
    pub exit_kind: ExitKind,
    /// Number of control evaluations that hit the value-function floor.
    pub clamp_events: usize,
}

impl<const N: usize, const M: usize> Trajectory<N, M> {
    pub fn exit_time(&self) -> f64 {
        *self.times.last().expect("trajectory always holds the initial state")
    }

    pub fn final_state(&self) -> &State<N> {
        self.states.last().expect("trajectory always holds the initial state")
    }

    /// Whether the exit sample lies within `band` of the boundary it crossed.
    pub fn exit_within(&self, domain: &AnnulusDomain, band: f64) -> bool {
        let q = self.final_state().as_slice();
        match self.exit_kind {
            ExitKind::GoalN => domain.inner_distance(q) >= domain.inner_radius - band,
            ExitKind::ForbiddenM => domain.outer_distance(q) <= domain.outer_radius + band,
            ExitKind::None | ExitKind::Timeout => true,
        }
    }

    /// `t,q0..q{n-1},u0..u{m-1}`; the last row has empty input cells.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", csv_header(N, M, &[]))?;
        for (k, (t, q)) in self.times.iter().zip(&self.states).enumerate() {
            write!(w, "{t}")?;
            for x in q.iter() {
                write!(w, ",{x}")?;
            }
            match self.inputs.get(k) {
                Some(u) => {
                    for x in u.iter() {
                        write!(w, ",{x}")?;
                    }
                }
                None => write!(w, "{}", ",".repeat(M))?,
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Sidecar metadata for [`Trajectory::write_csv`].
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "exit_kind": self.exit_kind.as_str(),
            "exit_time": self.exit_time(),
            "steps": self.inputs.len(),
            "clamp_events": self.clamp_events,
        })
    }
}

pub(crate) fn csv_header(n: usize, m: usize, extra: &[&str]) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n).map(|i| format!("q{i}")));
    cols.extend((0..m).map(|i| format!("u{i}")));
    cols.extend(extra.iter().map(|s| s.to_string()));
    cols.join(",")
}

fn step_budget(t_max: f64, dt: f64) -> usize {
    // Tolerate t_max being an exact multiple of dt up to rounding.
    ((t_max / dt) * (1.0 + 1e-12)).floor() as usize
}

fn check_start(domain: &AnnulusDomain, q0: &[f64], dt: f64, t_max: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if !(t_max >= 0.0) {
        return Err(Error::invalid(format!("t_max must be non-negative, got {t_max}")));
    }
    if domain.classify(q0) != Region::Interior {
        return Err(Error::invalid(format!("initial state {q0:?} is not interior to the domain")));
    }
    Ok(())
}

/// Integrates until the state leaves `domain` or `t_max` elapses.
///
/// Crossing is detected by a post-step test; the exit state is the first
/// sample outside the open annulus, with no interpolation back to the boundary.
pub fn simulate_until_exit<const N: usize, const M: usize, C>(
    model: &SdeModel<N, M>,
    controller: &C,
    domain: &AnnulusDomain,
    q0: &State<N>,
    dt: f64,
    t_max: f64,
    stream: &RngStream,
) -> Result<Trajectory<N, M>>
where
    C: Controller<N, M> + ?Sized,
{
    check_start(domain, q0.as_slice(), dt, t_max)?;
    let budget = step_budget(t_max, dt);
    let mut noise = WienerSource::new(stream, dt)?;
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![*q0],
        inputs: Vec::new(),
        exit_kind: ExitKind::Timeout,
        clamp_events: 0,
    };
    let mut q = *q0;
    for k in 1..=budget {
        let c = controller.control(&q);
        if c.clamped {
            traj.clamp_events += 1;
        }
        let dw = noise.draw::<M>();
        q = em_step(model, &q, &c.u, dt, &dw);
        traj.inputs.push(c.u);
        traj.times.push(k as f64 * dt);
        traj.states.push(q);
        match domain.classify(q.as_slice()) {
            Region::Interior => {}
            Region::GoalN => {
                traj.exit_kind = ExitKind::GoalN;
                return Ok(traj);
            }
            Region::ForbiddenM => {
                traj.exit_kind = ExitKind::ForbiddenM;
                return Ok(traj);
            }
            Region::Exterior => return Err(Error::NonFinite { step: k }),
        }
    }
    Ok(traj)
}

/// Step shortening near the forbidden wall.
///
/// The step at `q` is `(κ · gap / s)²` clamped to `[dt_min, dt]`, where `gap`
/// is the distance from `q` to the outer wall and `s` the largest per-axis
/// standard deviation of the state noise `G Σ dW`. Feedback laws that blow
/// up at the wall keep the continuous process inside; with fixed steps the
/// discrete process still crosses whenever it wanders within a few `s √dt`
/// of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRefinement {
    pub kappa: f64,
    pub dt_min: f64,
}

impl StepRefinement {
    /// `κ = 0.2` and `dt_min = 10⁻¹⁰ dt`.
    pub fn for_dt(dt: f64) -> Self {
        Self { kappa: 0.2, dt_min: 1e-10 * dt }
    }

    fn validate(&self, dt: f64) -> Result<()> {
        if !(self.kappa > 0.0 && self.dt_min > 0.0 && self.dt_min <= dt) {
            return Err(Error::invalid(format!(
                "step refinement needs κ > 0 and 0 < dt_min <= dt, got κ = {}, dt_min = {}",
                self.kappa, self.dt_min
            )));
        }
        Ok(())
    }

    #[inline]
    fn step<const N: usize, const M: usize>(
        &self,
        model: &SdeModel<N, M>,
        domain: &AnnulusDomain,
        q: &State<N>,
        dt: f64,
    ) -> f64 {
        let gap = domain.outer_radius - domain.outer_distance(q.as_slice());
        let g = model.control_matrix(q);
        let s = model.diffusion(q);
        let cov = g * s * s.transpose() * g.transpose();
        let spread = cov.diagonal().iter().fold(0.0f64, |m, v| m.max(*v)).sqrt();
        if !(spread > 0.0) {
            return dt;
        }
        ((self.kappa * gap / spread).powi(2)).clamp(self.dt_min, dt)
    }
}

/// [`simulate_until_exit`] with optional step shortening near the outer
/// wall. Without refinement the two are identical.
#[allow(clippy::too_many_arguments)]
pub fn simulate_until_exit_refined<const N: usize, const M: usize, C>(
    model: &SdeModel<N, M>,
    controller: &C,
    domain: &AnnulusDomain,
    q0: &State<N>,
    dt: f64,
    t_max: f64,
    stream: &RngStream,
    refine: Option<&StepRefinement>,
) -> Result<Trajectory<N, M>>
where
    C: Controller<N, M> + ?Sized,
{
    let Some(refine) = refine else {
        return simulate_until_exit(model, controller, domain, q0, dt, t_max, stream);
    };
    check_start(domain, q0.as_slice(), dt, t_max)?;
    refine.validate(dt)?;
    let mut noise = WienerSource::new(stream, dt)?;
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![*q0],
        inputs: Vec::new(),
        exit_kind: ExitKind::Timeout,
        clamp_events: 0,
    };
    let mut q = *q0;
    let mut t = 0.0;
    let t_end = t_max * (1.0 + 1e-12);
    let mut k = 0usize;
    loop {
        let h = refine.step(model, domain, &q, dt).min(t_max - t);
        if !(h > 0.0) || t + h > t_end {
            break;
        }
        k += 1;
        let c = controller.control(&q);
        if c.clamped {
            traj.clamp_events += 1;
        }
        let dw = noise.next_over::<M>(h);
        q = em_step(model, &q, &c.u, h, &dw);
        t += h;
        traj.inputs.push(c.u);
        traj.times.push(t);
        traj.states.push(q);
        match domain.classify(q.as_slice()) {
            Region::Interior => {}
            Region::GoalN => {
                traj.exit_kind = ExitKind::GoalN;
                return Ok(traj);
            }
            Region::ForbiddenM => {
                traj.exit_kind = ExitKind::ForbiddenM;
                return Ok(traj);
            }
            Region::Exterior => return Err(Error::NonFinite { step: k }),
        }
        if t_max - t < refine.dt_min * 1e-6 {
            break;
        }
    }
    Ok(traj)
}

/// Same dynamics as [`simulate_until_exit`] without recording the path.
/// Returns the exit kind and the number of steps taken.
pub fn first_exit<const N: usize, const M: usize, C>(
    model: &SdeModel<N, M>,
    controller: &C,
    domain: &AnnulusDomain,
    q0: &State<N>,
    dt: f64,
    max_steps: usize,
    stream: &RngStream,
) -> Result<(ExitKind, usize)>
where
    C: Controller<N, M> + ?Sized,
{
    check_start(domain, q0.as_slice(), dt, 0.0)?;
    let mut noise = WienerSource::new(stream, dt)?;
    let mut q = *q0;
    for k in 1..=max_steps {
        let u = controller.control(&q).u;
        let dw = noise.draw::<M>();
        q = em_step(model, &q, &u, dt, &dw);
        match domain.classify(q.as_slice()) {
            Region::Interior => {}
            Region::GoalN => return Ok((ExitKind::GoalN, k)),
            Region::ForbiddenM => return Ok((ExitKind::ForbiddenM, k)),
            Region::Exterior => return Err(Error::NonFinite { step: k }),
        }
    }
    Ok((ExitKind::Timeout, max_steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Metric;
    use crate::models;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix2, Vector2, Vector3};

    fn identity_model() -> SdeModel<2, 2> {
        SdeModel::new("identity", |_| Vector2::zeros(), |_| Matrix2::identity(), |_| Matrix2::identity())
    }

    #[test]
    fn wiener_moments_match_dt() {
        let dw = wiener_increments(&RngStream::new(3, 0), 100_000, 1, 1.0).unwrap();
        let n = dw.len() as f64;
        let mean = dw.iter().map(|v| v[0]).sum::<f64>() / n;
        let var = dw.iter().map(|v| (v[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * (1.0 / n).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn wiener_rejects_bad_arguments() {
        let s = RngStream::new(1, 1);
        assert!(matches!(wiener_increments(&s, 10, 1, 0.0), Err(Error::InvalidArgument(_))));
        assert!(wiener_increments(&s, 10, 1, -1.0).is_err());
        assert!(wiener_increments(&s, 0, 1, 0.1).is_err());
    }

    #[test]
    fn wiener_is_deterministic_per_stream() {
        let a = wiener_increments(&RngStream::new(42, 7), 50, 3, 0.01).unwrap();
        let b = wiener_increments(&RngStream::new(42, 7), 50, 3, 0.01).unwrap();
        let c = wiener_increments(&RngStream::new(42, 8), 50, 3, 0.01).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let a = wiener_increments(&RngStream::derive(9, 0, 0), 20_000, 1, 1.0).unwrap();
        let b = wiener_increments(&RngStream::derive(9, 0, 1), 20_000, 1, 1.0).unwrap();
        let n = a.len() as f64;
        let corr = a.iter().zip(&b).map(|(x, y)| x[0] * y[0]).sum::<f64>() / n;
        assert!(corr.abs() < 4.0 / n.sqrt(), "corr {corr}");
    }

    #[test]
    fn em_step_direct_arithmetic() {
        let m = identity_model();
        let q = em_step(&m, &Vector2::new(0.0, 0.0), &Vector2::new(1.0, 2.0), 0.1, &Vector2::new(0.05, -0.02));
        assert_abs_diff_eq!(q[0], 0.15, epsilon = 1e-15);
        assert_abs_diff_eq!(q[1], 0.18, epsilon = 1e-15);
    }

    #[test]
    fn em_step_identity_without_inputs() {
        let m = SdeModel::<2, 2>::new("still", |_| Vector2::zeros(), |_| Matrix2::identity(), |_| Matrix2::zeros());
        let q = Vector2::new(0.3, -0.7);
        let next = em_step(&m, &q, &Vector2::zeros(), 0.5, &Vector2::new(1.0, 1.0));
        assert_eq!(next, q);
    }

    #[test]
    fn em_step_omni_matches_hand_evaluated_matrix() {
        // Wheel inputs (1, -1, 0) at heading 0: columns one and two of G
        // contribute (2/3)(cos δ, sin δ) and (2/3)(cos δ, -sin δ).
        let m = models::omni_robot(&models::OmniParams::default());
        let q = em_step(&m, &Vector3::zeros(), &Vector3::new(1.0, -1.0, 0.0), 1.0, &Vector3::zeros());
        assert_abs_diff_eq!(q[0], 1.154_700_538_379_251_5, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_horizon_times_out_immediately() {
        let m = identity_model();
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        let zero = |_: &State<2>| Vector2::zeros();
        let t = simulate_until_exit(&m, &zero, &d, &Vector2::new(0.5, 0.0), 1e-3, 0.0, &RngStream::new(1, 1)).unwrap();
        assert_eq!(t.exit_kind, ExitKind::Timeout);
        assert_eq!(t.states.len(), 1);
    }

    #[test]
    fn start_on_boundary_is_rejected() {
        let m = identity_model();
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        let zero = |_: &State<2>| Vector2::zeros();
        for q0 in [Vector2::new(1.0, 0.0), Vector2::new(0.05, 0.0), Vector2::new(3.0, 0.0)] {
            let r = simulate_until_exit(&m, &zero, &d, &q0, 1e-3, 1.0, &RngStream::new(1, 1));
            assert!(matches!(r, Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn simulation_is_bitwise_deterministic() {
        let m = identity_model();
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        let zero = |_: &State<2>| Vector2::zeros();
        let s = RngStream::derive(5, 1, 2);
        let a = simulate_until_exit(&m, &zero, &d, &Vector2::new(0.5, 0.0), 1e-3, 10.0, &s).unwrap();
        let b = simulate_until_exit(&m, &zero, &d, &Vector2::new(0.5, 0.0), 1e-3, 10.0, &s).unwrap();
        assert_eq!(a, b);
        let (kind, steps) = first_exit(&m, &zero, &d, &Vector2::new(0.5, 0.0), 1e-3, 10_000, &s).unwrap();
        assert_eq!(kind, a.exit_kind);
        assert_eq!(steps, a.inputs.len());
    }

    #[test]
    fn deterministic_line_is_exact() {
        let m = SdeModel::<2, 2>::new("line", |_| Vector2::zeros(), |_| Matrix2::identity(), |_| Matrix2::zeros());
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 10.0, Metric::Euclidean).unwrap();
        let u = |_: &State<2>| Vector2::new(0.5, 0.25);
        let t = simulate_until_exit(&m, &u, &d, &Vector2::new(1.0, 1.0), 0.01, 1.0, &RngStream::new(0, 0)).unwrap();
        for (time, q) in t.times.iter().zip(&t.states) {
            assert_abs_diff_eq!(q[0], 1.0 + 0.5 * time, epsilon = 1e-12);
            assert_abs_diff_eq!(q[1], 1.0 + 0.25 * time, epsilon = 1e-12);
        }
    }

    #[test]
    fn exit_sample_is_near_the_crossed_boundary() {
        let m = identity_model();
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        let zero = |_: &State<2>| Vector2::zeros();
        let dt = 1e-3;
        let band = AnnulusDomain::boundary_band(dt, 1.0);
        for path in 0..50 {
            let t =
                simulate_until_exit(&m, &zero, &d, &Vector2::new(0.5, 0.0), dt, 100.0, &RngStream::derive(2, 0, path))
                    .unwrap();
            assert!(matches!(t.exit_kind, ExitKind::GoalN | ExitKind::ForbiddenM));
            assert!(t.exit_within(&d, band));
            for w in t.times.windows(2) {
                assert!(w[1] > w[0]);
            }
        }
    }

    #[test]
    fn refinement_off_is_the_fixed_step_integrator() {
        let m = identity_model();
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        let zero = |_: &State<2>| Vector2::zeros();
        let s = RngStream::derive(8, 0, 0);
        let q0 = Vector2::new(0.4, 0.1);
        let a = simulate_until_exit(&m, &zero, &d, &q0, 1e-3, 10.0, &s).unwrap();
        let b = simulate_until_exit_refined(&m, &zero, &d, &q0, 1e-3, 10.0, &s, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refined_steps_shrink_only_near_the_outer_wall() {
        let m = identity_model();
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        let zero = |_: &State<2>| Vector2::zeros();
        let refine = StepRefinement::for_dt(1e-3);
        let t = simulate_until_exit_refined(
            &m,
            &zero,
            &d,
            &Vector2::new(0.95, 0.0),
            1e-3,
            50.0,
            &RngStream::new(4, 0),
            Some(&refine),
        )
        .unwrap();
        for (w, q) in t.times.windows(2).zip(&t.states) {
            let h = w[1] - w[0];
            let gap = 1.0 - q.norm();
            let expected = (0.2 * gap).powi(2).clamp(refine.dt_min, 1e-3);
            assert!((h - expected).abs() <= 1e-9 * expected + 1e-14, "h {h} gap {gap}");
        }
    }

    #[test]
    fn refined_timeout_lands_on_t_max() {
        let m = identity_model();
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 100.0, Metric::Euclidean).unwrap();
        let zero = |_: &State<2>| Vector2::zeros();
        let refine = StepRefinement::for_dt(0.01);
        let t = simulate_until_exit_refined(
            &m,
            &zero,
            &d,
            &Vector2::new(50.0, 0.0),
            0.01,
            0.255,
            &RngStream::new(1, 1),
            Some(&refine),
        )
        .unwrap();
        assert_eq!(t.exit_kind, ExitKind::Timeout);
        assert_abs_diff_eq!(t.exit_time(), 0.255, epsilon = 1e-12);
        let bad = StepRefinement { kappa: 0.0, dt_min: 1e-6 };
        assert!(simulate_until_exit_refined(
            &m,
            &zero,
            &d,
            &Vector2::new(50.0, 0.0),
            0.01,
            1.0,
            &RngStream::new(1, 1),
            Some(&bad)
        )
        .is_err());
    }

    #[test]
    fn refined_harmonic_controller_never_leaks_through_the_wall() {
        use crate::control::{AnnulusSolutionMode, AnnulusValueField, ExitController};
        let m = identity_model();
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        let field = AnnulusValueField::new(d.clone(), AnnulusSolutionMode::Harmonic).unwrap();
        let ctrl = ExitController::new(m.clone(), field, None).unwrap();
        let refine = StepRefinement::for_dt(1e-3);
        for path in 0..300 {
            let t = simulate_until_exit_refined(
                &m,
                &ctrl,
                &d,
                &Vector2::new(0.97, 0.0),
                1e-3,
                100.0,
                &RngStream::derive(6, 0, path),
                Some(&refine),
            )
            .unwrap();
            assert_eq!(t.exit_kind, ExitKind::GoalN, "path {path}");
        }
    }

    #[test]
    fn csv_has_expected_shape() {
        let m = identity_model();
        let d = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        let zero = |_: &State<2>| Vector2::zeros();
        let t = simulate_until_exit(&m, &zero, &d, &Vector2::new(0.5, 0.0), 1e-2, 0.05, &RngStream::new(1, 1)).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,q0,q1,u0,u1");
        assert_eq!(lines.len(), t.states.len() + 1);
        assert!(lines.last().unwrap().ends_with(",,"));
        assert_eq!(t.metadata()["exit_kind"], t.exit_kind.as_str());
    }

    #[test]
    fn validate_rejects_singular_diffusion() {
        let m = SdeModel::<2, 2>::new(
            "degenerate",
            |_| Vector2::zeros(),
            |_| Matrix2::identity(),
            |_| Matrix2::new(1.0, 0.0, 0.0, 0.0),
        );
        assert!(m.validate_on(&[Vector2::zeros()]).is_err());
        assert!(identity_model().validate_on(&[Vector2::zeros()]).is_ok());
    }
}
