//! Navigation functions and the waypoint plans derived from them.
//!
//! The navigation function on a sphere world is
//!
//! ```text
//! Q(q) = ( ‖q‖^{2k} / (‖q‖^{2k} + β(q)) )^{1/k},   β = β₀ Π βⱼ
//! ```
//!
//! with `β₀ = ρ₀² − ‖p‖²` for the outer wall and `βⱼ = ‖p − cⱼ‖² − ρⱼ²` for
//! each obstacle, `p` being the planar part of `q`. The reference path is the
//! integral curve of `−∇Q` traversed at unit speed, so a horizon `s` is an
//! arc length.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{radius_bounds, AnnulusDomain, Metric, SphereWorld};

/// Consecutive near-zero gradient steps before the flow is declared stuck.
const STAGNATION_STEPS: usize = 1000;
const STAGNATION_GRAD: f64 = 1e-12;
const GRADIENT_STEP: f64 = 1e-5;
/// Rounding slack when a point sits on an obstacle or wall surface.
const BOUNDARY_TOL: f64 = 1e-12;
/// Radius multiplier on `ε` for the ball samples the selector tests.
const SELECTOR_INFLATION: f64 = 1.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NavFunction {
    pub world: SphereWorld,
    pub k: u32,
    pub metric: Metric,
}

impl NavFunction {
    pub fn new(world: SphereWorld, k: u32, metric: Metric) -> Result<Self> {
        world.validate()?;
        if k == 0 {
            return Err(Error::invalid("navigation exponent k must be positive"));
        }
        Ok(Self { world, k, metric })
    }

    fn beta(&self, q: &[f64]) -> Result<f64> {
        let r2 = q[0] * q[0] + q[1] * q[1];
        let rho0 = self.world.outer_radius;
        let mut beta = rho0 * rho0 - r2;
        if beta < 0.0 && beta > -BOUNDARY_TOL {
            beta = 0.0;
        }
        if beta < 0.0 {
            return Err(Error::invalid(format!("{q:?} lies outside the workspace")));
        }
        for (j, o) in self.world.obstacles.iter().enumerate() {
            let mut bj = o.beta(q);
            if bj < 0.0 && bj > -BOUNDARY_TOL {
                bj = 0.0;
            }
            if bj < 0.0 {
                return Err(Error::invalid(format!("{q:?} lies inside obstacle {j}")));
            }
            beta *= bj;
        }
        Ok(beta)
    }

    /// `Q(q)` in `[0, 1]`.
    pub fn value(&self, q: &[f64]) -> Result<f64> {
        let beta = self.beta(q)?;
        let r = self.metric.norm(q);
        if r == 0.0 {
            return Ok(0.0);
        }
        if beta == 0.0 {
            return Ok(1.0);
        }
        let k = self.k as f64;
        let ratio = 1.0 / (1.0 + beta * r.powf(-2.0 * k));
        Ok(ratio.powf(1.0 / k).clamp(0.0, 1.0))
    }

    /// Central-difference gradient, one-sided along axes where the stencil
    /// leaves free space.
    pub fn gradient(&self, q: &[f64]) -> Result<Vec<f64>> {
        let f0 = self.value(q)?;
        let h = GRADIENT_STEP;
        let mut grad = vec![0.0; q.len()];
        let mut probe = q.to_vec();
        for i in 0..q.len() {
            probe[i] = q[i] + h;
            let fp = self.value(&probe).ok();
            probe[i] = q[i] - h;
            let fm = self.value(&probe).ok();
            probe[i] = q[i];
            grad[i] = match (fp, fm) {
                (Some(p), Some(m)) => (p - m) / (2.0 * h),
                (Some(p), None) => (p - f0) / h,
                (None, Some(m)) => (f0 - m) / h,
                (None, None) => 0.0,
            };
        }
        Ok(grad)
    }

    /// Grid points in the planar slice `θ = 0` that are strict local minima
    /// of `Q` away from the goal. An empty result is evidence, not proof,
    /// that `k` is large enough.
    pub fn spurious_minima(&self, spacing: f64) -> Vec<[f64; 2]> {
        let rho = self.world.outer_radius;
        let n = (2.0 * rho / spacing).ceil() as i64;
        let dim = self.metric.required_dim().unwrap_or(2);
        let eval = |x: f64, y: f64| {
            let mut q = vec![0.0; dim];
            q[0] = x;
            q[1] = y;
            self.value(&q).ok()
        };
        let mut found = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                let x = -rho + i as f64 * spacing;
                let y = -rho + j as f64 * spacing;
                if x.hypot(y) <= 2.0 * spacing {
                    continue;
                }
                let Some(center) = eval(x, y) else { continue };
                let mut is_min = true;
                'nbr: for dx in [-1.0, 0.0, 1.0] {
                    for dy in [-1.0, 0.0, 1.0] {
                        if dx == 0.0 && dy == 0.0 {
                            continue;
                        }
                        match eval(x + dx * spacing, y + dy * spacing) {
                            Some(v) if v > center => {}
                            _ => {
                                is_min = false;
                                break 'nbr;
                            }
                        }
                    }
                }
                if is_min {
                    found.push([x, y]);
                }
            }
        }
        found
    }
}

/// How the outer radius `R_i` is picked inside `(R_min, R_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusPolicy {
    /// `R_min + f (R_max − R_min)` with `0 < f < 1`.
    Fraction(f64),
    /// Largest listed radius strictly inside the admissible interval.
    Ladder(Vec<f64>),
}

impl RadiusPolicy {
    fn pick(&self, r_min: f64, r_max: f64) -> Option<f64> {
        match self {
            RadiusPolicy::Fraction(f) => Some(r_min + f * (r_max - r_min)),
            RadiusPolicy::Ladder(rs) => rs
                .iter()
                .copied()
                .filter(|&r| r > r_min && r < r_max)
                .fold(None, |best: Option<f64>, r| Some(best.map_or(r, |b| b.max(r)))),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            RadiusPolicy::Fraction(f) if !(*f > 0.0 && *f < 1.0) => {
                Err(Error::invalid(format!("radius fraction must lie in (0, 1), got {f}")))
            }
            RadiusPolicy::Ladder(rs) if rs.is_empty() || rs.iter().any(|r| !(*r > 0.0)) => {
                Err(Error::invalid("radius ladder needs positive entries"))
            }
            _ => Ok(()),
        }
    }
}

impl Default for RadiusPolicy {
    fn default() -> Self {
        RadiusPolicy::Fraction(0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub k: u32,
    /// Coefficient of the decrease margin `η(s) = c_η s²`.
    pub c_eta: f64,
    /// Reference path horizon (seconds of unit-speed flow).
    pub horizon: f64,
    /// Integration step of the flow.
    pub step: f64,
    pub epsilon: f64,
    pub radius: RadiusPolicy,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { k: 4, c_eta: 1e-4, horizon: 5.0, step: 0.01, epsilon: 0.1, radius: RadiusPolicy::default() }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        if !(self.c_eta >= 0.0) {
            return Err(Error::invalid("c_eta must be non-negative"));
        }
        if !(self.horizon > 0.0 && self.step > 0.0 && self.epsilon > 0.0) {
            return Err(Error::invalid("horizon, step and epsilon must be positive"));
        }
        self.radius.validate()
    }

    pub fn eta(&self, s: f64) -> f64 {
        self.c_eta * s * s
    }
}

/// Reference path: unit-speed descent along `−∇Q` for `horizon` seconds.
///
/// Each step backtracks until `Q` strictly decreases. The flow stops early
/// once `‖z‖ ≤ ε/2`, and the goal itself is appended as the terminus.
pub fn reference_path(nf: &NavFunction, q0: &[f64], horizon: f64, step: f64, epsilon: f64) -> Result<Vec<Vec<f64>>> {
    if !(horizon > 0.0 && step > 0.0 && epsilon > 0.0) {
        return Err(Error::invalid("horizon, step and epsilon must be positive"));
    }
    if let Some(d) = nf.metric.required_dim() {
        if q0.len() != d {
            return Err(Error::invalid(format!("start must have {d} coordinates")));
        }
    }
    let q_start = nf.value(q0)?;
    if !(q_start < 1.0) {
        return Err(Error::invalid("start lies on an obstacle boundary or the outer wall"));
    }
    let goal = vec![0.0; q0.len()];
    let mut z = q0.to_vec();
    let mut q_z = q_start;
    let mut path = vec![z.clone()];
    let mut elapsed = 0.0;
    let mut flat = 0usize;
    while elapsed < horizon {
        if nf.metric.norm(&z) <= epsilon / 2.0 {
            if z != goal {
                path.push(goal);
            }
            return Ok(path);
        }
        let grad = nf.gradient(&z)?;
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(gnorm >= STAGNATION_GRAD) {
            flat += 1;
            if flat >= STAGNATION_STEPS {
                return Err(Error::Stagnation { point: z, grad_norm: gnorm, steps: flat });
            }
            elapsed += step;
            continue;
        }
        flat = 0;
        let mut h = step.min(horizon - elapsed);
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = z.iter().zip(&grad).map(|(zi, gi)| zi - h * gi / gnorm).collect();
            if let Ok(v) = nf.value(&trial) {
                if v < q_z {
                    accepted = Some((trial, v));
                    break;
                }
            }
            h *= 0.5;
        }
        let Some((next, v)) = accepted else {
            return Err(Error::Stagnation { point: z, grad_norm: gnorm, steps: 0 });
        };
        elapsed += step;
        z = next;
        q_z = v;
        path.push(z.clone());
    }
    if nf.metric.norm(&z) <= epsilon / 2.0 && z != goal {
        path.push(goal);
    }
    Ok(path)
}

/// Waypoints `γ_0 … γ_N` with outer radii `R_1 … R_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointPlan {
    pub waypoints: Vec<Vec<f64>>,
    /// `radii[i - 1]` is the outer radius of the domain around waypoint `i`.
    pub radii: Vec<f64>,
    pub epsilon: f64,
    pub horizon: f64,
    pub metric: Metric,
    /// Set when the path was too short to space waypoints; the plan is the
    /// terminus alone and the spacing condition does not apply.
    pub degenerate: bool,
}

impl WaypointPlan {
    /// Number of segments `N`.
    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    pub fn terminus(&self) -> &[f64] {
        self.waypoints.last().expect("plan has a start")
    }

    /// Domain `D_i` for `i` in `1..=N`.
    pub fn domain(&self, i: usize) -> Result<AnnulusDomain> {
        if i == 0 || i > self.len() {
            return Err(Error::invalid(format!("segment {i} outside 1..={}", self.len())));
        }
        AnnulusDomain::new(self.waypoints[i].clone(), self.epsilon, self.radii[i - 1], self.metric)
    }

    /// Whether the terminus is the origin.
    pub fn reaches_goal(&self) -> bool {
        self.terminus().iter().all(|&x| x == 0.0)
    }

    /// Appends `other`, whose start must be this plan's terminus.
    pub fn extend(&mut self, other: WaypointPlan) -> Result<()> {
        if other.waypoints.first().map(Vec::as_slice) != Some(self.terminus()) {
            return Err(Error::invalid("plans do not join"));
        }
        self.waypoints.extend(other.waypoints.into_iter().skip(1));
        self.radii.extend(other.radii);
        self.degenerate |= other.degenerate;
        Ok(())
    }

    /// `i,gamma_x,gamma_y[,gamma_theta],R_i` with an empty radius on row 0.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let dim = self.waypoints[0].len();
        let mut header = String::from("i,gamma_x,gamma_y");
        if dim == 3 {
            header.push_str(",gamma_theta");
        }
        writeln!(w, "{header},R_i")?;
        for (i, g) in self.waypoints.iter().enumerate() {
            write!(w, "{i}")?;
            for x in g {
                write!(w, ",{x:?}")?;
            }
            if i == 0 {
                writeln!(w, ",")?;
            } else {
                writeln!(w, ",{:?}", self.radii[i - 1])?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R, epsilon: f64, horizon: f64, metric: Metric) -> Result<Self> {
        let parse = |detail: String| Error::Parse { what: "plan CSV", detail };
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| parse("empty file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let dim = cols.len().checked_sub(2).filter(|d| *d == 2 || *d == 3);
        let dim = dim.ok_or_else(|| parse(format!("bad header {header:?}")))?;
        let mut waypoints = Vec::new();
        let mut radii = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(parse(format!("line {}: expected {} fields", lineno + 2, dim + 2)));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| parse(format!("line {}: {e}", lineno + 2)));
            waypoints.push(fields[1..=dim].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?);
            if waypoints.len() > 1 {
                radii.push(num(fields[dim + 1])?);
            }
        }
        if waypoints.is_empty() {
            return Err(parse("no waypoints".into()));
        }
        Ok(Self { waypoints, radii, epsilon, horizon, metric, degenerate: false })
    }
}

/// Points on spheres of the given radii around `center`, measured in the
/// plan metric. For SE(2) the heading offset `dθ` is recovered from the
/// embedded chord `2 sin(dθ/2)`.
pub(crate) fn ball_samples(center: &[f64], radii: &[f64], per_shell: usize, metric: Metric) -> Vec<Vec<f64>> {
    let mut out = vec![center.to_vec()];
    let dim = center.len();
    for &rho in radii {
        if dim == 2 {
            for s in 0..per_shell {
                let a = 2.0 * PI * s as f64 / per_shell as f64;
                out.push(vec![center[0] + rho * a.cos(), center[1] + rho * a.sin()]);
            }
            continue;
        }
        // Fibonacci sphere in three dimensions.
        let golden = PI * (3.0 - 5f64.sqrt());
        for s in 0..per_shell {
            let z = 1.0 - 2.0 * (s as f64 + 0.5) / per_shell as f64;
            let ring = (1.0 - z * z).sqrt();
            let a = golden * s as f64;
            let v = [ring * a.cos(), ring * a.sin(), z];
            let mut p = center.to_vec();
            p[0] += rho * v[0];
            p[1] += rho * v[1];
            match metric {
                Metric::Euclidean => p[2] += rho * v[2],
                Metric::Se2Embedded => {
                    let chord = (rho * v[2]).clamp(-2.0, 2.0);
                    p[2] += 2.0 * (chord / 2.0).asin();
                }
            }
            out.push(p);
        }
    }
    out
}

fn q_extrema(nf: &NavFunction, center: &[f64], epsilon: f64) -> Option<(f64, f64)> {
    let samples = ball_samples(
        center,
        &[0.5 * epsilon, epsilon * SELECTOR_INFLATION],
        if center.len() == 2 { 48 } else { 96 },
        nf.metric,
    );
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &samples {
        let v = nf.value(s).ok()?;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Some((lo, hi))
}

/// Greedy waypoint selection along `path`.
///
/// From each waypoint the scan runs backward from the path terminus and takes
/// the first point that is more than `2ε` away, admits an outer radius under
/// the configured policy, and lowers `Q` by the required margin over both
/// `ε`-balls. Points closer than `2ε` to the terminus are skipped so the last
/// hop stays admissible.
pub fn select_waypoints(path: &[Vec<f64>], nf: &NavFunction, config: &PlannerConfig) -> Result<WaypointPlan> {
    config.validate()?;
    let eps = config.epsilon;
    let metric = nf.metric;
    let Some(terminus) = path.last() else {
        return Err(Error::invalid("empty path"));
    };
    let start = &path[0];
    let mut plan = WaypointPlan {
        waypoints: vec![start.clone()],
        radii: Vec::new(),
        epsilon: eps,
        horizon: config.horizon,
        metric,
        degenerate: false,
    };
    if path.len() == 1 || metric.distance(start, terminus) <= 2.0 * eps {
        let clear = nf.world.clearance(terminus);
        let r_min = metric.distance(start, terminus) + 2.0 * eps;
        let radius = config
            .radius
            .pick(r_min, clear)
            .ok_or_else(|| Error::InfeasiblePlan(format!("no admissible radius at the terminus {terminus:?}")))?;
        plan.waypoints.push(terminus.clone());
        plan.radii.push(radius);
        plan.degenerate = true;
        return Ok(plan);
    }

    let mut current = 0usize;
    while current + 1 < path.len() {
        let prev = &path[current];
        let Some((prev_lo, _)) = q_extrema(nf, prev, eps) else {
            return Err(Error::InfeasiblePlan(format!("ε-ball around {prev:?} leaves free space")));
        };
        let margin = config.eta(metric.norm(prev));
        let mut chosen = None;
        for j in (current + 1..path.len()).rev() {
            let cand = &path[j];
            let is_terminus = j + 1 == path.len();
            if !is_terminus && metric.distance(cand, terminus) <= 2.0 * eps {
                continue;
            }
            let Ok((r_min, r_max)) = radius_bounds(prev, cand, &nf.world, eps, metric) else {
                continue;
            };
            let Some(radius) = config.radius.pick(r_min, r_max) else {
                continue;
            };
            let Some((_, cand_hi)) = q_extrema(nf, cand, eps) else {
                continue;
            };
            if cand_hi - prev_lo <= -margin {
                chosen = Some((j, radius));
                break;
            }
        }
        let Some((j, radius)) = chosen else {
            return Err(Error::InfeasiblePlan(format!("no admissible waypoint after {prev:?}; try a smaller ε")));
        };
        plan.waypoints.push(path[j].clone());
        plan.radii.push(radius);
        current = j;
    }
    Ok(plan)
}

/// Iterates horizon-length paths and selections until the plan reaches the
/// goal, as a receding-horizon planner would when every waypoint is reached
/// exactly.
pub fn plan_to_goal(nf: &NavFunction, q0: &[f64], config: &PlannerConfig, max_horizons: usize) -> Result<WaypointPlan> {
    let path = reference_path(nf, q0, config.horizon, config.step, config.epsilon)?;
    let mut plan = select_waypoints(&path, nf, config)?;
    for _ in 1..max_horizons {
        if plan.reaches_goal() {
            return Ok(plan);
        }
        let from = plan.terminus().to_vec();
        let path = reference_path(nf, &from, config.horizon, config.step, config.epsilon)?;
        plan.extend(select_waypoints(&path, nf, config)?)?;
    }
    if plan.reaches_goal() {
        Ok(plan)
    } else {
        Err(Error::InfeasiblePlan(format!(
            "goal not reached within {max_horizons} horizons; last waypoint {:?}",
            plan.terminus()
        )))
    }
}

/// A condition violated by a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanViolation {
    pub segment: usize,
    pub condition: &'static str,
    pub detail: String,
}

/// Independent verification of spacing, containment, obstacle clearance and
/// `Q` decrease for every segment of `plan`.
pub fn check_plan(plan: &WaypointPlan, world: &SphereWorld, k: u32, c_eta: f64) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    let eps = plan.epsilon;
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        if a.len() == 3 {
            s += match plan.metric {
                Metric::Euclidean => (a[2] - b[2]).powi(2),
                Metric::Se2Embedded => (2.0 * ((a[2] - b[2]) / 2.0).sin()).powi(2),
            };
        }
        s.sqrt()
    };
    let nav = |q: &[f64]| -> Option<f64> {
        let p2 = q[0] * q[0] + q[1] * q[1];
        let mut beta = world.outer_radius.powi(2) - p2;
        for o in &world.obstacles {
            beta *= (q[0] - o.center[0]).powi(2) + (q[1] - o.center[1]).powi(2) - o.radius.powi(2);
        }
        if beta < 0.0 || world.obstacles.iter().any(|o| o.beta(q) < 0.0) {
            return None;
        }
        let zero = vec![0.0; q.len()];
        let r = dist(q, &zero);
        let num = r.powi(2 * k as i32);
        Some((num / (num + beta)).powf(1.0 / k as f64))
    };
    let extrema = |c: &[f64]| -> Option<(f64, f64)> {
        let shells: Vec<f64> = (1..=4).map(|s| eps * s as f64 / 4.0).collect();
        let pts = ball_samples(c, &shells, if c.len() == 2 { 180 } else { 400 }, plan.metric);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in &pts {
            let v = nav(p)?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Some((lo, hi))
    };
    for i in 1..plan.waypoints.len() {
        let prev = &plan.waypoints[i - 1];
        let cur = &plan.waypoints[i];
        let r_i = plan.radii[i - 1];
        let d = dist(prev, cur);
        let mut fail = |condition, detail: String| out.push(PlanViolation { segment: i, condition, detail });
        if !plan.degenerate && !(d > 2.0 * eps) {
            fail("spacing", format!("‖γ_{{i−1}} − γ_i‖ = {d} ≤ 2ε"));
        }
        if !(r_i - 2.0 * eps > d) {
            fail("containment", format!("R_i − 2ε = {} ≤ {d}", r_i - 2.0 * eps));
        }
        let wall = world.outer_radius - cur[0].hypot(cur[1]);
        let nearest = world
            .obstacles
            .iter()
            .map(|o| (cur[0] - o.center[0]).hypot(cur[1] - o.center[1]) - o.radius)
            .fold(wall, f64::min);
        if !(r_i < nearest) {
            fail("clearance", format!("R_i = {r_i} ≥ nearest obstacle distance {nearest}"));
        }
        if plan.degenerate {
            continue;
        }
        match (extrema(prev), extrema(cur)) {
            (Some((prev_lo, _)), Some((_, cur_hi))) => {
                let eta = c_eta * dist(prev, &vec![0.0; prev.len()]).powi(2);
                if !(cur_hi - prev_lo <= -eta) {
                    fail("decrease", format!("max Q near γ_i − min Q near γ_{{i−1}} = {}", cur_hi - prev_lo));
                }
            }
            _ => fail("decrease", "ε-ball leaves free space".into()),
        }
    }
    out
}
