//! The switched closed loop that runs a plan one waypoint at a time and
//! recovers after forbidden exits.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::control::{recovery_domain, AnnulusSolutionMode, AnnulusValueField, ExitController};
use crate::error::{Error, Result};
use crate::field::{FieldController, GridField};
use crate::geometry::{AnnulusDomain, Region, SphereWorld};
use crate::planner::{reference_path, select_waypoints, NavFunction, PlannerConfig, WaypointPlan};
use crate::sde::{
    csv_header, first_exit, simulate_until_exit_refined, Controller, ExitKind, Input, RngStream, SdeModel, State,
    StepRefinement,
};
use crate::stats::{mean_std, wald_or_rule_of_three, wilson, Proportion, Z95};

/// Safety net against endless replanning.
const MAX_SEGMENTS: usize = 100_000;

/// Where per-domain feedback laws come from.
#[derive(Debug, Clone)]
pub enum ControllerSource {
    /// Closed-form annulus solution; needs a Euclidean domain.
    ClosedForm(AnnulusSolutionMode),
    /// Precomputed fields, matched to domains by `(ε, R)`.
    Fields(Vec<Arc<GridField>>),
}

type BoxedController<const N: usize, const M: usize> = Box<dyn Controller<N, M> + Send + Sync>;

impl ControllerSource {
    pub fn build<const N: usize, const M: usize>(
        &self,
        model: &SdeModel<N, M>,
        domain: &AnnulusDomain,
        u_max: Option<f64>,
    ) -> Result<BoxedController<N, M>> {
        match self {
            ControllerSource::ClosedForm(mode) => {
                let field = AnnulusValueField::new(domain.clone(), *mode)?;
                Ok(Box::new(ExitController::new(model.clone(), field, u_max)?))
            }
            ControllerSource::Fields(fields) => {
                let field = fields
                    .iter()
                    .find(|f| {
                        same(f.domain.inner_radius, domain.inner_radius)
                            && same(f.domain.outer_radius, domain.outer_radius)
                    })
                    .ok_or_else(|| {
                        Error::invalid(format!("no field for ε = {}, R = {}", domain.inner_radius, domain.outer_radius))
                    })?;
                let mut target = domain.clone();
                target.inner_radius = field.domain.inner_radius;
                target.outer_radius = field.domain.outer_radius;
                Ok(Box::new(FieldController::new(field.clone(), model.clone(), target, u_max)?))
            }
        }
    }

    /// Largest usable outer radius in `[lo, hi]` for goal radius `eps`.
    fn snap_radius(&self, eps: f64, lo: f64, hi: f64) -> Option<f64> {
        match self {
            ControllerSource::ClosedForm(_) => (hi >= lo).then_some(hi),
            ControllerSource::Fields(fields) => fields
                .iter()
                .filter(|f| same(f.domain.inner_radius, eps))
                .map(|f| f.domain.outer_radius)
                .filter(|&r| r >= lo && r <= hi)
                .fold(None, |best: Option<f64>, r| Some(best.map_or(r, |b| b.max(r)))),
        }
    }

    /// Outer radii controllers exist for, when restricted.
    pub fn available_radii(&self) -> Option<Vec<f64>> {
        match self {
            ControllerSource::ClosedForm(_) => None,
            ControllerSource::Fields(fields) => Some(fields.iter().map(|f| f.domain.outer_radius).collect()),
        }
    }
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Plan refresh at each waypoint arrival.
#[derive(Debug, Clone)]
pub struct Replanner {
    pub nav: NavFunction,
    pub config: PlannerConfig,
}

impl Replanner {
    fn plan_from(&self, q: &[f64]) -> Result<WaypointPlan> {
        let c = &self.config;
        let path = reference_path(&self.nav, q, c.horizon, c.step, c.epsilon)?;
        select_waypoints(&path, &self.nav, c)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    pub dt: f64,
    pub u_max: Option<f64>,
    pub recovery: bool,
    /// Per-segment time cap; defaults to `10⁴ dt`.
    pub segment_time_cap: Option<f64>,
    pub max_recoveries: usize,
    pub replan: Option<Replanner>,
    /// Step shortening near each domain's outer wall.
    pub refine: Option<StepRefinement>,
}

impl EpisodeOptions {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            u_max: None,
            recovery: false,
            segment_time_cap: None,
            max_recoveries: 50,
            replan: None,
            refine: Some(StepRefinement::for_dt(dt)),
        }
    }

    pub fn time_cap(&self) -> f64 {
        self.segment_time_cap.unwrap_or(1e4 * self.dt)
    }
}

/// Sampled states of a whole episode. `stage` is the running waypoint count
/// (1 for the first target) and never decreases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace<const N: usize, const M: usize> {
    pub times: Vec<f64>,
    pub states: Vec<State<N>>,
    /// `inputs[k]` acts on `[times[k], times[k + 1])`.
    pub inputs: Vec<Input<M>>,
    pub stage: Vec<usize>,
    pub recovery: Vec<bool>,
}

impl<const N: usize, const M: usize> EpisodeTrace<N, M> {
    /// `t,q..,u..,i,recovery`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", csv_header(N, M, &["i", "recovery"]))?;
        for k in 0..self.states.len() {
            write!(w, "{}", self.times[k])?;
            for x in self.states[k].iter() {
                write!(w, ",{x}")?;
            }
            match self.inputs.get(k) {
                Some(u) => u.iter().try_for_each(|x| write!(w, ",{x}"))?,
                None => write!(w, "{}", ",".repeat(M))?,
            }
            writeln!(w, ",{},{}", self.stage[k], u8::from(self.recovery[k]))?;
        }
        Ok(())
    }
}

/// One call of the exit-time controller on one domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentRecord {
    pub stage: usize,
    pub recovery: bool,
    pub exit_kind: ExitKind,
    pub t_start: f64,
    pub t_end: f64,
    pub center: Vec<f64>,
    pub outer_radius: f64,
}

impl SegmentRecord {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

pub fn write_segments_csv<W: Write>(segments: &[SegmentRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "segment,i,recovery,exit_kind,t_start,t_end,R,center")?;
    for (s, r) in segments.iter().enumerate() {
        let center: Vec<String> = r.center.iter().map(|x| x.to_string()).collect();
        writeln!(
            w,
            "{s},{},{},{},{},{},{},{}",
            r.stage,
            u8::from(r.recovery),
            r.exit_kind,
            r.t_start,
            r.t_end,
            r.outer_radius,
            center.join(" ")
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome<const N: usize, const M: usize> {
    pub reached_goal: bool,
    /// Whether any sampled state touched an obstacle or the outer wall.
    pub obstacle_contact: bool,
    pub total_time: f64,
    pub switches: usize,
    pub recoveries: usize,
    /// Waypoint count the switches must not exceed, grown on every replan.
    pub switch_bound: usize,
    pub diagnostic: Option<String>,
    pub trace: EpisodeTrace<N, M>,
    pub segments: Vec<SegmentRecord>,
}

struct Recorder<'w, const N: usize, const M: usize> {
    world: &'w SphereWorld,
    trace: EpisodeTrace<N, M>,
    segments: Vec<SegmentRecord>,
    contact: bool,
}

impl<const N: usize, const M: usize> Recorder<'_, N, M> {
    fn now(&self) -> f64 {
        *self.trace.times.last().expect("trace starts with q0")
    }

    fn absorb(
        &mut self,
        traj: crate::sde::Trajectory<N, M>,
        stage: usize,
        recovery: bool,
        domain: &AnnulusDomain,
    ) -> ExitKind {
        let t0 = self.now();
        if let Some(last) = self.trace.recovery.last_mut() {
            *last = recovery;
        }
        if let Some(last) = self.trace.stage.last_mut() {
            *last = stage;
        }
        for (k, q) in traj.states.iter().enumerate().skip(1) {
            self.contact |= self.world.in_collision(q.as_slice());
            self.trace.times.push(t0 + traj.times[k]);
            self.trace.states.push(*q);
            self.trace.stage.push(stage);
            self.trace.recovery.push(recovery);
        }
        self.trace.inputs.extend(traj.inputs);
        self.segments.push(SegmentRecord {
            stage,
            recovery,
            exit_kind: traj.exit_kind,
            t_start: t0,
            t_end: self.now(),
            center: domain.center.clone(),
            outer_radius: domain.outer_radius,
        });
        traj.exit_kind
    }
}

/// Runs the switched system from `q0`, which must lie in the goal ball of
/// `γ_0`, until the origin's goal ball is reached, an obstacle is touched, a
/// segment times out, or recovery is impossible.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<const N: usize, const M: usize>(
    world: &SphereWorld,
    plan: &WaypointPlan,
    source: &ControllerSource,
    model: &SdeModel<N, M>,
    q0: &State<N>,
    stream: &RngStream,
    options: &EpisodeOptions,
) -> Result<EpisodeOutcome<N, M>> {
    if plan.is_empty() {
        return Err(Error::invalid("plan has no segments"));
    }
    if plan.waypoints[0].len() != N {
        return Err(Error::invalid(format!("plan waypoints are not {N}-dimensional")));
    }
    if plan.metric.distance(q0.as_slice(), &plan.waypoints[0]) > plan.epsilon {
        return Err(Error::invalid("initial state is not within ε of the first waypoint"));
    }
    let dt = options.dt;
    let cap = options.time_cap();
    let mut rec = Recorder {
        world,
        trace: EpisodeTrace {
            times: vec![0.0],
            states: vec![*q0],
            inputs: Vec::new(),
            stage: vec![1],
            recovery: vec![false],
        },
        segments: Vec::new(),
        contact: world.in_collision(q0.as_slice()),
    };
    let mut plan = plan.clone();
    let mut i = 1usize;
    let mut q = *q0;
    let mut switches = 0usize;
    let mut recoveries = 0usize;
    let mut switch_bound = plan.len();
    let mut reached_goal = false;
    let mut diagnostic = None;
    let mut segment_counter = 0u64;

    'episode: while !rec.contact {
        if rec.segments.len() >= MAX_SEGMENTS {
            diagnostic = Some(format!("gave up after {MAX_SEGMENTS} segments"));
            break;
        }
        let stage = switches + 1;
        let domain = plan.domain(i)?;
        let exit = match domain.classify(q.as_slice()) {
            Region::GoalN => ExitKind::GoalN,
            Region::Interior => {
                let controller = source.build(model, &domain, options.u_max)?;
                let seg_stream = stream.child(segment_counter);
                segment_counter += 1;
                let traj = simulate_until_exit_refined(
                    model,
                    &*controller,
                    &domain,
                    &q,
                    dt,
                    cap,
                    &seg_stream,
                    options.refine.as_ref(),
                )?;
                let kind = rec.absorb(traj, stage, false, &domain);
                q = *rec.trace.states.last().expect("non-empty");
                kind
            }
            Region::ForbiddenM | Region::Exterior => {
                diagnostic = Some(format!("state {:?} starts outside domain {i}", q.as_slice()));
                break;
            }
        };
        match exit {
            ExitKind::GoalN => {
                switches += 1;
                if rec.contact {
                    break;
                }
                if i == plan.len() && plan.reaches_goal() {
                    reached_goal = true;
                    break;
                }
                let refreshed = options.replan.as_ref().and_then(|r| match r.plan_from(q.as_slice()) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        log::debug!("replan from {:?} failed: {e}", q.as_slice());
                        None
                    }
                });
                if let Some(p) = refreshed.filter(|p| !p.is_empty()) {
                    switch_bound = switches + p.len();
                    plan = p;
                    i = 1;
                } else if i < plan.len() {
                    i += 1;
                } else {
                    diagnostic = Some("plan ends short of the goal".into());
                    break;
                }
            }
            ExitKind::ForbiddenM => {
                if !options.recovery {
                    diagnostic = Some(format!("forbidden exit from domain {i}"));
                    break;
                }
                // Recover until the state is back inside D_i.
                loop {
                    if rec.contact {
                        break 'episode;
                    }
                    if recoveries >= options.max_recoveries {
                        diagnostic = Some(format!("recovery limit {} reached", options.max_recoveries));
                        break 'episode;
                    }
                    let rec_domain = match recovery_target(q.as_slice(), &domain, world, source) {
                        Ok(d) => d,
                        Err(e) => {
                            diagnostic = Some(e.to_string());
                            break 'episode;
                        }
                    };
                    recoveries += 1;
                    let controller = source.build(model, &rec_domain, options.u_max)?;
                    let seg_stream = stream.child(segment_counter);
                    segment_counter += 1;
                    let traj = simulate_until_exit_refined(
                        model,
                        &*controller,
                        &rec_domain,
                        &q,
                        dt,
                        cap,
                        &seg_stream,
                        options.refine.as_ref(),
                    )?;
                    let kind = rec.absorb(traj, stage, true, &rec_domain);
                    q = *rec.trace.states.last().expect("non-empty");
                    match kind {
                        ExitKind::GoalN | ExitKind::ForbiddenM => {
                            if domain.classify(q.as_slice()) != Region::ForbiddenM {
                                break;
                            }
                        }
                        _ => {
                            diagnostic = Some(format!("recovery toward {:?} timed out", rec_domain.center));
                            break 'episode;
                        }
                    }
                }
            }
            ExitKind::Timeout | ExitKind::None => {
                diagnostic = Some(format!("segment {i} timed out after {cap} s"));
                break;
            }
        }
    }
    if rec.contact && diagnostic.is_none() {
        diagnostic = Some("obstacle contact".into());
    }
    Ok(EpisodeOutcome {
        reached_goal: reached_goal && !rec.contact,
        obstacle_contact: rec.contact,
        total_time: rec.now(),
        switches,
        recoveries,
        switch_bound,
        diagnostic,
        trace: rec.trace,
        segments: rec.segments,
    })
}

/// Recovery domain for a state outside `target`: the exit-ray construction
/// when it is feasible, otherwise a homing domain that moves the state
/// toward the center of `target`.
fn recovery_target(
    q: &[f64],
    target: &AnnulusDomain,
    world: &SphereWorld,
    source: &ControllerSource,
) -> Result<AnnulusDomain> {
    let direct = recovery_domain(q, target, world).and_then(|d| {
        if source.available_radii().is_none() {
            return Ok(d);
        }
        let need = d.outer_distance(q) + d.inner_radius;
        let radius = source
            .snap_radius(d.inner_radius, need, d.outer_radius)
            .ok_or_else(|| Error::RecoveryInfeasible(format!("no field radius in [{need}, {}]", d.outer_radius)))?;
        AnnulusDomain::new(d.center, d.inner_radius, radius, d.metric)
    });
    match direct {
        Ok(d) => Ok(d),
        Err(first) => homing_domain(q, target, world, source).map_err(|_| first),
    }
}

/// Domain whose goal ball lies `R − 2ε` from `q` toward the center of
/// `target`, with `R` as large as obstacles and available controllers allow.
fn homing_domain(
    q: &[f64],
    target: &AnnulusDomain,
    world: &SphereWorld,
    source: &ControllerSource,
) -> Result<AnnulusDomain> {
    let eps = target.inner_radius;
    let planar = match target.metric {
        crate::geometry::Metric::Euclidean => q.len(),
        crate::geometry::Metric::Se2Embedded => 2,
    };
    let dist = (0..planar).map(|k| (target.center[k] - q[k]).powi(2)).sum::<f64>().sqrt();
    let center_at = |radius: f64| -> Vec<f64> {
        let mut c = q.to_vec();
        for k in 0..planar {
            c[k] += (radius - 2.0 * eps) * (target.center[k] - q[k]) / dist;
        }
        c
    };
    let mut radius = target.outer_radius;
    for _ in 0..64 {
        let snapped = source.snap_radius(eps, 3.0 * eps, radius).filter(|r| *r > 3.0 * eps);
        let Some(r) = snapped else { break };
        let c = center_at(r);
        let allowed = world.clearance(&c).min(target.outer_radius);
        if allowed >= r {
            return AnnulusDomain::new(c, eps, r, target.metric);
        }
        radius = allowed.min(r * (1.0 - 1e-9));
    }
    Err(Error::RecoveryInfeasible(format!("no homing domain from {q:?}")))
}

/// Runs `seeds.len()` independent episodes in parallel; episode `e` draws
/// from `RngStream::derive(base_seed, e, 0)`. Output order follows input.
#[allow(clippy::too_many_arguments)]
pub fn run_batch<const N: usize, const M: usize>(
    world: &SphereWorld,
    plan: &WaypointPlan,
    source: &ControllerSource,
    model: &SdeModel<N, M>,
    q0: &State<N>,
    base_seed: u64,
    n_episodes: usize,
    options: &EpisodeOptions,
) -> Result<Vec<EpisodeOutcome<N, M>>> {
    (0..n_episodes as u64)
        .into_par_iter()
        .map(|e| run_episode(world, plan, source, model, q0, &RngStream::derive(base_seed, e, 0), options))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusEstimate {
    pub radius: f64,
    pub success: Proportion,
    pub timeouts: usize,
}

/// Goal-exit frequency from `γ + r e₀` for each radius `r`.
#[allow(clippy::too_many_arguments)]
pub fn success_probability_map<const N: usize, const M: usize, C>(
    controller: &C,
    domain: &AnnulusDomain,
    model: &SdeModel<N, M>,
    radii: &[f64],
    n_runs: usize,
    dt: f64,
    t_max: f64,
    base_seed: u64,
) -> Result<Vec<RadiusEstimate>>
where
    C: Controller<N, M> + ?Sized,
{
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be positive"));
    }
    let steps = (t_max / dt).floor() as usize;
    radii
        .iter()
        .enumerate()
        .map(|(ri, &r)| {
            if !(r > domain.inner_radius && r < domain.outer_radius) {
                return Err(Error::invalid(format!("radius {r} outside (ε, R)")));
            }
            let mut q0 = State::<N>::from_column_slice(&domain.center);
            q0[0] += r;
            let kinds = (0..n_runs as u64)
                .into_par_iter()
                .map(|run| {
                    first_exit(model, controller, domain, &q0, dt, steps, &RngStream::derive(base_seed, ri as u64, run))
                        .map(|(k, _)| k)
                })
                .collect::<Result<Vec<_>>>()?;
            let hits = kinds.iter().filter(|k| **k == ExitKind::GoalN).count();
            let timeouts = kinds.iter().filter(|k| **k == ExitKind::Timeout).count();
            Ok(RadiusEstimate { radius: r, success: wilson(hits, n_runs, Z95), timeouts })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTime {
    pub stage: usize,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub success_ci: [f64; 2],
    pub obstacle_contacts: usize,
    pub forbidden_exits: usize,
    pub switch_bound_violations: usize,
    pub mean_total_time: f64,
    /// Mean duration of the non-recovery segment of each stage.
    pub stage_exit_times: Vec<StageTime>,
    pub switch_histogram: BTreeMap<usize, usize>,
    pub recovery_histogram: BTreeMap<usize, usize>,
    pub total_recoveries: usize,
}

pub fn batch_stats<const N: usize, const M: usize>(outcomes: &[EpisodeOutcome<N, M>]) -> Result<BatchSummary> {
    if outcomes.is_empty() {
        return Err(Error::invalid("batch_stats needs at least one outcome"));
    }
    let n = outcomes.len();
    let successes = outcomes.iter().filter(|o| o.reached_goal).count();
    let ci = wald_or_rule_of_three(successes, n, Z95);
    let mut by_stage: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut switch_histogram = BTreeMap::new();
    let mut recovery_histogram = BTreeMap::new();
    let mut forbidden = 0;
    for o in outcomes {
        *switch_histogram.entry(o.switches).or_insert(0) += 1;
        *recovery_histogram.entry(o.recoveries).or_insert(0) += 1;
        for s in &o.segments {
            if s.exit_kind == ExitKind::ForbiddenM {
                forbidden += 1;
            }
            if !s.recovery {
                by_stage.entry(s.stage).or_default().push(s.duration());
            }
        }
    }
    let stage_exit_times = by_stage
        .into_iter()
        .map(|(stage, d)| {
            let (mean, std) = mean_std(&d);
            StageTime { stage, count: d.len(), mean, std }
        })
        .collect();
    Ok(BatchSummary {
        episodes: n,
        success_rate: ci.estimate,
        success_ci: [ci.lower, ci.upper],
        obstacle_contacts: outcomes.iter().filter(|o| o.obstacle_contact).count(),
        forbidden_exits: forbidden,
        switch_bound_violations: outcomes.iter().filter(|o| o.switches > o.switch_bound).count(),
        mean_total_time: outcomes.iter().map(|o| o.total_time).sum::<f64>() / n as f64,
        stage_exit_times,
        switch_histogram,
        recovery_histogram,
        total_recoveries: outcomes.iter().map(|o| o.recoveries).sum(),
    })
}

/// `seed,reached_goal,obstacle_contact,total_time,switches,recoveries,diagnostic`.
pub fn write_outcomes_csv<const N: usize, const M: usize, W: Write>(
    outcomes: &[EpisodeOutcome<N, M>],
    seeds: &[u64],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "seed,reached_goal,obstacle_contact,total_time,switches,recoveries,diagnostic")?;
    for (o, s) in outcomes.iter().zip(seeds) {
        writeln!(
            w,
            "{s},{},{},{},{},{},{}",
            u8::from(o.reached_goal),
            u8::from(o.obstacle_contact),
            o.total_time,
            o.switches,
            o.recoveries,
            o.diagnostic.as_deref().unwrap_or("").replace(',', ";")
        )?;
    }
    Ok(())
}
