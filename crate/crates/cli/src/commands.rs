use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde_json::json;
use srhc_core::control::{AnnulusValueField, ExitController};
use srhc_core::executor::{
    batch_stats, run_batch, success_probability_map, write_outcomes_csv, write_segments_csv, BatchSummary,
    ControllerSource, EpisodeOptions, RadiusEstimate, Replanner,
};
use srhc_core::field::{estimate_g_grid, FieldController, GridField, GridSpec};
use srhc_core::geometry::{AnnulusDomain, SphereWorld};
use srhc_core::planner::{check_plan, plan_to_goal, NavFunction, WaypointPlan};
use srhc_core::sde::{Controller, SdeModel, State, StepRefinement};

use crate::config::{ControllerMode, Model, ModelName, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest;

pub const PLAN_CSV: &str = "plan.csv";
pub const FIELD_DIR: &str = "fields";
pub const TRACE_DIR: &str = "traces";

/// A loaded configuration bound to its run directory and seed.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub config_dir: PathBuf,
    pub out: PathBuf,
    pub paper_scale: bool,
}

impl Context {
    pub fn load(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>, paper_scale: bool) -> CliResult<Self> {
        let mut config = RunConfig::load(config_path)?;
        if let Some(s) = seed {
            config.execution.seed = s;
        }
        let config_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = match out.or_else(|| config.output_dir.clone()) {
            Some(o) => o,
            None => {
                let stem = config_path.file_stem().map(|s| s.to_string_lossy().into_owned());
                PathBuf::from("runs").join(stem.unwrap_or_else(|| "run".into()))
            }
        };
        Ok(Self { config, config_dir, out, paper_scale })
    }

    pub fn from_config(config: RunConfig, config_dir: PathBuf, out: PathBuf) -> CliResult<Self> {
        config.validate()?;
        Ok(Self { config, config_dir, out, paper_scale: false })
    }

    pub fn seed(&self) -> u64 {
        self.config.execution.seed
    }

    pub fn world(&self) -> CliResult<SphereWorld> {
        let path = self.config_dir.join(&self.config.world);
        if !path.is_file() {
            return Err(CliError::config(format!("world file {} not found", path.display())));
        }
        Ok(SphereWorld::load(&path)?)
    }

    fn nav(&self, world: SphereWorld) -> CliResult<NavFunction> {
        Ok(NavFunction::new(world, self.config.planner.k, self.config.model.metric())?)
    }

    fn prepare_out(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", self.out.display())))?;
        let mut cfg = self.config.clone();
        cfg.output_dir = None;
        cfg.world = PathBuf::from("world.toml");
        fs::write(self.out.join("config.toml"), cfg.to_toml_string())?;
        fs::write(self.out.join("world.toml"), self.world()?.to_toml_string())?;
        Ok(())
    }

    fn finish(&self) -> CliResult<()> {
        manifest::write(&self.out)?;
        Ok(())
    }

    pub fn load_plan(&self) -> CliResult<WaypointPlan> {
        let path = self.out.join(PLAN_CSV);
        let file = File::open(&path).map_err(|_| {
            CliError::config(format!("no plan at {}; run `srhc plan` with this config first", path.display()))
        })?;
        let p = &self.config.planner;
        Ok(WaypointPlan::read_csv(BufReader::new(file), p.epsilon, p.horizon, self.config.model.metric())?)
    }

    /// Fields in the run directory whose goal radius matches `planner.epsilon`,
    /// in file-name order.
    pub fn load_fields(&self) -> CliResult<Vec<Arc<GridField>>> {
        let dir = self.out.join(FIELD_DIR);
        let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "fkg1"))
                .collect(),
            Err(_) => Vec::new(),
        };
        paths.sort();
        let eps = self.config.planner.epsilon;
        let mut fields = Vec::new();
        for p in paths {
            let f = GridField::load(&p)?;
            if (f.domain.inner_radius - eps).abs() <= 1e-12 * eps && f.domain.metric == self.config.model.metric() {
                fields.push(Arc::new(f));
            }
        }
        if fields.is_empty() {
            return Err(CliError::config(format!(
                "no fields for ε = {eps} under {}; run `srhc field` with this config first",
                dir.display()
            )));
        }
        Ok(fields)
    }

    fn source(&self) -> CliResult<ControllerSource> {
        match self.config.controller.mode.closed_form() {
            Some(mode) => Ok(ControllerSource::ClosedForm(mode)),
            None => Ok(ControllerSource::Fields(self.load_fields()?)),
        }
    }

    fn episode_options(&self, world: &SphereWorld) -> CliResult<EpisodeOptions> {
        let e = &self.config.execution;
        let c = &self.config.controller;
        let mut o = EpisodeOptions::new(e.dt);
        o.u_max = c.u_max;
        o.recovery = c.recovery;
        o.segment_time_cap = e.segment_time_cap;
        o.refine = e.boundary_refinement.then(|| StepRefinement::for_dt(e.dt));
        if c.replan {
            o.replan = Some(Replanner { nav: self.nav(world.clone())?, config: self.config.planner.clone() });
        }
        Ok(o)
    }
}

pub fn field_file_name(eps: f64, outer: f64) -> String {
    format!("field_eps{eps}_R{outer}.fkg1")
}

#[derive(Debug, Clone)]
pub struct PlanReport {
    pub plan: WaypointPlan,
    pub path: PathBuf,
}

/// Plans from `execution.start` to the origin and writes `plan.csv` and
/// `plan.json`.
pub fn cmd_plan(ctx: &Context) -> CliResult<PlanReport> {
    let world = ctx.world()?;
    ctx.prepare_out()?;
    let nav = ctx.nav(world.clone())?;
    let cfg = &ctx.config;
    let plan = plan_to_goal(&nav, &cfg.execution.start, &cfg.planner, cfg.execution.max_horizons)?;
    let violations = check_plan(&plan, &world, cfg.planner.k, cfg.planner.c_eta);
    if !violations.is_empty() {
        return Err(CliError::Runtime(format!("planner emitted a plan the checker rejects: {violations:?}")));
    }
    let path = ctx.out.join(PLAN_CSV);
    let mut w = BufWriter::new(File::create(&path)?);
    plan.write_csv(&mut w)?;
    w.flush()?;
    let meta = json!({
        "segments": plan.len(),
        "epsilon": plan.epsilon,
        "horizon": plan.horizon,
        "metric": plan.metric.as_str(),
        "degenerate": plan.degenerate,
        "radii": plan.radii,
        "checker_violations": 0,
    });
    write_json(&ctx.out.join("plan.json"), &meta)?;
    info!("plan with {} segments written to {}", plan.len(), path.display());
    ctx.finish()?;
    Ok(PlanReport { plan, path })
}

/// Which annuli `cmd_field` estimates.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldTarget {
    /// Every distinct radius of the stored plan.
    Plan,
    /// The domain around waypoint `i` (1-based) of the stored plan.
    Waypoint(usize),
    Radius(f64),
}

/// Estimates `g` for the requested annuli, centered at the origin, and writes
/// one FKG1 file per outer radius under `fields/`.
pub fn cmd_field(ctx: &Context, target: &FieldTarget) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.config;
    if cfg.model.name == ModelName::SingleIntegrator2d && cfg.controller.mode != ControllerMode::Field {
        return Err(CliError::config(
            "single_integrator_2d has a closed-form controller; skip `field` or set controller.mode = \"field\"",
        ));
    }
    let mut radii = match target {
        FieldTarget::Radius(r) => vec![*r],
        FieldTarget::Waypoint(i) => {
            let plan = ctx.load_plan()?;
            if *i == 0 || *i > plan.len() {
                return Err(CliError::config(format!("waypoint {i} outside 1..={}", plan.len())));
            }
            vec![plan.radii[i - 1]]
        }
        FieldTarget::Plan => ctx.load_plan()?.radii,
    };
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    ctx.prepare_out()?;
    let dir = ctx.out.join(FIELD_DIR);
    fs::create_dir_all(&dir)?;
    let (shape, n_paths) = cfg.field_resolution(ctx.paper_scale);
    let mut written = Vec::new();
    for r in radii {
        let path = dir.join(field_file_name(cfg.planner.epsilon, r));
        let field = match cfg.model.build() {
            Model::Planar(m) => estimate(ctx, &m, r, &shape, n_paths)?,
            Model::Omni(m) => estimate(ctx, &m, r, &shape, n_paths)?,
        };
        field.check_invariants()?;
        field.save(&path)?;
        info!("field for R = {r} written to {}", path.display());
        written.push(path);
    }
    ctx.finish()?;
    Ok(written)
}

fn estimate<const N: usize, const M: usize>(
    ctx: &Context,
    model: &SdeModel<N, M>,
    outer: f64,
    shape: &[usize],
    n_paths: u64,
) -> CliResult<GridField> {
    let cfg = &ctx.config;
    let domain = AnnulusDomain::new(vec![0.0; N], cfg.planner.epsilon, outer, cfg.model.metric())?;
    let spec = GridSpec::covering(&domain, shape.to_vec())?;
    info!("estimating g on {:?} nodes with {n_paths} paths each (ε = {}, R = {outer})", shape, cfg.planner.epsilon);
    Ok(estimate_g_grid(model, &domain, &spec, n_paths, cfg.field.dt, ctx.seed())?)
}

/// Runs `execution.n_runs` episodes along the stored plan and writes traces,
/// `outcomes.csv` and `summary.json`.
pub fn cmd_simulate(ctx: &Context) -> CliResult<BatchSummary> {
    let world = ctx.world()?;
    let plan = ctx.load_plan()?;
    let source = ctx.source()?;
    ctx.prepare_out()?;
    let summary = match ctx.config.model.build() {
        Model::Planar(m) => simulate(ctx, &world, &plan, &source, &m)?,
        Model::Omni(m) => simulate(ctx, &world, &plan, &source, &m)?,
    };
    ctx.finish()?;
    Ok(summary)
}

fn start_state<const N: usize>(start: &[f64]) -> State<N> {
    State::<N>::from_column_slice(start)
}

fn simulate<const N: usize, const M: usize>(
    ctx: &Context,
    world: &SphereWorld,
    plan: &WaypointPlan,
    source: &ControllerSource,
    model: &SdeModel<N, M>,
) -> CliResult<BatchSummary> {
    let e = &ctx.config.execution;
    let options = ctx.episode_options(world)?;
    let q0 = start_state::<N>(&e.start);
    info!("running {} episodes (seed {})", e.n_runs, e.seed);
    let outcomes = run_batch(world, plan, source, model, &q0, e.seed, e.n_runs, &options)?;
    let traces = ctx.out.join(TRACE_DIR);
    if traces.exists() {
        fs::remove_dir_all(&traces)?;
    }
    fs::create_dir_all(&traces)?;
    let keep = e.max_traces.unwrap_or(e.n_runs).min(e.n_runs);
    for (k, o) in outcomes.iter().enumerate().take(keep) {
        let mut w = BufWriter::new(File::create(traces.join(format!("episode_{k:04}.csv")))?);
        o.trace.write_csv(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(traces.join(format!("episode_{k:04}_segments.csv")))?);
        write_segments_csv(&o.segments, &mut w)?;
        w.flush()?;
    }
    let indices: Vec<u64> = (0..outcomes.len() as u64).collect();
    let mut w = BufWriter::new(File::create(ctx.out.join("outcomes.csv"))?);
    write_outcomes_csv(&outcomes, &indices, &mut w)?;
    w.flush()?;
    let summary = batch_stats(&outcomes)?;
    let failures = outcomes.iter().filter(|o| !o.reached_goal).count();
    if failures > 0 {
        warn!("{failures} of {} episodes did not reach the goal", outcomes.len());
    }
    let c = &ctx.config.controller;
    let doc = json!({
        "seed": e.seed,
        "n_runs": e.n_runs,
        "dt": e.dt,
        "mode": c.mode,
        "u_max": c.u_max,
        "recovery": c.recovery,
        "replan": c.replan,
        "segments": plan.len(),
        "summary": summary,
    });
    write_json(&ctx.out.join("summary.json"), &doc)?;
    info!("success rate {} over {} episodes", summary.success_rate, summary.episodes);
    Ok(summary)
}

/// Goal-exit probability against start radius for one annulus; writes
/// `success_curve.csv`.
pub fn cmd_sweep(ctx: &Context) -> CliResult<Vec<RadiusEstimate>> {
    let sweep = ctx.config.sweep.clone().ok_or_else(|| CliError::config("missing [sweep] section"))?;
    let source = ctx.source()?;
    ctx.prepare_out()?;
    let rows = match ctx.config.model.build() {
        Model::Planar(m) => sweep_with(ctx, &m, &source, sweep.outer_radius)?,
        Model::Omni(m) => sweep_with(ctx, &m, &source, sweep.outer_radius)?,
    };
    let mut w = BufWriter::new(File::create(ctx.out.join("success_curve.csv"))?);
    writeln!(w, "radius,successes,trials,estimate,lower,upper,timeouts")?;
    for r in &rows {
        let p = &r.success;
        writeln!(w, "{},{},{},{},{},{},{}", r.radius, p.successes, p.trials, p.estimate, p.lower, p.upper, r.timeouts)?;
    }
    w.flush()?;
    ctx.finish()?;
    Ok(rows)
}

fn sweep_with<const N: usize, const M: usize>(
    ctx: &Context,
    model: &SdeModel<N, M>,
    source: &ControllerSource,
    outer: f64,
) -> CliResult<Vec<RadiusEstimate>> {
    let cfg = &ctx.config;
    let sweep = cfg.sweep.as_ref().expect("checked by caller");
    let domain = AnnulusDomain::new(vec![0.0; N], cfg.planner.epsilon, outer, cfg.model.metric())?;
    let controller: Box<dyn Controller<N, M> + Send + Sync> = match source {
        ControllerSource::ClosedForm(mode) => {
            let field = AnnulusValueField::new(domain.clone(), *mode)?;
            Box::new(ExitController::new(model.clone(), field, cfg.controller.u_max)?)
        }
        ControllerSource::Fields(fields) => {
            let field =
                fields.iter().find(|f| (f.domain.outer_radius - outer).abs() <= 1e-12 * outer).ok_or_else(|| {
                    CliError::config(format!("no field for R = {outer}; run `srhc field --radius {outer}`"))
                })?;
            Box::new(FieldController::new(field.clone(), model.clone(), domain.clone(), cfg.controller.u_max)?)
        }
    };
    Ok(success_probability_map(
        &*controller,
        &domain,
        model,
        &sweep.radii,
        sweep.n_runs,
        cfg.execution.dt,
        sweep.t_max,
        cfg.execution.seed,
    )?)
}

/// Writes `x,y,g` on the planar grid nodes of `field` at each heading in
/// `thetas` (ignored for planar fields) under `out/slices/`.
pub fn cmd_slice(field_path: &Path, thetas: &[f64], out: &Path) -> CliResult<Vec<PathBuf>> {
    let field = GridField::load(field_path)?;
    let dir = out.join("slices");
    fs::create_dir_all(&dir)?;
    let stem = field_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let spec = &field.spec;
    let planar = spec.dim() == 2;
    let thetas: Vec<f64> = if planar { vec![0.0] } else { thetas.to_vec() };
    let mut written = Vec::new();
    for theta in thetas {
        let name = if planar { format!("{stem}.csv") } else { format!("{stem}_theta{theta}.csv") };
        let path = dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "x,y,g")?;
        for i in 0..spec.shape[0] {
            for j in 0..spec.shape[1] {
                let x = spec.lower[0] + i as f64 * spec.spacing(0);
                let y = spec.lower[1] + j as f64 * spec.spacing(1);
                let q = if planar { vec![x, y] } else { vec![x, y, theta] };
                writeln!(w, "{x},{y},{}", field.interpolate(&q)?)?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    manifest::write(out)?;
    Ok(written)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
