//! Monte Carlo estimates of the goal-hitting probability on a grid.
//!
//! For each grid node the unforced process `dζ = b dt + G Σ dW` is run from
//! the node until it leaves the annulus, and the node stores the fraction of
//! paths that left through the goal ball. Controls are read off the grid by
//! multilinear interpolation and central differences.
//!
//! # File format
//!
//! All integers and floats are little-endian.
//!
//! | field            | type          |
//! |------------------|---------------|
//! | magic `"FKG1"`   | 4 bytes       |
//! | version          | u32 (= 1)     |
//! | n                | u32           |
//! | periodic mask    | u32, bit i    |
//! | metric tag       | u32           |
//! | shape            | n × u32       |
//! | lower, upper     | 2n × f64      |
//! | ε, R             | 2 × f64       |
//! | γ                | n × f64       |
//! | dt               | f64           |
//! | n_paths          | u64           |
//! | base_seed        | u64           |
//! | values           | Π shape × f64 |
//!
//! Values are row-major with the last axis varying fastest.

use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Rotation2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{control_from_gradient, saturate, G_MIN};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, AnnulusDomain, Metric, Region};
use crate::sde::{first_exit, Control, Controller, ExitKind, FrameSymmetry, Input, RngStream, SdeModel, State};

pub const MAGIC: &[u8; 4] = b"FKG1";
pub const VERSION: u32 = 1;
/// Paths still inside the domain after this many steps count as `M` exits.
pub const MAX_FIELD_STEPS: usize = 10_000_000;
const MAX_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub shape: Vec<usize>,
    pub periodic: Vec<bool>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, shape: Vec<usize>, periodic: Vec<bool>) -> Result<Self> {
        let spec = Self { lower, upper, shape, periodic };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid covering `domain`: a box of half-width `R` on the planar axes and,
    /// for the SE(2) metric, one period `[0, 2π)` in heading.
    pub fn covering(domain: &AnnulusDomain, shape: Vec<usize>) -> Result<Self> {
        let r = domain.outer_radius;
        let c = &domain.center;
        match domain.metric {
            Metric::Euclidean => Self::new(
                c.iter().map(|x| x - r).collect(),
                c.iter().map(|x| x + r).collect(),
                shape,
                vec![false; c.len()],
            ),
            Metric::Se2Embedded => {
                Self::new(vec![c[0] - r, c[1] - r, 0.0], vec![c[0] + r, c[1] + r, TAU], shape, vec![false, false, true])
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.shape.len();
        if n == 0 || n > MAX_DIM {
            return Err(Error::invalid(format!("grid dimension must be 1..={MAX_DIM}, got {n}")));
        }
        if self.lower.len() != n || self.upper.len() != n || self.periodic.len() != n {
            return Err(Error::invalid("grid bounds, shape and periodic flags differ in length"));
        }
        for i in 0..n {
            if self.shape[i] < 3 {
                return Err(Error::invalid(format!("axis {i} needs at least 3 nodes")));
            }
            if !(self.lower[i].is_finite() && self.upper[i].is_finite() && self.lower[i] < self.upper[i]) {
                return Err(Error::invalid(format!("axis {i} has bad bounds")));
            }
            if self.periodic[i] && ((self.upper[i] - self.lower[i]) - TAU).abs() > 1e-12 {
                return Err(Error::invalid(format!("periodic axis {i} must span exactly 2π")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.shape.iter().product()
    }

    /// Node spacing along `axis`. Periodic axes do not repeat the endpoint.
    pub fn spacing(&self, axis: usize) -> f64 {
        let span = self.upper[axis] - self.lower[axis];
        if self.periodic[axis] {
            span / self.shape[axis] as f64
        } else {
            span / (self.shape[axis] - 1) as f64
        }
    }

    /// Coordinates of the node with flat index `flat`.
    pub fn node(&self, mut flat: usize) -> Vec<f64> {
        let n = self.dim();
        let mut q = vec![0.0; n];
        for axis in (0..n).rev() {
            let i = flat % self.shape[axis];
            flat /= self.shape[axis];
            q[axis] = self.lower[axis] + i as f64 * self.spacing(axis);
        }
        q
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (i, s)| acc * s + i)
    }

    fn periodic_mask(&self) -> u32 {
        self.periodic.iter().enumerate().fold(0, |m, (i, &p)| if p { m | (1 << i) } else { m })
    }
}

/// Estimated `g` on a grid, with the provenance needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub domain: AnnulusDomain,
    pub n_paths: u64,
    pub dt: f64,
    pub base_seed: u64,
}

fn unforced<const N: usize, const M: usize>(_: &State<N>) -> Input<M> {
    Input::zeros()
}

/// Runs `n_paths` unforced paths from every interior node. Nodes in the goal
/// ball store 1 and nodes on or beyond the outer wall store 0 without
/// simulation. Path `p` of node `k` draws from `RngStream::derive(base_seed,
/// k, p)`, so the result does not depend on how rayon schedules nodes.
pub fn estimate_g_grid<const N: usize, const M: usize>(
    model: &SdeModel<N, M>,
    domain: &AnnulusDomain,
    spec: &GridSpec,
    n_paths: u64,
    dt: f64,
    base_seed: u64,
) -> Result<GridField> {
    spec.validate()?;
    if spec.dim() != N || domain.dim() != N {
        return Err(Error::invalid(format!(
            "grid has {} axes and domain {} coordinates; model state has {N}",
            spec.dim(),
            domain.dim()
        )));
    }
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be positive"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let planar = match domain.metric {
        Metric::Euclidean => N,
        Metric::Se2Embedded => 2,
    };
    for axis in 0..planar {
        let lo = domain.center[axis] - domain.outer_radius;
        let hi = domain.center[axis] + domain.outer_radius;
        if spec.lower[axis] > lo + 1e-12 || spec.upper[axis] < hi - 1e-12 {
            return Err(Error::invalid(format!("grid axis {axis} does not cover the domain")));
        }
    }
    if domain.metric == Metric::Se2Embedded && !spec.periodic[2] {
        return Err(Error::invalid("heading axis of an SE(2) grid must be periodic"));
    }

    let values = (0..spec.n_nodes())
        .into_par_iter()
        .map(|node| {
            let q = State::<N>::from_column_slice(&spec.node(node));
            match domain.classify(q.as_slice()) {
                Region::GoalN => return Ok(1.0),
                Region::ForbiddenM | Region::Exterior => return Ok(0.0),
                Region::Interior => {}
            }
            let mut hits = 0u64;
            for path in 0..n_paths {
                let stream = RngStream::derive(base_seed, node as u64, path);
                let (kind, _) = first_exit(model, &unforced::<N, M>, domain, &q, dt, MAX_FIELD_STEPS, &stream)?;
                match kind {
                    ExitKind::GoalN => hits += 1,
                    ExitKind::Timeout => {
                        log::warn!("node {node} path {path}: no exit after {MAX_FIELD_STEPS} steps, counted as M")
                    }
                    _ => {}
                }
            }
            Ok(hits as f64 / n_paths as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(GridField { spec: spec.clone(), values, domain: domain.clone(), n_paths, dt, base_seed })
}

impl GridField {
    /// Multilinear interpolation, wrapping periodic axes.
    pub fn interpolate(&self, q: &[f64]) -> Result<f64> {
        let spec = &self.spec;
        let n = spec.dim();
        if q.len() != n {
            return Err(Error::invalid(format!("expected {n} coordinates, got {}", q.len())));
        }
        let mut lo = [0usize; MAX_DIM];
        let mut hi = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        for axis in 0..n {
            let h = spec.spacing(axis);
            let size = spec.shape[axis];
            let t = (q[axis] - spec.lower[axis]) / h;
            if spec.periodic[axis] {
                let t = t.rem_euclid(size as f64);
                let i = (t.floor() as usize).min(size - 1);
                lo[axis] = i;
                hi[axis] = (i + 1) % size;
                frac[axis] = t - i as f64;
            } else {
                let top = (size - 1) as f64;
                if !(t >= -1e-9 && t <= top + 1e-9) {
                    return Err(Error::invalid(format!(
                        "coordinate {} on axis {axis} outside [{}, {}]",
                        q[axis], spec.lower[axis], spec.upper[axis]
                    )));
                }
                let t = t.clamp(0.0, top);
                let i = (t.floor() as usize).min(size - 2);
                lo[axis] = i;
                hi[axis] = i + 1;
                frac[axis] = t - i as f64;
            }
        }
        let mut idx = [0usize; MAX_DIM];
        let mut total = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            for axis in 0..n {
                if corner & (1 << axis) != 0 {
                    idx[axis] = hi[axis];
                    w *= frac[axis];
                } else {
                    idx[axis] = lo[axis];
                    w *= 1.0 - frac[axis];
                }
            }
            if w != 0.0 {
                total += w * self.values[spec.flat_index(&idx[..n])];
            }
        }
        Ok(total)
    }

    /// Central-difference gradient of the interpolant with half-spacing
    /// steps, one-sided where a step would leave a non-periodic axis.
    pub fn gradient(&self, q: &[f64]) -> Result<Vec<f64>> {
        let n = self.spec.dim();
        let f0 = self.interpolate(q)?;
        let mut grad = vec![0.0; n];
        let mut probe = q.to_vec();
        for axis in 0..n {
            let h = 0.5 * self.spec.spacing(axis);
            probe[axis] = q[axis] + h;
            let fp = self.interpolate(&probe).ok();
            probe[axis] = q[axis] - h;
            let fm = self.interpolate(&probe).ok();
            probe[axis] = q[axis];
            grad[axis] = match (fp, fm) {
                (Some(p), Some(m)) => (p - m) / (2.0 * h),
                (Some(p), None) => (p - f0) / h,
                (None, Some(m)) => (f0 - m) / h,
                (None, None) => 0.0,
            };
        }
        Ok(grad)
    }

    /// Copy whose nodes beyond the outer wall hold the linear extension of
    /// their interior neighbours, `(Σ g_j / Σ d_j) · d_k`, where `d` is the
    /// signed distance to the wall (negative outside). The interpolant then
    /// vanishes at the wall itself instead of one cell further out.
    pub fn with_wall_ghosts(&self) -> GridField {
        let spec = &self.spec;
        let n = spec.dim();
        let gap = |node: &[f64]| self.domain.outer_radius - self.domain.outer_distance(node);
        let gaps: Vec<f64> = (0..spec.n_nodes()).map(|k| gap(&spec.node(k))).collect();
        let mut values = self.values.clone();
        let offsets: Vec<[i64; MAX_DIM]> = (0..3usize.pow(n as u32))
            .filter_map(|code| {
                let mut off = [0i64; MAX_DIM];
                let mut c = code;
                for (axis, o) in off.iter_mut().enumerate().take(n) {
                    *o = (c % 3) as i64 - 1;
                    c /= 3;
                    if spec.periodic[axis] && *o != 0 {
                        return None;
                    }
                }
                off[..n].iter().any(|&o| o != 0).then_some(off)
            })
            .collect();
        let mut idx = [0usize; MAX_DIM];
        for k in 0..spec.n_nodes() {
            if gaps[k] > 0.0 {
                continue;
            }
            let mut rest = k;
            for axis in (0..n).rev() {
                idx[axis] = rest % spec.shape[axis];
                rest /= spec.shape[axis];
            }
            let (mut sum_g, mut sum_d) = (0.0, 0.0);
            'stencil: for off in &offsets {
                let mut nb = [0usize; MAX_DIM];
                for axis in 0..n {
                    let j = idx[axis] as i64 + off[axis];
                    if j < 0 || j >= spec.shape[axis] as i64 {
                        continue 'stencil;
                    }
                    nb[axis] = j as usize;
                }
                let j = spec.flat_index(&nb[..n]);
                if gaps[j] > 0.0 {
                    sum_g += self.values[j];
                    sum_d += gaps[j];
                }
            }
            if sum_d > 0.0 {
                values[k] = sum_g / sum_d * gaps[k];
            }
        }
        GridField { values, ..self.clone() }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = &self.spec;
        let n = spec.dim();
        let mut out = Vec::with_capacity(64 + 40 * n + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&spec.periodic_mask().to_le_bytes());
        out.extend_from_slice(&metric_tag(self.domain.metric).to_le_bytes());
        for &s in &spec.shape {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        let floats = spec
            .lower
            .iter()
            .chain(&spec.upper)
            .chain([&self.domain.inner_radius, &self.domain.outer_radius])
            .chain(&self.domain.center)
            .chain([&self.dt]);
        for x in floats {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.n_paths.to_le_bytes());
        out.extend_from_slice(&self.base_seed.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptFile("bad magic, not an FKG1 field".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptFile(format!(
                "unsupported field version {version}, this build reads version {VERSION}"
            )));
        }
        let n = r.u32()? as usize;
        if n == 0 || n > MAX_DIM {
            return Err(Error::CorruptFile(format!("bad dimension {n}")));
        }
        let mask = r.u32()?;
        let metric = match r.u32()? {
            0 => Metric::Euclidean,
            1 => Metric::Se2Embedded,
            t => return Err(Error::CorruptFile(format!("unknown metric tag {t}"))),
        };
        let shape = (0..n).map(|_| r.u32().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let lower = r.f64s(n)?;
        let upper = r.f64s(n)?;
        let eps = r.f64()?;
        let outer = r.f64()?;
        let center = r.f64s(n)?;
        let dt = r.f64()?;
        let n_paths = r.u64()?;
        let base_seed = r.u64()?;
        let periodic = (0..n).map(|i| mask & (1 << i) != 0).collect();
        let spec = GridSpec::new(lower, upper, shape, periodic)
            .map_err(|e| Error::CorruptFile(format!("bad grid header: {e}")))?;
        let count = spec.n_nodes();
        if r.remaining() != count * 8 {
            return Err(Error::CorruptFile(format!("expected {} value bytes, found {}", count * 8, r.remaining())));
        }
        let values = r.f64s(count)?;
        let domain = AnnulusDomain::new(center, eps, outer, metric)
            .map_err(|e| Error::CorruptFile(format!("bad domain header: {e}")))?;
        Ok(Self { spec, values, domain, n_paths, dt, base_seed })
    }

    /// Whether the field satisfies its value and boundary invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for (k, &v) in self.values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("node {k} value {v} outside [0, 1]")));
            }
            let q = self.spec.node(k);
            let expect = match self.domain.classify(&q) {
                Region::GoalN => Some(1.0),
                Region::ForbiddenM | Region::Exterior => Some(0.0),
                Region::Interior => None,
            };
            if let Some(e) = expect {
                if v != e {
                    return Err(Error::invalid(format!("boundary node {k} stores {v}, expected {e}")));
                }
            }
        }
        Ok(())
    }
}

fn metric_tag(m: Metric) -> u32 {
    match m {
        Metric::Euclidean => 0,
        Metric::Se2Embedded => 1,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// `a Gᵀ ∇g / g` from the field at `q`, in the field's own frame. Returns a
/// zero input flagged as clamped where the interpolated `g` is below the
/// floor or `q` is off the grid.
pub fn field_control<const N: usize, const M: usize>(
    field: &GridField,
    model: &SdeModel<N, M>,
    q: &State<N>,
) -> Control<M> {
    let (Ok(g), Ok(grad)) = (field.interpolate(q.as_slice()), field.gradient(q.as_slice())) else {
        return Control { u: Input::zeros(), clamped: true };
    };
    if !(g >= G_MIN) {
        return Control { u: Input::zeros(), clamped: true };
    }
    control_from_gradient(model, q, g, &State::<N>::from_column_slice(&grad))
}

/// Drives toward the goal ball of `target` with a field computed for a domain
/// of the same radii centered elsewhere, mapping states into the field frame
/// through the model's symmetry. Controls come from the field's
/// [`GridField::with_wall_ghosts`] copy.
pub struct FieldController<const N: usize, const M: usize> {
    field: Arc<GridField>,
    model: SdeModel<N, M>,
    target: AnnulusDomain,
    u_max: Option<f64>,
}

impl<const N: usize, const M: usize> FieldController<N, M> {
    pub fn new(
        field: Arc<GridField>,
        model: SdeModel<N, M>,
        target: AnnulusDomain,
        u_max: Option<f64>,
    ) -> Result<Self> {
        let fd = &field.domain;
        if fd.inner_radius != target.inner_radius
            || fd.outer_radius != target.outer_radius
            || fd.metric != target.metric
            || fd.dim() != N
        {
            return Err(Error::invalid(format!(
                "field domain (ε = {}, R = {}) does not match target (ε = {}, R = {})",
                fd.inner_radius, fd.outer_radius, target.inner_radius, target.outer_radius
            )));
        }
        if model.symmetry() == FrameSymmetry::PlanarRigid && N != 3 {
            return Err(Error::invalid("planar rigid symmetry needs (x, y, θ) states"));
        }
        if let Some(b) = u_max {
            if !(b > 0.0) {
                return Err(Error::invalid("u_max must be positive"));
            }
        }
        let field = Arc::new(field.with_wall_ghosts());
        Ok(Self { field, model, target, u_max })
    }

    /// Image of `q` in the field frame.
    pub fn to_field_frame(&self, q: &State<N>) -> State<N> {
        let to = &self.field.domain.center;
        let from = &self.target.center;
        let mut out = *q;
        match self.model.symmetry() {
            FrameSymmetry::Translation => {
                for i in 0..N {
                    out[i] = q[i] - from[i] + to[i];
                }
            }
            FrameSymmetry::PlanarRigid => {
                let rot = Rotation2::new(to[2] - from[2]);
                let d = rot * nalgebra::Vector2::new(q[0] - from[0], q[1] - from[1]);
                out[0] = to[0] + d[0];
                out[1] = to[1] + d[1];
                out[2] = to[2] + wrap_angle(q[2] - from[2]);
            }
        }
        out
    }
}

impl<const N: usize, const M: usize> Controller<N, M> for FieldController<N, M> {
    fn control(&self, q: &State<N>) -> Control<M> {
        let local = self.to_field_frame(q);
        let mut c = field_control(&self.field, &self.model, &local);
        if let Some(b) = self.u_max {
            c.u = saturate(&c.u, b);
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{annulus_g, optimal_control, AnnulusSolutionMode, AnnulusValueField};
    use crate::models::{omni_robot, single_integrator_2d, OmniParams};
    use approx::assert_abs_diff_eq;
    use nalgebra::{Vector2, Vector3};

    fn toy_field(values: Vec<f64>, shape: Vec<usize>, periodic: Vec<bool>) -> GridField {
        let n = shape.len();
        let (lower, upper) = if periodic.iter().any(|&p| p) {
            (vec![-1.0, -1.0, 0.0], vec![1.0, 1.0, TAU])
        } else {
            (vec![-1.0; n], vec![1.0; n])
        };
        let metric = if n == 3 { Metric::Se2Embedded } else { Metric::Euclidean };
        GridField {
            spec: GridSpec::new(lower, upper, shape, periodic).unwrap(),
            values,
            domain: AnnulusDomain::new(vec![0.0; n], 0.1, 1.0, metric).unwrap(),
            n_paths: 1,
            dt: 0.01,
            base_seed: 7,
        }
    }

    #[test]
    fn interpolation_contract() {
        // 3x3 grid with value = x + 2y at nodes; bilinear reproduces it.
        let spec = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![3, 3], vec![false, false]).unwrap();
        let values: Vec<f64> = (0..9)
            .map(|k| {
                let q = spec.node(k);
                q[0] + 2.0 * q[1]
            })
            .collect();
        let f = toy_field(values, vec![3, 3], vec![false, false]);
        assert_eq!(f.interpolate(&[0.0, 1.0]).unwrap(), 2.0);
        assert_abs_diff_eq!(f.interpolate(&[0.3, -0.4]).unwrap(), 0.3 - 0.8, epsilon = 1e-12);
        assert!(matches!(f.interpolate(&[1.5, 0.0]), Err(Error::InvalidArgument(_))));

        let mut values = vec![0.3; 9];
        values[4] = 0.2; // node (0, 0)
        values[7] = 0.4; // node (1, 0)
        let f = toy_field(values, vec![3, 3], vec![false, false]);
        assert_abs_diff_eq!(f.interpolate(&[0.5, 0.0]).unwrap(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn wall_ghosts_make_the_interpolant_vanish_at_the_wall() {
        let spec = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![21, 21], vec![false, false]).unwrap();
        let exact = |q: &[f64]| {
            let r = q[0].hypot(q[1]);
            if r >= 1.0 {
                0.0
            } else {
                annulus_g(AnnulusSolutionMode::Harmonic, 0.1, 1.0, r.max(0.1), 2).unwrap()
            }
        };
        let values: Vec<f64> = (0..spec.n_nodes()).map(|k| exact(&spec.node(k))).collect();
        let raw = toy_field(values, vec![21, 21], vec![false, false]);
        let ghosted = raw.with_wall_ghosts();
        for k in 0..spec.n_nodes() {
            let q = spec.node(k);
            if q[0].hypot(q[1]) < 1.0 {
                assert_eq!(ghosted.values[k], raw.values[k]);
            } else {
                assert!(ghosted.values[k] <= 0.0);
            }
        }
        let (mut err_raw, mut err_ghost) = (0.0, 0.0);
        for a in 0..12 {
            let th = 0.37 + a as f64 * 0.5;
            let q = [0.99 * th.cos(), 0.99 * th.sin()];
            let truth = exact(&q);
            let g_ghost = ghosted.interpolate(&q).unwrap();
            assert!((g_ghost - truth).abs() < 0.25 * truth, "θ = {th}: {g_ghost} vs {truth}");
            err_ghost += (g_ghost - truth).abs();
            err_raw += (raw.interpolate(&q).unwrap() - truth).abs();
        }
        assert!(err_raw > 3.0 * err_ghost, "raw {err_raw} ghost {err_ghost}");
    }

    #[test]
    fn periodic_axis_wraps() {
        let shape = vec![3, 3, 4];
        let spec =
            GridSpec::new(vec![-1.0, -1.0, 0.0], vec![1.0, 1.0, TAU], shape.clone(), vec![false, false, true]).unwrap();
        let values: Vec<f64> = (0..spec.n_nodes())
            .map(|k| {
                let th = spec.node(k)[2];
                if th == 0.0 {
                    1.0
                } else if (th - 1.5 * std::f64::consts::PI).abs() < 1e-12 {
                    0.5
                } else {
                    0.0
                }
            })
            .collect();
        let f = toy_field(values, shape, vec![false, false, true]);
        let h = TAU / 4.0;
        assert_abs_diff_eq!(f.interpolate(&[0.0, 0.0, TAU - h / 2.0]).unwrap(), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(f.interpolate(&[0.0, 0.0, -h / 2.0]).unwrap(), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(f.interpolate(&[0.0, 0.0, 4.0 * TAU]).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(GridSpec::new(vec![0.0], vec![1.0], vec![2], vec![false]).is_err());
        assert!(GridSpec::new(vec![0.0], vec![3.0], vec![5], vec![true]).is_err());
        assert!(GridSpec::new(vec![1.0], vec![0.0], vec![5], vec![false]).is_err());
        assert!(GridSpec::new(vec![0.0], vec![TAU], vec![5], vec![true]).is_ok());
    }

    #[test]
    fn bytes_round_trip_and_corruption() {
        let f = toy_field((0..27).map(|k| k as f64 / 27.0).collect(), vec![3, 3, 3], vec![false, false, true]);
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], b"FKG1");
        let back = GridField::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);

        assert!(matches!(GridField::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptFile(_))));
        assert!(matches!(GridField::from_bytes(&bytes[..10]), Err(Error::CorruptFile(_))));
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        match GridField::from_bytes(&bumped) {
            Err(Error::CorruptFile(msg)) => assert!(msg.contains("version 2")),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(GridField::from_bytes(&bad), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn file_round_trip() {
        let f = toy_field(vec![0.5; 9], vec![3, 3], vec![false, false]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.fkg");
        f.save(&path).unwrap();
        assert_eq!(GridField::load(&path).unwrap(), f);
    }

    #[test]
    fn plateau_gives_flagged_zero_control() {
        let f = toy_field(vec![0.0; 9], vec![3, 3], vec![false, false]);
        let c = field_control(&f, &single_integrator_2d(1.0), &Vector2::new(0.5, 0.0));
        assert!(c.clamped);
        assert_eq!(c.u, Vector2::zeros());
    }

    fn small_estimate(n_paths: u64, seed: u64) -> GridField {
        let model = single_integrator_2d(1.0);
        let domain = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        let spec = GridSpec::covering(&domain, vec![9, 9]).unwrap();
        estimate_g_grid(&model, &domain, &spec, n_paths, 1e-3, seed).unwrap()
    }

    #[test]
    fn estimate_is_deterministic_and_respects_boundaries() {
        let a = small_estimate(50, 11);
        let b = small_estimate(50, 11);
        assert_eq!(a.to_bytes(), b.to_bytes());
        a.check_invariants().unwrap();
        // center node is inside the goal ball, corners are outside the wall
        assert_eq!(a.values[40], 1.0);
        assert_eq!(a.values[0], 0.0);
        let c = small_estimate(50, 12);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn estimate_is_independent_of_thread_count() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let threaded = pool.install(|| small_estimate(20, 5));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| small_estimate(20, 5));
        assert_eq!(threaded.to_bytes(), serial.to_bytes());
    }

    #[test]
    fn estimate_matches_harmonic_measure_and_control() {
        let model = single_integrator_2d(1.0);
        let domain = AnnulusDomain::new(vec![0.0, 0.0], 0.1, 1.0, Metric::Euclidean).unwrap();
        // 21 nodes over [-1, 1] puts a node at radius 0.5.
        let spec = GridSpec::covering(&domain, vec![21, 21]).unwrap();
        let field = estimate_g_grid(&model, &domain, &spec, 2000, 2.5e-4, 3).unwrap();
        let node = field.interpolate(&[0.5, 0.0]).unwrap();
        let exact = annulus_g(AnnulusSolutionMode::Harmonic, 0.1, 1.0, 0.5, 2).unwrap();
        assert!((node - exact).abs() < 0.03, "node {node} vs {exact}");

        let q = Vector2::new(0.5, 0.0);
        let u = field_control(&field, &model, &q).u;
        let closed = AnnulusValueField::new(domain, AnnulusSolutionMode::Harmonic).unwrap();
        let u_exact = optimal_control(&model, &closed, &q).u;
        assert!((u[0] - u_exact[0]).abs() < 0.15 * u_exact[0].abs(), "{u:?} vs {u_exact:?}");
    }

    #[test]
    fn monte_carlo_consistency_between_n_and_4n() {
        let a = small_estimate(100, 21);
        let b = small_estimate(400, 22);
        let interior: Vec<usize> =
            (0..a.values.len()).filter(|&k| a.domain.classify(&a.spec.node(k)) == Region::Interior).collect();
        let ok = interior
            .iter()
            .filter(|&&k| {
                let p = b.values[k].clamp(0.01, 0.99);
                let sd = (p * (1.0 - p) / 100.0).sqrt();
                (a.values[k] - b.values[k]).abs() < 3.0 * sd
            })
            .count();
        assert!(ok as f64 >= 0.95 * interior.len() as f64, "{ok} of {}", interior.len());
    }

    #[test]
    fn field_frame_transform_for_planar_rigid_models() {
        let model = omni_robot(&OmniParams::default());
        let f = Arc::new(toy_field(vec![0.5; 27], vec![3, 3, 3], vec![false, false, true]));
        let target =
            AnnulusDomain::new(vec![2.0, 1.0, std::f64::consts::FRAC_PI_2], 0.1, 1.0, Metric::Se2Embedded).unwrap();
        let fc = FieldController::new(f, model, target, None).unwrap();
        // one unit ahead along the target heading maps to +x in the field frame
        let local = fc.to_field_frame(&Vector3::new(2.0, 2.0, std::f64::consts::FRAC_PI_2 + 0.1));
        assert_abs_diff_eq!(local[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(local[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(local[2], 0.1, epsilon = 1e-12);
    }
}
