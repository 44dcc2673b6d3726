//! Sphere worlds and the annular local domains cut out of them.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `√(x² + y² + (cos θ − 1)² + sin² θ)`: the norm of `(x, y, θ)` after
/// embedding the heading on the unit circle.
#[inline]
pub fn se2_norm(x: f64, y: f64, theta: f64) -> f64 {
    let c = theta.cos() - 1.0;
    let s = theta.sin();
    (x * x + y * y + c * c + s * s).sqrt()
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    /// `(x, y, θ)` with the heading embedded on the unit circle.
    Se2Embedded,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Se2Embedded => "se2_embedded",
        }
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Metric::Se2Embedded => se2_norm(v[0], v[1], v[2]),
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Se2Embedded => se2_norm(a[0] - b[0], a[1] - b[1], a[2] - b[2]),
        }
    }

    /// Dimension the metric requires, if fixed.
    pub fn required_dim(&self) -> Option<usize> {
        match self {
            Metric::Euclidean => None,
            Metric::Se2Embedded => Some(3),
        }
    }
}

pub(crate) fn planar_distance(a: &[f64], b: &[f64]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    /// `‖p − c‖² − ρ²`; negative inside the obstacle.
    #[inline]
    pub fn beta(&self, p: &[f64]) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        dx * dx + dy * dy - self.radius * self.radius
    }

    #[inline]
    pub fn clearance(&self, p: &[f64]) -> f64 {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) - self.radius
    }
}

/// A disk workspace with disjoint disk obstacles. Obstacle membership only
/// looks at the planar coordinates, so the same world serves `(x, y, θ)`
/// states with cylindrical obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereWorld {
    pub outer_radius: f64,
    #[serde(default, rename = "obstacle")]
    pub obstacles: Vec<Obstacle>,
}

impl SphereWorld {
    pub fn new(outer_radius: f64, obstacles: Vec<Obstacle>) -> Result<Self> {
        let world = Self { outer_radius, obstacles };
        world.validate()?;
        Ok(world)
    }

    pub fn obstacle_free(outer_radius: f64) -> Result<Self> {
        Self::new(outer_radius, Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.outer_radius > 0.0 && self.outer_radius.is_finite()) {
            return Err(Error::invalid("outer_radius must be positive and finite"));
        }
        for (j, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0) || !o.center.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid(format!("obstacle {j}: bad center or radius")));
            }
            if o.center[0].hypot(o.center[1]) + o.radius >= self.outer_radius {
                return Err(Error::invalid(format!("obstacle {j} is not strictly inside the outer wall")));
            }
            for (l, p) in self.obstacles.iter().enumerate().skip(j + 1) {
                let gap = (o.center[0] - p.center[0]).hypot(o.center[1] - p.center[1]);
                if gap <= o.radius + p.radius {
                    return Err(Error::invalid(format!("obstacles {j} and {l} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let world: SphereWorld =
            toml::from_str(text).map_err(|e| Error::Parse { what: "world file", detail: e.to_string() })?;
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("world serializes")
    }

    /// Planar distance from `p` to the nearest obstacle surface or the outer
    /// wall. Negative inside an obstacle or beyond the wall.
    pub fn clearance(&self, p: &[f64]) -> f64 {
        self.obstacles.iter().map(|o| o.clearance(p)).fold(self.outer_radius - p[0].hypot(p[1]), f64::min)
    }

    /// Whether `p` touches an obstacle (closed disk) or the outer wall.
    pub fn in_collision(&self, p: &[f64]) -> bool {
        p[0].hypot(p[1]) >= self.outer_radius || self.obstacles.iter().any(|o| o.beta(p) <= 0.0)
    }
}

/// Classification of a point against an annular domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Interior,
    GoalN,
    ForbiddenM,
    /// Distances are not finite; the point cannot be placed.
    Exterior,
}

/// `{q : d(q, γ) > ε, d_outer(q, γ) < R}`.
///
/// For [`Metric::Euclidean`] both distances are the Euclidean one. For
/// [`Metric::Se2Embedded`] the goal ball uses the embedded SE(2) distance
/// while the outer wall is the planar circle of radius `R`: the domain is a
/// cylinder in θ with a small goal ball removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnulusDomain {
    pub center: Vec<f64>,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub metric: Metric,
}

impl AnnulusDomain {
    pub fn new(center: Vec<f64>, inner_radius: f64, outer_radius: f64, metric: Metric) -> Result<Self> {
        if !(inner_radius > 0.0 && inner_radius < outer_radius && outer_radius.is_finite()) {
            return Err(Error::invalid(format!("annulus needs 0 < ε < R, got ε = {inner_radius}, R = {outer_radius}")));
        }
        if let Some(dim) = metric.required_dim() {
            if center.len() != dim {
                return Err(Error::invalid(format!("{} metric needs a {dim}-dimensional center", metric.as_str())));
            }
        }
        if center.len() < 2 || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("annulus center must be finite with at least two coordinates"));
        }
        Ok(Self { center, inner_radius, outer_radius, metric })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Distance compared against the goal radius `ε`.
    #[inline]
    pub fn inner_distance(&self, q: &[f64]) -> f64 {
        self.metric.distance(q, &self.center)
    }

    /// Distance compared against the outer radius `R`.
    #[inline]
    pub fn outer_distance(&self, q: &[f64]) -> f64 {
        match self.metric {
            Metric::Euclidean => self.metric.distance(q, &self.center),
            Metric::Se2Embedded => planar_distance(q, &self.center),
        }
    }

    /// Exact sign test against both boundaries; `N` wins if both apply.
    #[inline]
    pub fn classify(&self, q: &[f64]) -> Region {
        let inner = self.inner_distance(q);
        let outer = self.outer_distance(q);
        if !(inner.is_finite() && outer.is_finite()) {
            Region::Exterior
        } else if inner <= self.inner_radius {
            Region::GoalN
        } else if outer >= self.outer_radius {
            Region::ForbiddenM
        } else {
            Region::Interior
        }
    }

    /// Overshoot tolerance `10 √dt σ_max` for a discrete-time exit sample.
    pub fn boundary_band(dt: f64, sigma_max: f64) -> f64 {
        10.0 * dt.sqrt() * sigma_max
    }

    /// Same domain shape around another center.
    pub fn recentered(&self, center: Vec<f64>) -> Result<Self> {
        Self::new(center, self.inner_radius, self.outer_radius, self.metric)
    }
}

pub fn classify_point(domain: &AnnulusDomain, q: &[f64]) -> Region {
    domain.classify(q)
}

/// Admissible outer radii for the domain around `next` that must contain the
/// goal ball of `prev`: `R_min = d(prev, next) + 2ε`, `R_max` = clearance of
/// `next`. Feasible only when `R_min < R_max`.
pub fn radius_bounds(
    prev: &[f64],
    next: &[f64],
    world: &SphereWorld,
    epsilon: f64,
    metric: Metric,
) -> Result<(f64, f64)> {
    let spacing = metric.distance(prev, next);
    if !(spacing > 2.0 * epsilon) {
        return Err(Error::invalid(format!("waypoints {spacing} apart, need more than 2ε = {}", 2.0 * epsilon)));
    }
    let r_min = spacing + 2.0 * epsilon;
    let r_max = world.clearance(next);
    if r_min >= r_max {
        return Err(Error::InfeasibleWaypoint { r_min, r_max });
    }
    Ok((r_min, r_max))
}
