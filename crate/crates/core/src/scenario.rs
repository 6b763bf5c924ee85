//! Scenario descriptions, the built-in presets and initial-data builders.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::elliptic::{EllipticOperator, FaceAverage};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowProblem, Termination};
use crate::grid::{dirichlet_energy, Grid, MapField, NodeField, ScalarField};
use crate::target::{TargetManifold, WarpKind, WarpSpec, WarpSpecKind, WarpFunction};

pub const PRESETS: [&str; 4] = ["beta_const_validation", "small_energy", "npc_torus", "blowup_bubble"];

/// Boundary map `φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySpec {
    Constant { point: Vec<f64> },
    /// Torus boundary loop `α = 2π · turns · s`, `γ = 0`, with `s` the
    /// arclength fraction counter-clockwise from the origin.
    TorusWinding { turns: i32 },
}

/// Quadratic polynomial boundary data for `v`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsiSpec {
    pub c: f64,
    pub x: f64,
    pub y: f64,
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl PsiSpec {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.c + self.x * x + self.y * y + self.xx * x * x + self.xy * x * y + self.yy * y * y
    }
}

/// Initial map `u₀`; its boundary trace always equals `φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// The constant extension of a constant `φ`.
    Constant,
    /// `P(φ + a sin(πx) sin(πy) e_axis)` with `a` chosen so that `E(u₀) = energy`.
    Bump { energy: f64, axis: usize },
    /// Projected discrete harmonic extension of the ambient components of `φ`.
    HarmonicExtension,
    /// Degree-one bubble of scale `rho` centred at `center`, unwound to the
    /// north pole between radii `r_inner` and `r_outer`.
    GluedBubble { center: [f64; 2], rho: f64, r_inner: f64, r_outer: f64 },
}

/// Extra scenario-level checks run by the harness.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioChecks {
    /// Final `E_u` ceiling.
    pub final_energy_max: Option<f64>,
    /// Final `sup |u - point|` ceiling.
    pub final_point: Option<(Vec<f64>, f64)>,
    /// Forbid any concentration event.
    pub no_concentration: bool,
    /// Winding number of the first torus angle along the mid-square loop.
    pub winding: Option<i32>,
    /// Final tension residual ceiling.
    pub tension_max: Option<f64>,
    /// Ceiling on the monitored ball energy (the config's `monitor_radius`).
    pub monitor_energy_below_epsilon1: bool,
    /// Growth factor of `max |∇u|` required before detection.
    pub max_grad_growth: Option<f64>,
    /// Run blow-up selection and bubble extraction.
    pub bubble: Option<BubbleChecks>,
    /// Also run the other mode (flow or descent) and compare final states.
    pub descent_cross_check: Option<CrossCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossCheck {
    /// Ceiling on `sup |u_flow - u_descent|` between the final states.
    pub sup_tol: f64,
    /// Gradient-norm stopping level of the descent run.
    pub grad_tol: f64,
}

impl Default for CrossCheck {
    fn default() -> Self {
        Self { sup_tol: 1e-3, grad_tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BubbleChecks {
    pub boundary_ratio_min: f64,
    pub tension_rel_tol: f64,
    pub grad_v_rel_max: f64,
    pub half_width: f64,
    pub window_nodes: usize,
    pub r_cap: f64,
}

impl Default for BubbleChecks {
    fn default() -> Self {
        Self {
            boundary_ratio_min: 10.0,
            tension_rel_tol: 0.1,
            grad_v_rel_max: 0.05,
            half_width: crate::diagnostics::DEFAULT_WINDOW,
            window_nodes: crate::diagnostics::DEFAULT_WINDOW_NODES,
            r_cap: crate::diagnostics::DEFAULT_R_CAP,
        }
    }
}

fn ser_target<S: Serializer>(t: &TargetManifold, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&t.name())
}

fn de_target<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TargetManifold, D::Error> {
    let name = String::deserialize(d)?;
    TargetManifold::from_name(&name).map_err(serde::de::Error::custom)
}

fn ser_warp<S: Serializer>(w: &WarpKind, s: S) -> std::result::Result<S::Ok, S::Error> {
    let spec = match *w {
        WarpKind::Constant { c } => WarpSpec { kind: WarpSpecKind::Constant, a: c, b: 0.0, axis: 1 },
        WarpKind::AffineHeight { a, b, axis } => WarpSpec { kind: WarpSpecKind::AffineHeight, a, b, axis },
    };
    spec.serialize(s)
}

fn de_warp<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<WarpKind, D::Error> {
    WarpSpec::deserialize(d).map(Into::into)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(serialize_with = "ser_target", deserialize_with = "de_target")]
    pub target: TargetManifold,
    #[serde(serialize_with = "ser_warp", deserialize_with = "de_warp")]
    pub warp: WarpKind,
    pub phi: BoundarySpec,
    pub psi: PsiSpec,
    pub u0: InitialSpec,
    #[serde(default)]
    pub flow: FlowConfig,
    pub expected: Termination,
    #[serde(default)]
    pub checks: ScenarioChecks,
}

/// Built-in scenario by name.
pub fn preset(name: &str) -> Result<Scenario> {
    let north = vec![0.0, 0.0, 1.0];
    let height = WarpKind::AffineHeight { a: 2.0, b: 1.0, axis: 3 };
    let s = match name {
        "beta_const_validation" => Scenario {
            name: name.into(),
            target: TargetManifold::sphere2(),
            warp: WarpKind::Constant { c: 1.0 },
            phi: BoundarySpec::Constant { point: north.clone() },
            psi: PsiSpec { xx: 1.0, yy: -1.0, ..Default::default() },
            u0: InitialSpec::Constant,
            flow: FlowConfig::default(),
            expected: Termination::Converged,
            checks: ScenarioChecks {
                final_point: Some((north, 1e-12)),
                ..Default::default()
            },
        },
        "small_energy" => Scenario {
            name: name.into(),
            target: TargetManifold::sphere2(),
            warp: height,
            phi: BoundarySpec::Constant { point: north.clone() },
            psi: PsiSpec { x: 0.1, ..Default::default() },
            u0: InitialSpec::Bump { energy: 1.0, axis: 1 },
            flow: FlowConfig { t_max: 2.0, ..Default::default() },
            expected: Termination::Converged,
            checks: ScenarioChecks {
                final_energy_max: Some(1e-4),
                final_point: Some((north, 1e-2)),
                no_concentration: true,
                descent_cross_check: Some(CrossCheck::default()),
                ..Default::default()
            },
        },
        "npc_torus" => Scenario {
            name: name.into(),
            target: TargetManifold::CliffordTorus,
            warp: WarpKind::AffineHeight { a: 2.0, b: std::f64::consts::SQRT_2, axis: 1 },
            phi: BoundarySpec::TorusWinding { turns: 1 },
            psi: PsiSpec { x: 1.0, ..Default::default() },
            u0: InitialSpec::HarmonicExtension,
            flow: FlowConfig {
                // even so that the vortex centre sits between nodes
                n: 128,
                t_max: 5.0,
                epsilon1: TAU,
                monitor_radius: Some(0.05),
                ..Default::default()
            },
            expected: Termination::Converged,
            checks: ScenarioChecks {
                winding: Some(1),
                tension_max: Some(1e-4),
                monitor_energy_below_epsilon1: true,
                no_concentration: true,
                ..Default::default()
            },
        },
        "blowup_bubble" => Scenario {
            name: name.into(),
            target: TargetManifold::sphere2(),
            warp: height,
            phi: BoundarySpec::Constant { point: north },
            psi: PsiSpec { x: 0.2, ..Default::default() },
            u0: InitialSpec::GluedBubble { center: [0.5, 0.5], rho: 0.18, r_inner: 0.32, r_outer: 0.48 },
            flow: FlowConfig {
                t_max: 1.0,
                epsilon1: TAU,
                snap_every: 100,
                ..Default::default()
            },
            expected: Termination::ConcentrationDetected,
            checks: ScenarioChecks {
                max_grad_growth: Some(10.0),
                bubble: Some(BubbleChecks::default()),
                ..Default::default()
            },
        },
        other => return Err(Error::UnknownPreset(other.into())),
    };
    Ok(s)
}

/// Degree-one harmonic sphere of scale `rho` centred at `center`: the
/// centre maps to the south pole and far points approach the north pole.
pub fn bubble_map(center: [f64; 2], rho: f64, x: f64, y: f64) -> [f64; 3] {
    glued_bubble_map(center, rho, f64::INFINITY, f64::INFINITY, x, y)
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// [`bubble_map`] with its stereographic coordinate `ζ = ρ (x - c) / |x - c|^2`
/// damped to zero between `r_inner` and `r_outer`.
pub fn glued_bubble_map(center: [f64; 2], rho: f64, r_inner: f64, r_outer: f64, x: f64, y: f64) -> [f64; 3] {
    let (dx, dy) = (x - center[0], y - center[1]);
    let s = dx * dx + dy * dy;
    if s == 0.0 {
        return [0.0, 0.0, -1.0];
    }
    let r = s.sqrt();
    let damp = if r_outer.is_finite() { 1.0 - smoothstep((r - r_inner) / (r_outer - r_inner)) } else { 1.0 };
    let a = rho * damp;
    let den = s + a * a;
    [2.0 * a * dx / den, 2.0 * a * dy / den, (s - a * a) / den]
}

fn quad_loop_param(grid: Grid, i: usize, j: usize) -> f64 {
    // arclength fraction along the boundary, counter-clockwise from (0,0)
    let (x, y) = (grid.coord(i), grid.coord(j));
    let s = if j == 0 {
        x
    } else if i == grid.n() - 1 {
        1.0 + y
    } else if j == grid.n() - 1 {
        2.0 + (1.0 - x)
    } else {
        3.0 + (1.0 - y)
    };
    s / 4.0
}

fn harmonic_extension(trace: &MapField) -> Result<MapField> {
    let g = trace.grid();
    let k = trace.k();
    let op = EllipticOperator::new(g, &vec![1.0; g.num_nodes()], FaceAverage::Arithmetic);
    let mut out = trace.clone();
    for c in 0..k {
        let comp = trace.component(c);
        let (sol, _) = op.solve(&comp, None, 1e-13, 50 * g.n())?;
        for (node, val) in sol.values().iter().enumerate() {
            out.values_mut()[node * k + c] = *val;
        }
    }
    Ok(out)
}

fn project_interior(target: &TargetManifold, u: &mut MapField) -> Result<()> {
    let g = u.grid();
    let n = g.n();
    let k = u.k();
    let mut buf = vec![0.0; k];
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = g.node(i, j);
            target.project_into(u.node_value(c), &mut buf)?;
            u.node_value_mut(c).copy_from_slice(&buf);
        }
    }
    Ok(())
}

fn bump(target: &TargetManifold, point: &[f64], amp: f64, axis: usize, g: Grid) -> Result<MapField> {
    let k = point.len();
    let mut raw = MapField::from_fn(g, k, |x, y, out| {
        out.copy_from_slice(point);
        out[axis - 1] += amp * (PI * x).sin() * (PI * y).sin();
    });
    // boundary values are exactly φ since sin vanishes there up to rounding
    for (i, j) in g.boundary_loop() {
        raw.node_value_mut(g.node(i, j)).copy_from_slice(point);
    }
    project_interior(target, &mut raw)?;
    Ok(raw)
}

impl Scenario {
    pub fn grid(&self) -> Result<Grid> {
        self.flow.grid()
    }

    /// `φ` as a full map: constant, or the projected harmonic extension of
    /// the boundary loop.
    pub fn boundary_map(&self) -> Result<MapField> {
        let g = self.grid()?;
        let k = self.target.ambient_dim();
        match &self.phi {
            BoundarySpec::Constant { point } => {
                if point.len() != k {
                    return Err(Error::InvalidConfig(format!("boundary point needs {k} components")));
                }
                let d = self.target.dist_to_manifold(point)?;
                if d > 1e-12 {
                    return Err(Error::InvalidConfig(format!("boundary point is {d:e} off the target")));
                }
                Ok(MapField::constant(g, point))
            }
            BoundarySpec::TorusWinding { turns } => {
                if self.target != TargetManifold::CliffordTorus {
                    return Err(Error::InvalidConfig("torus_winding needs the clifford target".into()));
                }
                let mut trace = MapField::constant(g, &TargetManifold::torus_point(0.0, 0.0));
                for (i, j) in g.boundary_loop() {
                    let s = quad_loop_param(g, i, j);
                    let p = TargetManifold::torus_point(TAU * *turns as f64 * s, 0.0);
                    trace.node_value_mut(g.node(i, j)).copy_from_slice(&p);
                }
                let mut ext = harmonic_extension(&trace)?;
                project_interior(&self.target, &mut ext)?;
                Ok(ext)
            }
        }
    }

    pub fn psi_field(&self) -> Result<ScalarField> {
        let psi = self.psi;
        Ok(ScalarField::from_fn(self.grid()?, move |x, y| psi.eval(x, y)))
    }

    pub fn initial_map(&self, phi: &MapField) -> Result<MapField> {
        let g = phi.grid();
        let constant_point = || match &self.phi {
            BoundarySpec::Constant { point } => Ok(point.clone()),
            _ => Err(Error::InvalidConfig("initial data needs a constant boundary map".into())),
        };
        match &self.u0 {
            InitialSpec::Constant => Ok(MapField::constant(g, &constant_point()?)),
            InitialSpec::HarmonicExtension => Ok(phi.clone()),
            InitialSpec::Bump { energy, axis } => {
                let point = constant_point()?;
                if *axis == 0 || *axis > point.len() {
                    return Err(Error::InvalidConfig(format!("bump axis {axis} out of range")));
                }
                // the projected bump energy is increasing in the amplitude
                // well past the target values used here
                let energy_at = |a: f64| bump(&self.target, &point, a, *axis, g).map(|u| dirichlet_energy(&u));
                let (mut lo, mut hi) = (0.0, 1.0);
                while energy_at(hi)? < *energy {
                    hi *= 2.0;
                    if hi > 1e3 {
                        return Err(Error::InvalidConfig(format!("bump energy {energy} unreachable")));
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if energy_at(mid)? < *energy {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-15 * hi {
                        break;
                    }
                }
                bump(&self.target, &point, 0.5 * (lo + hi), *axis, g)
            }
            InitialSpec::GluedBubble { center, rho, r_inner, r_outer } => {
                if self.target != TargetManifold::sphere2() || constant_point()? != [0.0, 0.0, 1.0] {
                    return Err(Error::InvalidConfig("glued bubble needs sphere2 with a north-pole boundary".into()));
                }
                if !(rho > &0.0 && r_inner < r_outer) {
                    return Err(Error::InvalidConfig("glued bubble radii out of order".into()));
                }
                let mut u = MapField::from_fn(g, 3, |x, y, out| {
                    out.copy_from_slice(&glued_bubble_map(*center, *rho, *r_inner, *r_outer, x, y))
                });
                for (i, j) in g.boundary_loop() {
                    u.node_value_mut(g.node(i, j)).copy_from_slice(&[0.0, 0.0, 1.0]);
                }
                Ok(u)
            }
        }
    }

    /// Boundary data, warp and initial map ready for [`crate::flow::run`].
    pub fn build(&self) -> Result<(FlowProblem, MapField)> {
        self.flow.validate()?;
        let warp = WarpFunction::new(self.warp, &self.target)?;
        let phi = self.boundary_map()?;
        let u0 = self.initial_map(&phi)?;
        let g = phi.grid();
        for (i, j) in g.boundary_loop() {
            let c = g.node(i, j);
            if u0.node_value(c) != phi.node_value(c) {
                return Err(Error::InvalidConfig(format!("initial map differs from the boundary map at node {c}")));
            }
        }
        let off = crate::flow::max_constraint_violation(&self.target, &u0);
        if off > 1e-12 {
            return Err(Error::InvalidConfig(format!("initial map is {off:e} off the target")));
        }
        let problem = FlowProblem::new(self.target.clone(), warp, phi, self.psi_field()?, self.flow.elliptic)?;
        Ok((problem, u0))
    }
}

/// Winding number of `(u₁, u₂)` along the square loop `[1/4, 3/4]^2`,
/// traversed counter-clockwise with unwrapped angle increments.
pub fn winding_number(u: &MapField) -> Result<i32> {
    let g = u.grid();
    let n = g.n();
    let lo = ((n - 1) as f64 / 4.0).round() as usize;
    let hi = n - 1 - lo;
    let mut path = Vec::new();
    for i in lo..hi {
        path.push((i, lo));
    }
    for j in lo..hi {
        path.push((hi, j));
    }
    for i in (lo + 1..=hi).rev() {
        path.push((i, hi));
    }
    for j in (lo + 1..=hi).rev() {
        path.push((lo, j));
    }
    let angle = |(i, j): (usize, usize)| {
        let p = u.node_value(g.node(i, j));
        p[1].atan2(p[0])
    };
    let mut total = 0.0;
    for w in 0..path.len() {
        let a = angle(path[w]);
        let b = angle(path[(w + 1) % path.len()]);
        let mut d = b - a;
        while d > PI {
            d -= TAU;
        }
        while d < -PI {
            d += TAU;
        }
        total += d;
    }
    let wn = total / TAU;
    if (wn - wn.round()).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!("non-integer winding {wn}")));
    }
    Ok(wn.round() as i32)
}
