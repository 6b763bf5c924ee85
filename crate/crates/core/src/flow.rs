//! The coupled parabolic-elliptic stepper and its energy ledger.
//!
//! A step moves the map along the ambient force
//!
//! ```text
//! F = Δ_h u + 1/2 ∇β(u) s(v)
//! ```
//!
//! and projects back onto the target. `s(v)` is the node weight obtained by
//! differentiating `Q_β(v)` with respect to `β(u_c)`; for arithmetic face
//! averaging it is the mean of the squared forward and backward differences
//! of `v` at the node. With this choice `-T(F)` is exactly the gradient of the
//! reduced energy `ε(u) = E(u) - 1/2 Q_β(u)(Φ(u))`, so the step is a
//! projected explicit gradient step and the discrete energy law is sharp.
//!
//! The state always carries `v = Φ(u)`: after moving `u` the constraint is
//! re-solved, warm-started from the previous `v`.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{radius_ladder, scan_detect};
use crate::elliptic::{
    beta_nodes, solve_v, EllipticConfig, FaceAverage, SolveStats,
};
use crate::error::{Error, Result};
use crate::grid::{
    density_from_edges, edge_sq, gradient_sq, laplacian_into, BallEnergyTable, CellField, Grid, MapField, NodeField,
    ScalarField,
};
use crate::target::{TargetManifold, WarpFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    #[default]
    Flow,
    Descent,
}

impl FlowMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowMode::Flow => "flow",
            FlowMode::Descent => "descent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    /// Armijo constant.
    pub c1: f64,
    /// First trial step, in units of `h^2`.
    pub initial_step_factor: f64,
    pub grow: f64,
    pub shrink: f64,
    pub min_step: f64,
    /// Stall with a gradient norm at or below this counts as converged.
    pub stall_grad_tol: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            initial_step_factor: 0.2,
            grow: 1.5,
            shrink: 0.5,
            min_step: 1e-14,
            stall_grad_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub n: usize,
    /// `τ = tau_factor * h^2`.
    pub tau_factor: f64,
    pub t_max: f64,
    /// Stop as converged once `|u_t|_{L^2}` falls to this level.
    pub stop_ut_tol: f64,
    pub epsilon1: f64,
    pub mode: FlowMode,
    /// All reductions run sequentially in a fixed order; kept in the config
    /// so reports echo it.
    pub deterministic: bool,
    pub snap_every: usize,
    pub scan_every: usize,
    /// Stop with `concentration_detected` when the smallest-radius scan
    /// exceeds `epsilon1`.
    pub detect_concentration: bool,
    /// Track the largest ball energy at this radius at every scan.
    pub monitor_radius: Option<f64>,
    pub max_steps: Option<usize>,
    pub elliptic: EllipticConfig,
    pub descent: DescentConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n: 129,
            tau_factor: 0.2,
            t_max: 2.0,
            stop_ut_tol: 1e-6,
            epsilon1: 1.0,
            mode: FlowMode::Flow,
            deterministic: true,
            snap_every: 1000,
            scan_every: 10,
            detect_concentration: true,
            monitor_radius: None,
            max_steps: None,
            elliptic: EllipticConfig::default(),
            descent: DescentConfig::default(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n < 3 {
            return bad(format!("n must be at least 3, got {}", self.n));
        }
        if self.mode == FlowMode::Flow && !(self.tau_factor > 0.0 && self.tau_factor <= 0.25) {
            return bad(format!(
                "tau_factor must lie in (0, 0.25] for the explicit flow, got {}",
                self.tau_factor
            ));
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return bad(format!("t_max must be positive, got {}", self.t_max));
        }
        if !(self.stop_ut_tol >= 0.0) {
            return bad("stop_ut_tol must be non-negative".into());
        }
        if !(self.epsilon1 > 0.0) {
            return bad(format!("epsilon1 must be positive, got {}", self.epsilon1));
        }
        if self.snap_every == 0 || self.scan_every == 0 {
            return bad("snap_every and scan_every must be positive".into());
        }
        let d = &self.descent;
        if !(d.c1 > 0.0 && d.c1 < 1.0 && d.shrink > 0.0 && d.shrink < 1.0 && d.grow >= 1.0) {
            return bad("descent line-search constants out of range".into());
        }
        self.elliptic.validate()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.n)
    }

    pub fn tau(&self) -> f64 {
        let h = 1.0 / (self.n - 1) as f64;
        self.tau_factor * h * h
    }
}

/// Everything fixed over a run: geometry, boundary data and the
/// reference extension `ψ_ext`.
#[derive(Debug, Clone)]
pub struct FlowProblem {
    pub target: TargetManifold,
    pub warp: WarpFunction,
    /// Boundary map; only its trace is used after construction.
    pub phi: MapField,
    /// Boundary trace of `v`; interior values are ignored.
    pub psi: ScalarField,
    /// Extension of `ψ` with respect to `β(φ)`.
    pub psi_ext: ScalarField,
    pub elliptic: EllipticConfig,
}

impl FlowProblem {
    pub fn new(
        target: TargetManifold,
        warp: WarpFunction,
        phi: MapField,
        psi: ScalarField,
        elliptic: EllipticConfig,
    ) -> Result<Self> {
        if phi.k() != target.ambient_dim() {
            return Err(Error::InvalidConfig(format!(
                "boundary map has {} components, target lives in R^{}",
                phi.k(),
                target.ambient_dim()
            )));
        }
        let psi_ext = crate::elliptic::extend_boundary(&phi, &psi, &warp, &elliptic)?;
        Ok(Self {
            target,
            warp,
            phi,
            psi,
            psi_ext,
            elliptic,
        })
    }

    pub fn grid(&self) -> Grid {
        self.phi.grid()
    }

    pub fn face_avg(&self) -> FaceAverage {
        self.elliptic.face_avg
    }

    pub fn solve_v(&self, u: &MapField, initial: Option<&ScalarField>) -> Result<(ScalarField, SolveStats)> {
        solve_v(u, &self.psi, &self.warp, &self.elliptic, initial)
    }
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub u: MapField,
    /// Always the constraint solution for `u`.
    pub v: ScalarField,
    pub t: f64,
    pub step_index: usize,
    pub elliptic_iters: usize,
    pub qbeta: f64,
    /// Constraint solution of the previous step, used to extrapolate the
    /// next warm start.
    pub v_prev: Option<ScalarField>,
}

impl FlowState {
    pub fn initial(problem: &FlowProblem, u0: MapField) -> Result<Self> {
        let (v, stats) = problem.solve_v(&u0, Some(&problem.psi_ext))?;
        Ok(Self {
            u: u0,
            v,
            t: 0.0,
            step_index: 0,
            elliptic_iters: stats.iterations,
            qbeta: stats.energy_qbeta,
            v_prev: None,
        })
    }

    /// Warm start `2 v_k - v_{k-1}` (or `v_k` on the first step).
    fn extrapolated_v(&self) -> ScalarField {
        let mut guess = self.v.clone();
        if let Some(prev) = &self.v_prev {
            for (g, p) in guess.values_mut().iter_mut().zip(prev.values()) {
                *g = 2.0 * *g - p;
            }
        }
        guess
    }
}

/// `E_g = 1/2 Σ_e w_e (|Δ_e u|^2 - β_e (Δ_e v)^2)`, with `w_e = 1/2` on
/// boundary edges: the cell-summed `1/2 ∫ |∇u|^2 - β|∇v|^2`.
pub fn lorentz_energy(u: &MapField, v: &ScalarField, warp: &WarpFunction, avg: FaceAverage) -> f64 {
    let g = u.grid();
    let (ex, ey) = edge_sq(g, u.k(), u.values());
    lorentz_energy_from(g, &ex, &ey, v, &beta_nodes(u, warp), avg)
}

fn lorentz_energy_from(g: Grid, ex: &[f64], ey: &[f64], v: &ScalarField, beta: &[f64], avg: FaceAverage) -> f64 {
    let n = g.n();
    let vv = v.values();
    let mut total = 0.0;
    for i in 0..n - 1 {
        for j in 0..n {
            let p = i * n + j;
            let d = vv[p + n] - vv[p];
            let w = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            total += w * (ex[p] - avg.combine(beta[p], beta[p + n]) * d * d);
        }
    }
    for i in 0..n {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        for j in 0..n - 1 {
            let p = i * n + j;
            let d = vv[p + 1] - vv[p];
            total += w * (ey[i * (n - 1) + j] - avg.combine(beta[p], beta[p + 1]) * d * d);
        }
    }
    0.5 * total
}

/// Node weights `s_c = h^-2 Σ_{e∋c} (∂β_e/∂β_c) (Δ_e v)^2` on interior nodes.
pub fn coupling_weights(v: &ScalarField, beta: &[f64], avg: FaceAverage) -> Vec<f64> {
    let g = v.grid();
    let n = g.n();
    let vv = v.values();
    let inv_h2 = 1.0 / (g.h() * g.h());
    let mut s = vec![0.0; g.num_nodes()];
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = i * n + j;
            let mut acc = 0.0;
            for nb in [c + n, c - n, c + 1, c - 1] {
                let d = vv[nb] - vv[c];
                acc += avg.d_first(beta[c], beta[nb]) * d * d;
            }
            s[c] = acc * inv_h2;
        }
    }
    s
}

/// Ambient force `Δ_h u + 1/2 ∇β(u) s(v)` on interior nodes; zero on the boundary.
pub fn ambient_force(u: &MapField, v: &ScalarField, warp: &WarpFunction, avg: FaceAverage) -> MapField {
    let g = u.grid();
    let k = u.k();
    let mut force = vec![0.0; u.values().len()];
    laplacian_into(g, k, u.values(), &mut force);
    if !warp.is_constant() {
        let beta = beta_nodes(u, warp);
        let s = coupling_weights(v, &beta, avg);
        let grad = warp.gradient(k);
        let n = g.n();
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let c = i * n + j;
                for m in 0..k {
                    force[c * k + m] += 0.5 * grad[m] * s[c];
                }
            }
        }
    }
    MapField::from_values(g, k, force).unwrap_or_else(|_| {
        // non-finite input; hand back a poisoned field for the caller's NaN check
        MapField::constant(g, &vec![f64::NAN; k])
    })
}

fn tangential(target: &TargetManifold, u: &MapField, w: &MapField, sign: f64) -> MapField {
    let g = u.grid();
    let k = u.k();
    let mut out = vec![0.0; w.values().len()];
    let mut buf = vec![0.0; k];
    let n = g.n();
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = g.node(i, j);
            target.tangent_project_into(u.node_value(c), w.node_value(c), &mut buf);
            for m in 0..k {
                out[c * k + m] = sign * buf[m];
            }
        }
    }
    MapField::from_values(g, k, out).expect("tangential part of a finite field")
}

fn l2_norm(f: &MapField) -> f64 {
    let h = f.grid().h();
    (f.values().iter().map(|x| x * x).sum::<f64>() * h * h).sqrt()
}

/// Gradient of the reduced energy at `u` (with `v = Φ(u)`), in the node
/// `L^2` metric: `-T(Δ_h u + 1/2 ∇β s(v))`.
pub fn reduced_gradient(u: &MapField, v: &ScalarField, problem: &FlowProblem) -> MapField {
    let f = ambient_force(u, v, &problem.warp, problem.face_avg());
    tangential(&problem.target, u, &f, -1.0)
}

/// Tangential residual of the Euler-Lagrange system and its `L^2` norm.
pub fn tension_residual(
    u: &MapField,
    v: &ScalarField,
    target: &TargetManifold,
    warp: &WarpFunction,
    avg: FaceAverage,
) -> (MapField, f64) {
    let f = ambient_force(u, v, warp, avg);
    let t = tangential(target, u, &f, 1.0);
    let nrm = l2_norm(&t);
    (t, nrm)
}

/// `ε(u) = E(u) - 1/2 Q_β(Φ(u))`, returning the constraint solution too.
pub fn reduced_energy(
    u: &MapField,
    problem: &FlowProblem,
    initial: Option<&ScalarField>,
) -> Result<(f64, ScalarField, SolveStats)> {
    let (v, stats) = problem.solve_v(u, initial.or(Some(&problem.psi_ext)))?;
    Ok((lorentz_energy(u, &v, &problem.warp, problem.face_avg()), v, stats))
}

/// Project `u + step * dir` onto the target at interior nodes.
fn project_update(target: &TargetManifold, u: &MapField, dir: &MapField, step: f64) -> Result<MapField> {
    let g = u.grid();
    let k = u.k();
    let n = g.n();
    let w = n * k;
    let mut out = u.clone();
    let mut y = [0.0; 8];
    let y = &mut y[..k];
    let (uv, dv) = (u.values(), dir.values());
    let ov = out.values_mut();
    for i in 1..n - 1 {
        let rows = i * w + k..(i + 1) * w - k;
        for ((o, a), d) in ov[rows.clone()]
            .chunks_exact_mut(k)
            .zip(uv[rows.clone()].chunks_exact(k))
            .zip(dv[rows].chunks_exact(k))
        {
            for m in 0..k {
                y[m] = a[m] + step * d[m];
            }
            target.project_into(y, o)?;
        }
    }
    Ok(out)
}

fn ut_norm_sq(old: &MapField, new: &MapField, dt: f64) -> f64 {
    let h = old.grid().h();
    let s: f64 = old
        .values()
        .iter()
        .zip(new.values())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    s * h * h / (dt * dt)
}

/// One explicit projected step of the coupled system.
pub fn flow_step(state: &FlowState, cfg: &FlowConfig, problem: &FlowProblem) -> Result<FlowState> {
    let tau = cfg.tau();
    let step = state.step_index + 1;
    let force = ambient_force(&state.u, &state.v, &problem.warp, problem.face_avg());
    if !force.is_finite() {
        return Err(Error::NumericBlowup { step });
    }
    let u = match project_update(&problem.target, &state.u, &force, tau) {
        Ok(u) if u.is_finite() => u,
        Ok(_) | Err(Error::ProjectionUndefined(_)) => return Err(Error::NumericBlowup { step }),
        Err(e) => return Err(e),
    };
    let (v, iters, qbeta) = if problem.warp.is_constant() {
        // ∇β = 0: v does not depend on u
        (state.v.clone(), 0, state.qbeta)
    } else {
        let (v, stats) = problem.solve_v(&u, Some(&state.extrapolated_v()))?;
        (v, stats.iterations, stats.energy_qbeta)
    };
    let v_prev = (!problem.warp.is_constant()).then(|| state.v.clone());
    Ok(FlowState {
        u,
        v,
        t: state.t + tau,
        step_index: step,
        elliptic_iters: iters,
        qbeta,
        v_prev,
    })
}

#[derive(Debug, Clone)]
pub struct StepControl {
    pub step: f64,
}

#[derive(Debug, Clone)]
pub enum DescentOutcome {
    /// `|G|` already at or below the requested tolerance; nothing moved.
    Critical { grad_norm: f64 },
    Accepted {
        state: FlowState,
        energy: f64,
        step: f64,
        grad_norm: f64,
    },
}

/// Backtracking step along `-G` with projection and the Armijo condition.
pub fn descent_step(
    state: &FlowState,
    energy: f64,
    problem: &FlowProblem,
    cfg: &FlowConfig,
    control: &mut StepControl,
) -> Result<DescentOutcome> {
    let grad = reduced_gradient(&state.u, &state.v, problem);
    let gnorm = l2_norm(&grad);
    if gnorm <= cfg.stop_ut_tol {
        return Ok(DescentOutcome::Critical { grad_norm: gnorm });
    }
    let dc = &cfg.descent;
    let mut alpha = control.step;
    loop {
        if alpha < dc.min_step {
            return Err(Error::DescentStalled { grad_norm: gnorm });
        }
        let trial = match project_update(&problem.target, &state.u, &grad, -alpha) {
            Ok(u) => u,
            Err(Error::ProjectionUndefined(_)) => {
                alpha *= dc.shrink;
                continue;
            }
            Err(e) => return Err(e),
        };
        let (e_new, v, stats) = reduced_energy(&trial, problem, Some(&state.v))?;
        if e_new <= energy - dc.c1 * alpha * gnorm * gnorm && e_new < energy {
            control.step = alpha * dc.grow;
            return Ok(DescentOutcome::Accepted {
                state: FlowState {
                    u: trial,
                    v,
                    t: state.t + alpha,
                    step_index: state.step_index + 1,
                    elliptic_iters: stats.iterations,
                    qbeta: stats.energy_qbeta,
                    v_prev: None,
                },
                energy: e_new,
                step: alpha,
                grad_norm: gnorm,
            });
        }
        alpha *= dc.shrink;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub step: usize,
    pub t: f64,
    pub e_u: f64,
    pub e_v: f64,
    pub q_beta: f64,
    pub e_g: f64,
    pub ut_norm_sq: f64,
    /// Time increment that produced this row (0 for the initial row).
    pub dt: f64,
    pub max_grad: f64,
    pub wp4_ratio: f64,
    pub elliptic_iters: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EnergyLedger {
    pub rows: Vec<LedgerRow>,
}

pub const LEDGER_HEADER: &str = "step,t,E_u,E_v,Q_beta,E_g,ut_norm_sq,max_grad,wp4_ratio,elliptic_iters";

impl EnergyLedger {
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(LEDGER_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}\n",
                r.step, r.t, r.e_u, r.e_v, r.q_beta, r.e_g, r.ut_norm_sq, r.max_grad, r.wp4_ratio, r.elliptic_iters
            ));
        }
        s
    }

    /// `Σ dt |u_t|^2` over all rows.
    pub fn cumulative_dissipation(&self) -> f64 {
        self.rows.iter().map(|r| r.dt * r.ut_norm_sq).sum()
    }

    pub fn first(&self) -> &LedgerRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &LedgerRow {
        self.rows.last().expect("ledger has an initial row")
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub u: MapField,
    pub v: ScalarField,
}

impl Snapshot {
    fn of(state: &FlowState) -> Self {
        Self {
            step: state.step_index,
            t: state.t,
            u: state.u.clone(),
            v: state.v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    TMax,
    ConcentrationDetected,
    NumericBlowup,
    EllipticNoConvergence,
    DescentStalled,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::TMax => "t_max",
            Termination::ConcentrationDetected => "concentration_detected",
            Termination::NumericBlowup => "numeric_blowup",
            Termination::EllipticNoConvergence => "elliptic_no_convergence",
            Termination::DescentStalled => "descent_stalled",
        }
    }
}

/// Per-step quantities the harness checks but the ledger does not carry.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunMonitors {
    pub max_constraint_violation: f64,
    pub max_wp2_ratio: f64,
    pub max_wp4_ratio: f64,
    pub wp_degenerate: bool,
    pub max_face_coeff_excess: f64,
    /// Largest ball energy at `monitor_radius` over all scans.
    pub max_monitor_energy: Option<f64>,
    /// Largest smallest-radius ball energy seen by any scan.
    pub max_scan_energy: f64,
    pub scans: usize,
    pub detection: Option<Detection>,
    pub descent_strictly_decreasing: Option<bool>,
    pub final_grad_norm: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Detection {
    pub step: usize,
    pub t: f64,
    pub x: [f64; 2],
    pub radius: f64,
    pub energy: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub ledger: EnergyLedger,
    pub snapshots: Vec<Snapshot>,
    pub termination: Termination,
    pub final_state: FlowState,
    pub monitors: RunMonitors,
}

/// Largest nodewise distance to the target over interior and boundary nodes.
pub fn max_constraint_violation(target: &TargetManifold, u: &MapField) -> f64 {
    u.values()
        .chunks_exact(u.k())
        .map(|y| target.defect(y))
        .fold(0.0, f64::max)
}

struct RowContext {
    psi_lp2: f64,
    psi_lp4: f64,
}

fn ledger_row(
    state: &FlowState,
    problem: &FlowProblem,
    ctx: &RowContext,
    ut_norm_sq: f64,
    dt: f64,
    monitors: &mut RunMonitors,
) -> (LedgerRow, CellField) {
    let g = state.u.grid();
    let (ex, ey) = edge_sq(g, state.u.k(), state.u.values());
    let beta = beta_nodes(&state.u, &problem.warp);
    let e_g = lorentz_energy_from(g, &ex, &ey, &state.v, &beta, problem.face_avg());
    let du = density_from_edges(g, &ex, &ey);
    let dv = gradient_sq(&state.v);
    let ratio = |norm: f64, den: f64| if den > 0.0 { norm / den } else { 0.0 };
    let wp2 = ratio(dv.gradient_lp_norm(2.0), ctx.psi_lp2);
    let wp4 = ratio(dv.gradient_lp_norm(4.0), ctx.psi_lp4);
    monitors.max_wp2_ratio = monitors.max_wp2_ratio.max(wp2);
    monitors.max_wp4_ratio = monitors.max_wp4_ratio.max(wp4);
    monitors.max_constraint_violation = monitors
        .max_constraint_violation
        .max(max_constraint_violation(&problem.target, &state.u));
    // face coefficients are averages of node values, so node bounds cover them
    let (lo, hi) = beta
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &b| (lo.min(b), hi.max(b)));
    let excess = (problem.warp.lambda() - lo).max(hi - problem.warp.big_lambda()).max(0.0);
    monitors.max_face_coeff_excess = monitors.max_face_coeff_excess.max(excess);
    let row = LedgerRow {
        step: state.step_index,
        t: state.t,
        e_u: du.half_integral(),
        e_v: dv.half_integral(),
        q_beta: state.qbeta,
        e_g,
        ut_norm_sq,
        dt,
        max_grad: du.max().sqrt(),
        wp4_ratio: wp4,
        elliptic_iters: state.elliptic_iters,
    };
    (row, du)
}

/// Run the flow (or the descent scheme) from `u0` until a stopping rule fires.
pub fn run(cfg: &FlowConfig, problem: &FlowProblem, u0: MapField) -> Result<RunOutcome> {
    cfg.validate()?;
    let grid = problem.grid();
    if grid.n() != cfg.n {
        return Err(Error::InvalidConfig(format!(
            "problem grid has n = {}, config asks for {}",
            grid.n(),
            cfg.n
        )));
    }
    let ladder = radius_ladder(grid);
    let r_min = *ladder.last().expect("non-empty ladder");
    let psi_density = gradient_sq(&problem.psi_ext);
    let ctx = RowContext {
        psi_lp2: psi_density.gradient_lp_norm(2.0),
        psi_lp4: psi_density.gradient_lp_norm(4.0),
    };
    let mut monitors = RunMonitors {
        wp_degenerate: ctx.psi_lp2 == 0.0,
        ..Default::default()
    };
    if cfg.mode == FlowMode::Descent {
        monitors.descent_strictly_decreasing = Some(true);
    }

    let mut state = FlowState::initial(problem, u0)?;
    let mut ledger = EnergyLedger::default();
    let mut snapshots = vec![Snapshot::of(&state)];
    let (row, du) = ledger_row(&state, problem, &ctx, 0.0, 0.0, &mut monitors);
    ledger.rows.push(row);
    let scan = |state: &FlowState, du: CellField, monitors: &mut RunMonitors| -> bool {
        monitors.scans += 1;
        let table = BallEnergyTable::new(du);
        if let Some(r) = cfg.monitor_radius {
            let (_, e) = table.max_over_nodes(r);
            monitors.max_monitor_energy = Some(monitors.max_monitor_energy.unwrap_or(0.0).max(e));
        }
        let hit = scan_detect(&table, r_min, cfg.epsilon1);
        if let Some((x, e)) = hit {
            monitors.max_scan_energy = monitors.max_scan_energy.max(e);
            if cfg.detect_concentration && e > cfg.epsilon1 {
                monitors.detection = Some(Detection {
                    step: state.step_index,
                    t: state.t,
                    x,
                    radius: r_min,
                    energy: e,
                });
                return true;
            }
        }
        false
    };

    let mut termination = if scan(&state, du, &mut monitors) {
        Termination::ConcentrationDetected
    } else {
        Termination::TMax
    };
    let mut control = StepControl {
        step: cfg.descent.initial_step_factor * grid.h() * grid.h(),
    };
    let mut energy = ledger.rows[0].e_g;
    let tau = cfg.tau();

    while termination == Termination::TMax {
        if state.t >= cfg.t_max - 1e-12 * cfg.t_max {
            break;
        }
        if cfg.max_steps.is_some_and(|m| state.step_index >= m) {
            break;
        }
        let stepped = match cfg.mode {
            FlowMode::Flow => flow_step(&state, cfg, problem).map(|s| Some((s, tau))),
            FlowMode::Descent => match descent_step(&state, energy, problem, cfg, &mut control) {
                Ok(DescentOutcome::Critical { grad_norm }) => {
                    monitors.final_grad_norm = Some(grad_norm);
                    termination = Termination::Converged;
                    Ok(None)
                }
                Ok(DescentOutcome::Accepted {
                    state: s,
                    energy: e,
                    step,
                    grad_norm,
                }) => {
                    if !(e < energy) {
                        monitors.descent_strictly_decreasing = Some(false);
                    }
                    energy = e;
                    monitors.final_grad_norm = Some(grad_norm);
                    Ok(Some((s, step)))
                }
                Err(Error::DescentStalled { grad_norm }) => {
                    monitors.final_grad_norm = Some(grad_norm);
                    termination = if grad_norm <= cfg.descent.stall_grad_tol {
                        Termination::Converged
                    } else {
                        monitors.error = Some(format!("descent_stalled at |G| = {grad_norm:e}"));
                        Termination::DescentStalled
                    };
                    Ok(None)
                }
                Err(e) => Err(e),
            },
        };
        let (next, dt) = match stepped {
            Ok(Some(pair)) => pair,
            Ok(None) => break,
            Err(e) => {
                termination = match e {
                    Error::NumericBlowup { .. } => Termination::NumericBlowup,
                    Error::EllipticNoConvergence(_) => Termination::EllipticNoConvergence,
                    other => return Err(other),
                };
                monitors.error = Some(e.to_string());
                break;
            }
        };
        let ut2 = ut_norm_sq(&state.u, &next.u, dt);
        state = next;
        let (row, du) = ledger_row(&state, problem, &ctx, ut2, dt, &mut monitors);
        ledger.rows.push(row);
        if state.step_index % cfg.snap_every == 0 {
            snapshots.push(Snapshot::of(&state));
        }
        if cfg.mode == FlowMode::Flow && ut2.sqrt() <= cfg.stop_ut_tol {
            termination = Termination::Converged;
            break;
        }
        if state.step_index % cfg.scan_every == 0 && scan(&state, du, &mut monitors) {
            termination = Termination::ConcentrationDetected;
            break;
        }
    }
    if snapshots.last().map(|s| s.step) != Some(state.step_index) {
        snapshots.push(Snapshot::of(&state));
    }
    Ok(RunOutcome {
        ledger,
        snapshots,
        termination,
        final_state: state,
        monitors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::EllipticOperator;
    use crate::target::WarpKind;
    use std::f64::consts::PI;

    fn sphere_problem(n: usize, warp: WarpKind, psi: impl Fn(f64, f64) -> f64) -> FlowProblem {
        let g = Grid::new(n).unwrap();
        let target = TargetManifold::sphere2();
        let warp = WarpFunction::new(warp, &target).unwrap();
        let phi = MapField::constant(g, &[0.0, 0.0, 1.0]);
        FlowProblem::new(target, warp, phi, ScalarField::from_fn(g, psi), EllipticConfig::default()).unwrap()
    }

    const AFFINE: WarpKind = WarpKind::AffineHeight { a: 2.0, b: 1.0, axis: 3 };

    #[test]
    fn lorentz_energy_constant_fields() {
        let p = sphere_problem(17, AFFINE, |_, _| 0.4);
        let u = MapField::constant(p.grid(), &[0.0, 1.0, 0.0]);
        let v = ScalarField::from_fn(p.grid(), |_, _| 0.4);
        assert_eq!(lorentz_energy(&u, &v, &p.warp, FaceAverage::Arithmetic), 0.0);
    }

    #[test]
    fn lorentz_energy_north_pole_affine_v() {
        let p = sphere_problem(129, AFFINE, |x, _| x);
        let u = MapField::constant(p.grid(), &[0.0, 0.0, 1.0]);
        let v = ScalarField::from_fn(p.grid(), |x, _| x);
        let e = lorentz_energy(&u, &v, &p.warp, FaceAverage::Arithmetic);
        assert!((e + 1.5).abs() < 1e-3, "{e}");
    }

    #[test]
    fn lorentz_energy_matches_quadratic_form() {
        let p = sphere_problem(33, AFFINE, |x, y| x * y + 0.3 * x);
        let target = &p.target;
        let u = MapField::from_fn(p.grid(), 3, |x, y, out| {
            let q = target.project(&[(3.0 * x).sin(), y - 0.2, 0.5 + x * y]).unwrap();
            out.copy_from_slice(&q);
        });
        let (v, stats) = p.solve_v(&u, None).unwrap();
        for avg in [FaceAverage::Arithmetic, FaceAverage::Harmonic] {
            let op = EllipticOperator::from_map(&u, &p.warp, avg);
            let indep = crate::grid::dirichlet_energy(&u) - 0.5 * op.quad_form(&v);
            let eg = lorentz_energy(&u, &v, &p.warp, avg);
            assert!((eg - indep).abs() <= 1e-10 * indep.abs().max(1.0));
        }
        assert!(stats.energy_qbeta > 0.0);
    }

    #[test]
    fn constant_data_is_a_fixed_point() {
        let p = sphere_problem(17, AFFINE, |_, _| 0.25);
        let u = MapField::constant(p.grid(), &[0.0, 0.6, 0.8]);
        let s = FlowState::initial(&p, u.clone()).unwrap();
        assert!(s.v.values().iter().all(|x| (x - 0.25).abs() < 1e-12));
        let cfg = FlowConfig { n: 17, ..Default::default() };
        let next = flow_step(&s, &cfg, &p).unwrap();
        assert!(next.u.sup_distance(&u) < 1e-15);
    }

    #[test]
    fn coupling_pushes_toward_larger_beta() {
        let n = 33;
        let p = sphere_problem(n, AFFINE, |x, _| x);
        // u ≡ (1,0,0) in the interior; boundary is north pole by φ, but use a
        // constant equator map everywhere to isolate the coupling
        let g = p.grid();
        let phi = MapField::constant(g, &[1.0, 0.0, 0.0]);
        let p = FlowProblem::new(p.target.clone(), p.warp.clone(), phi.clone(), p.psi.clone(), p.elliptic).unwrap();
        let cfg = FlowConfig { n, ..Default::default() };
        let s0 = FlowState::initial(&p, phi).unwrap();
        let e0 = lorentz_energy(&s0.u, &s0.v, &p.warp, FaceAverage::Arithmetic);
        let s1 = flow_step(&s0, &cfg, &p).unwrap();
        let c = g.node(n / 2, n / 2);
        assert!(s1.u.node_value(c)[2] > 0.0);
        let e1 = lorentz_energy(&s1.u, &s1.v, &p.warp, FaceAverage::Arithmetic);
        assert!(e1 < e0);
        let ut2 = ut_norm_sq(&s0.u, &s1.u, cfg.tau());
        let de = e0 - e1;
        let pred = cfg.tau() * ut2;
        assert!((de - pred).abs() <= 0.05 * pred, "{de} vs {pred}");
    }

    #[test]
    fn linearised_decay_rate() {
        let n = 33;
        let g = Grid::new(n).unwrap();
        let target = TargetManifold::sphere2();
        let warp = WarpFunction::constant(1.0).unwrap();
        let phi = MapField::constant(g, &[0.0, 0.0, 1.0]);
        let psi = ScalarField::from_fn(g, |x, y| x * x - y);
        let p = FlowProblem::new(target.clone(), warp, phi, psi, EllipticConfig::default()).unwrap();
        let amp0 = 0.01;
        let u0 = MapField::from_fn(g, 3, |x, y, out| {
            let b = amp0 * (PI * x).sin() * (PI * y).sin();
            out.copy_from_slice(&target.project(&[b, 0.0, 1.0]).unwrap());
        });
        let cfg = FlowConfig { n, t_max: 0.05, stop_ut_tol: 0.0, ..Default::default() };
        let mut s = FlowState::initial(&p, u0).unwrap();
        while s.t < 0.05 - 1e-12 {
            s = flow_step(&s, &cfg, &p).unwrap();
        }
        let c = g.node(n / 2, n / 2);
        let amp = s.u.node_value(c)[0];
        let rate = (amp0 / amp).ln() / s.t;
        let lam = 2.0 * PI * PI;
        assert!((rate - lam).abs() <= 0.05 * lam, "rate {rate}");
    }

    #[test]
    fn config_rejects_large_tau() {
        let cfg = FlowConfig { tau_factor: 0.3, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tension_zero_for_constant_state() {
        let p = sphere_problem(17, AFFINE, |_, _| 1.0);
        let u = MapField::constant(p.grid(), &[0.0, 0.0, 1.0]);
        let v = ScalarField::from_fn(p.grid(), |_, _| 1.0);
        let (_, nrm) = tension_residual(&u, &v, &p.target, &p.warp, FaceAverage::Arithmetic);
        assert_eq!(nrm, 0.0);
    }
}
