//! The constraint `-div(beta(u) grad v) = 0` with Dirichlet trace `psi`.
//!
//! The operator lives on cell faces (grid edges). Each face carries a
//! coefficient averaged from `beta(u)` at its two end nodes, and the
//! quadratic form
//!
//! ```text
//! Q_beta(w) = sum_e w_e * beta_e * (w_b - w_a)^2
//! ```
//!
//! uses the same boundary-edge weights `w_e` as the grid's Dirichlet energy,
//! so `Q_1(w) = 2 E(w)`. The discrete solution minimises `Q_beta` among
//! fields with the same trace; it is found with Jacobi-preconditioned
//! conjugate gradients on the interior unknowns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient_sq, Grid, MapField, NodeField, ScalarField};
use crate::target::{dot, WarpFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceAverage {
    #[default]
    Arithmetic,
    Harmonic,
}

impl FaceAverage {
    #[inline]
    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            FaceAverage::Arithmetic => 0.5 * (a + b),
            FaceAverage::Harmonic => 2.0 * a * b / (a + b),
        }
    }

    /// Partial derivative of the face coefficient with respect to `a`.
    #[inline]
    pub fn d_first(self, a: f64, b: f64) -> f64 {
        match self {
            FaceAverage::Arithmetic => 0.5,
            FaceAverage::Harmonic => 2.0 * b * b / ((a + b) * (a + b)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipticConfig {
    pub tol: f64,
    pub face_avg: FaceAverage,
    pub max_iter_factor: usize,
}

impl Default for EllipticConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            face_avg: FaceAverage::Arithmetic,
            max_iter_factor: 50,
        }
    }
}

impl EllipticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol <= 1e-6) {
            return Err(Error::InvalidConfig(format!(
                "elliptic.tol must lie in (0, 1e-6], got {}",
                self.tol
            )));
        }
        if self.max_iter_factor == 0 {
            return Err(Error::InvalidConfig("elliptic.max_iter_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    /// Relative algebraic residual `|b - A v| / |b|` on interior nodes.
    pub residual: f64,
    pub energy_qbeta: f64,
}

#[derive(Debug, Clone)]
pub struct EllipticOperator {
    grid: Grid,
    /// x-faces: edge `(i, j)-(i+1, j)` at `i * n + j`.
    face_x: Vec<f64>,
    /// y-faces: edge `(i, j)-(i, j+1)` at `i * (n - 1) + j`.
    face_y: Vec<f64>,
    diag: Vec<f64>,
    /// `1 / diag` on interior nodes, zero on the boundary.
    inv_diag: Vec<f64>,
}

impl EllipticOperator {
    pub fn new(grid: Grid, beta_nodes: &[f64], avg: FaceAverage) -> Self {
        let n = grid.n();
        let mut face_x = Vec::with_capacity((n - 1) * n);
        for i in 0..n - 1 {
            for j in 0..n {
                let p = grid.node(i, j);
                face_x.push(avg.combine(beta_nodes[p], beta_nodes[p + n]));
            }
        }
        let mut face_y = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n - 1 {
                let p = grid.node(i, j);
                face_y.push(avg.combine(beta_nodes[p], beta_nodes[p + 1]));
            }
        }
        let mut op = Self {
            grid,
            face_x,
            face_y,
            diag: vec![0.0; grid.num_nodes()],
            inv_diag: vec![0.0; grid.num_nodes()],
        };
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let (e, w, no, s) = op.faces_at(i, j);
                let c = grid.node(i, j);
                op.diag[c] = e + w + no + s;
                op.inv_diag[c] = 1.0 / op.diag[c];
            }
        }
        op
    }

    /// Operator with face coefficients built from `beta(u)`.
    pub fn from_map(u: &MapField, warp: &WarpFunction, avg: FaceAverage) -> Self {
        let beta = beta_nodes(u, warp);
        Self::new(u.grid(), &beta, avg)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Face coefficients `(east, west, north, south)` around node `(i, j)`.
    #[inline]
    fn faces_at(&self, i: usize, j: usize) -> (f64, f64, f64, f64) {
        let n = self.grid.n();
        (
            self.face_x[i * n + j],
            self.face_x[(i - 1) * n + j],
            self.face_y[i * (n - 1) + j],
            self.face_y[i * (n - 1) + j - 1],
        )
    }

    pub fn face_bounds(&self) -> (f64, f64) {
        self.face_x
            .iter()
            .chain(&self.face_y)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)))
    }

    /// `Q_beta(w)`, summed face by face.
    pub fn quad_form(&self, w: &ScalarField) -> f64 {
        let n = self.grid.n();
        let v = w.values();
        let mut total = 0.0;
        for i in 0..n - 1 {
            for j in 0..n {
                let p = i * n + j;
                let d = v[p + n] - v[p];
                let wt = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                total += wt * self.face_x[p] * d * d;
            }
        }
        for i in 0..n {
            let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            for j in 0..n - 1 {
                let p = i * n + j;
                let d = v[p + 1] - v[p];
                total += wt * self.face_y[i * (n - 1) + j] * d * d;
            }
        }
        total
    }

    /// `out_c = sum_nb beta_e (x_c - x_nb)` on interior nodes, zero elsewhere.
    /// This is half the gradient of `Q_beta` with respect to interior values.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.apply_interior(x, out);
    }

    /// [`Self::apply`] without touching boundary entries of `out`.
    fn apply_interior(&self, x: &[f64], out: &mut [f64]) {
        let n = self.grid.n();
        for i in 1..n - 1 {
            let xs = &x[(i - 1) * n..i * n];
            let xc = &x[i * n..(i + 1) * n];
            let xn = &x[(i + 1) * n..(i + 2) * n];
            let fe = &self.face_x[i * n..(i + 1) * n];
            let fw = &self.face_x[(i - 1) * n..i * n];
            let fy = &self.face_y[i * (n - 1)..(i + 1) * (n - 1)];
            let o = &mut out[i * n..(i + 1) * n];
            for j in 1..n - 1 {
                let c = xc[j];
                o[j] = fe[j] * (c - xn[j])
                    + fw[j] * (c - xs[j])
                    + fy[j] * (c - xc[j + 1])
                    + fy[j - 1] * (c - xc[j - 1]);
            }
        }
    }

    /// Solve for the interior with the boundary trace taken from `trace`.
    /// `initial` (if any) seeds the interior.
    pub fn solve(
        &self,
        trace: &ScalarField,
        initial: Option<&ScalarField>,
        tol: f64,
        max_iter: usize,
    ) -> Result<(ScalarField, SolveStats)> {
        let g = self.grid;
        let nn = g.num_nodes();

        let mut v = match initial {
            Some(init) => init.clone(),
            None => ScalarField::zeros(g),
        };
        v.set_boundary_from(trace);

        // Work vectors keep zero boundary entries throughout, so full-length
        // dot products equal interior ones.
        let mut r = vec![0.0; nn];
        let mut z = vec![0.0; nn];
        let mut p = vec![0.0; nn];
        let mut ap = vec![0.0; nn];

        // right-hand side from the boundary data alone
        {
            let mut vb = ScalarField::zeros(g);
            vb.set_boundary_from(trace);
            self.apply_interior(vb.values(), &mut r);
        }
        let b_norm = dot(&r, &r).sqrt();
        let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
        let mut iterations = 0;

        let residual_of = |v: &ScalarField, r: &mut [f64]| {
            self.apply_interior(v.values(), r);
            r.iter_mut().for_each(|x| *x = -*x);
        };

        residual_of(&v, &mut r);
        let mut rel = dot(&r, &r).sqrt() / scale;

        // Restart loop: recompute the true residual after recurrence convergence.
        while rel > tol && iterations < max_iter {
            let mut rz = 0.0;
            for ((zi, ri), di) in z.iter_mut().zip(&r).zip(&self.inv_diag) {
                *zi = ri * di;
                rz += ri * *zi;
            }
            p.copy_from_slice(&z);
            while iterations < max_iter {
                self.apply_interior(&p, &mut ap);
                let pap = dot(&p, &ap);
                if pap <= 0.0 {
                    break;
                }
                let alpha = rz / pap;
                let mut rr = 0.0;
                let mut rz_new = 0.0;
                for ((((vi, ri), zi), pi), (api, di)) in v
                    .values_mut()
                    .iter_mut()
                    .zip(r.iter_mut())
                    .zip(z.iter_mut())
                    .zip(&p)
                    .zip(ap.iter().zip(&self.inv_diag))
                {
                    *vi += alpha * pi;
                    *ri -= alpha * api;
                    *zi = *ri * di;
                    rr += *ri * *ri;
                    rz_new += *ri * *zi;
                }
                iterations += 1;
                if rr.sqrt() / scale <= tol {
                    break;
                }
                let beta = rz_new / rz;
                rz = rz_new;
                for (pi, zi) in p.iter_mut().zip(&z) {
                    *pi = zi + beta * *pi;
                }
            }
            residual_of(&v, &mut r);
            let true_rel = dot(&r, &r).sqrt() / scale;
            if true_rel >= rel && true_rel > tol {
                // no progress from a full restart cycle
                rel = true_rel;
                break;
            }
            rel = true_rel;
        }

        let stats = SolveStats {
            iterations,
            residual: rel,
            energy_qbeta: self.quad_form(&v),
        };
        if rel > tol || !v.is_finite() {
            return Err(Error::EllipticNoConvergence(stats));
        }
        Ok((v, stats))
    }
}

/// `beta(u)` at every node.
pub fn beta_nodes(u: &MapField, warp: &WarpFunction) -> Vec<f64> {
    (0..u.grid().num_nodes())
        .map(|k| warp.value(u.node_value(k)))
        .collect()
}

/// Solve the constraint for `v` given the current map `u`.
pub fn solve_v(
    u: &MapField,
    psi_trace: &ScalarField,
    warp: &WarpFunction,
    cfg: &EllipticConfig,
    initial: Option<&ScalarField>,
) -> Result<(ScalarField, SolveStats)> {
    cfg.validate()?;
    let op = EllipticOperator::from_map(u, warp, cfg.face_avg);
    op.solve(psi_trace, initial, cfg.tol, cfg.max_iter_factor * u.grid().n())
}

/// The extension of `psi` with respect to the initial map `phi`.
pub fn extend_boundary(
    phi: &MapField,
    psi_trace: &ScalarField,
    warp: &WarpFunction,
    cfg: &EllipticConfig,
) -> Result<ScalarField> {
    solve_v(phi, psi_trace, warp, cfg, None).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WpRatio {
    pub ratio: f64,
    /// Set when `grad psi_ext` vanishes and the ratio is reported as 0.
    pub degenerate: bool,
}

/// `|grad v|_p / |grad psi_ext|_p` with discrete cell-based `L^p` norms.
pub fn wp_monitor(v: &ScalarField, psi_ext: &ScalarField, p: f64) -> WpRatio {
    let den = gradient_sq(psi_ext).gradient_lp_norm(p);
    if den == 0.0 {
        return WpRatio {
            ratio: 0.0,
            degenerate: true,
        };
    }
    WpRatio {
        ratio: gradient_sq(v).gradient_lp_norm(p) / den,
        degenerate: false,
    }
}

/// Signed slack of the discrete maximum principle: the most negative of
/// `v - min(trace)` and `max(trace) - v` over all nodes.
pub fn max_principle_margin(v: &ScalarField, trace: &ScalarField) -> f64 {
    let g = v.grid();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, j) in g.boundary_loop() {
        let t = trace.get(i, j);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    v.values()
        .iter()
        .map(|&x| (x - lo).min(hi - x))
        .fold(f64::INFINITY, f64::min)
}
