//! Energy concentration scans, blow-up selection and bubble extraction.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::Snapshot;
use crate::grid::{
    gradient_sq, interpolate_into, BallEnergyTable, CellField, Grid, MapField, NodeField,
    ScalarField,
};
use crate::target::TargetManifold;

/// Largest radius considered by [`select_blowup`].
pub const DEFAULT_R_CAP: f64 = 0.25;
/// Window half-width in bubble radii.
pub const DEFAULT_WINDOW: f64 = 8.0;
/// Extracted grid size.
pub const DEFAULT_WINDOW_NODES: usize = 129;

/// Descending radii `0.2, 0.1, 0.05, 0.025` followed by the resolution radius
/// `2h * ceil(0.0125 / 2h)`; entries not above the last one are dropped.
pub fn radius_ladder(grid: Grid) -> Vec<f64> {
    let two_h = 2.0 * grid.h();
    let r_min = two_h * (0.0125 / two_h).ceil();
    let mut radii: Vec<f64> = [0.2, 0.1, 0.05, 0.025].into_iter().filter(|&r| r > r_min).collect();
    radii.push(r_min);
    radii
}

/// Centre and ball energy of the strongest node whose ball energy at `r`
/// exceeds `level`, if any.
pub fn scan_detect(table: &BallEnergyTable, r: f64, level: f64) -> Option<([f64; 2], f64)> {
    let g = table.grid();
    // a ball of radius r meets at most (2r/h + 2)^2 cells
    let h = g.h();
    let cells = (2.0 * r / h + 2.0).powi(2);
    if 0.5 * table.density().max() * h * h * cells <= level || table.total_energy() <= level {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (node, e) in table.nodes_exceeding(r, level) {
        if best.map_or(true, |(_, b)| e > b) {
            best = Some((node, e));
        }
    }
    best.map(|(node, e)| {
        let (i, j) = g.node_ij(node);
        (g.point(i, j), e)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    pub node: usize,
    pub x: [f64; 2],
    pub r_star: f64,
    pub e_ball: f64,
    pub boundary_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SingularityReport {
    pub candidates: Vec<Candidate>,
    pub epsilon1: f64,
    pub t: f64,
    pub total_energy: f64,
}

impl SingularityReport {
    /// `(total energy) / ε₁ + 1`.
    pub fn candidate_bound(&self) -> f64 {
        self.total_energy / self.epsilon1 + 1.0
    }
}

/// Scan every node over `radii` (sorted descending, smallest at least `2h`).
///
/// Nodes exceeding `epsilon1` at the smallest radius are grouped into
/// connected components; each component contributes its peak, and peaks
/// closer than `2 r_star` to a stronger one are suppressed. Candidates are
/// listed in node order.
pub fn concentration_scan<F: NodeField + ?Sized>(
    u: &F,
    radii: &[f64],
    epsilon1: f64,
    t: f64,
) -> SingularityReport {
    let table = BallEnergyTable::from_field(u);
    concentration_scan_table(&table, radii, epsilon1, t)
}

pub fn concentration_scan_table(
    table: &BallEnergyTable,
    radii: &[f64],
    epsilon1: f64,
    t: f64,
) -> SingularityReport {
    let g = table.grid();
    let n = g.n();
    let total_energy = table.total_energy();
    let Some(&r_min) = radii.last() else {
        return SingularityReport { candidates: vec![], epsilon1, t, total_energy };
    };
    let hot = table.nodes_exceeding(r_min, epsilon1);
    let mut energy = vec![f64::NAN; g.num_nodes()];
    for &(node, e) in &hot {
        energy[node] = e;
    }

    // component peaks by flood fill over the 4-neighbour lattice
    let mut seen = vec![false; g.num_nodes()];
    let mut peaks: Vec<(usize, f64)> = Vec::new();
    let mut stack = Vec::new();
    for &(start, _) in &hot {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut peak = (start, energy[start]);
        while let Some(c) = stack.pop() {
            if energy[c] > peak.1 || (energy[c] == peak.1 && c < peak.0) {
                peak = (c, energy[c]);
            }
            let (i, j) = g.node_ij(c);
            let nbrs = [
                (i > 0).then(|| c - n),
                (i + 1 < n).then(|| c + n),
                (j > 0).then(|| c - 1),
                (j + 1 < n).then(|| c + 1),
            ];
            for nb in nbrs.into_iter().flatten() {
                if !seen[nb] && !energy[nb].is_nan() {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
        peaks.push(peak);
    }

    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<Candidate> = Vec::new();
    for (node, e_min) in peaks {
        let (i, j) = g.node_ij(node);
        let x = g.point(i, j);
        // smallest ladder radius that still exceeds: the scan is monotone in r
        let r_star = radii
            .iter()
            .rev()
            .copied()
            .find(|&r| table.ball_energy(x, r) > epsilon1)
            .unwrap_or(r_min);
        let e_ball = if r_star == r_min { e_min } else { table.ball_energy(x, r_star) };
        let close = kept.iter().any(|c| {
            let d = ((c.x[0] - x[0]).powi(2) + (c.x[1] - x[1]).powi(2)).sqrt();
            d < 2.0 * r_star.max(c.r_star)
        });
        if !close {
            kept.push(Candidate {
                node,
                x,
                r_star,
                e_ball,
                boundary_ratio: Grid::dist_to_boundary(x) / r_star,
            });
        }
    }
    kept.sort_by_key(|c| c.node);
    SingularityReport { candidates: kept, epsilon1, t, total_energy }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Selection {
    pub x_i: [f64; 2],
    pub r_i: f64,
    pub t_i: f64,
    /// Index into the snapshot history.
    pub snapshot: usize,
    pub e_ball: f64,
    pub boundary_ratio: f64,
}

/// Smallest radius `r ≤ r_cap` whose maximal ball energy over node centres
/// reaches `level`, with its centre. Bisection stops below `h / 64`.
pub fn select_at<F: NodeField + ?Sized>(u: &F, level: f64, r_cap: f64) -> Result<([f64; 2], f64, f64)> {
    let table = BallEnergyTable::from_field(u);
    let g = table.grid();
    let (_, top) = table.max_over_nodes(r_cap);
    if !(top >= level) {
        return Err(Error::NoConcentration { level });
    }
    let (mut lo, mut hi) = (0.0, r_cap);
    while hi - lo > g.h() / 64.0 {
        let mid = 0.5 * (lo + hi);
        if table.max_over_nodes(mid).1 >= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (node, e) = table.max_over_nodes(hi);
    let (i, j) = g.node_ij(node);
    Ok((g.point(i, j), hi, e))
}

/// Blow-up point selection at level `ε₁/2` over a snapshot history.
///
/// The latest snapshot whose selected radius is resolved (`r_i ≥ 2h`) wins;
/// earlier snapshots are consulted only when later ones have collapsed
/// below the lattice scale.
pub fn select_blowup(history: &[Snapshot], epsilon1: f64, r_cap: f64) -> Result<Selection> {
    if history.len() < 2 {
        return Err(Error::InsufficientHistory { need: 2, got: history.len() });
    }
    let level = 0.5 * epsilon1;
    let mut first_err = None;
    for (idx, snap) in history.iter().enumerate().rev() {
        let min = 2.0 * snap.u.grid().h();
        match select_at(&snap.u, level, r_cap) {
            Ok((x, r, e)) if r >= min => {
                return Ok(Selection {
                    x_i: x,
                    r_i: r,
                    t_i: snap.t,
                    snapshot: idx,
                    e_ball: e,
                    boundary_ratio: Grid::dist_to_boundary(x) / r,
                })
            }
            Ok((_, r, _)) => {
                first_err.get_or_insert(Error::UnderResolved { r_i: r, min });
            }
            Err(e) => {
                if idx == history.len() - 1 {
                    return Err(e);
                }
                break;
            }
        }
    }
    Err(first_err.unwrap_or(Error::NoConcentration { level }))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BubbleStats {
    /// Dirichlet energy of the rescaled map.
    pub e_bubble: f64,
    /// `L^2` norm over the window of the rescaled tangential Laplacian.
    pub tension_norm: f64,
    /// Largest `|∇ṽ|` in window units.
    pub grad_v_norm: f64,
    /// Largest `|∇v|` over the source domain.
    pub grad_v_reference: f64,
    /// Energy of the source map over cells inside the window.
    pub source_window_energy: f64,
}

#[derive(Debug, Clone)]
pub struct BubbleExtract {
    pub x_i: [f64; 2],
    pub r_i: f64,
    pub t_i: f64,
    pub half_width: f64,
    pub u_tilde: MapField,
    pub v_tilde: ScalarField,
    pub stats: BubbleStats,
}

fn window_point(x_i: [f64; 2], r_i: f64, half_width: f64, grid: Grid, a: usize, b: usize) -> [f64; 2] {
    let [sx, sy] = grid.point(a, b);
    let p = [
        x_i[0] + r_i * half_width * (2.0 * sx - 1.0),
        x_i[1] + r_i * half_width * (2.0 * sy - 1.0),
    ];
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Energy of source cells whose centres lie in the square `x_i + r_i [-L, L]^2`.
pub fn source_window_energy(density: &CellField, x_i: [f64; 2], half: f64) -> f64 {
    let g = density.grid();
    let m = g.cells_per_side();
    let h = g.h();
    let mut total = 0.0;
    for ci in 0..m {
        for cj in 0..m {
            let [x, y] = g.cell_center(ci, cj);
            if (x - x_i[0]).abs() <= half && (y - x_i[1]).abs() <= half {
                total += density.get(ci, cj);
            }
        }
    }
    0.5 * total * h * h
}

/// Rescale `u` and `v` around `x_i` by `r_i` onto an `m × m` grid covering
/// `[-L, L]^2` in bubble units. Window points outside the square are clamped
/// to its boundary.
#[allow(clippy::too_many_arguments)]
pub fn extract_bubble(
    u: &MapField,
    v: &ScalarField,
    target: &TargetManifold,
    x_i: [f64; 2],
    r_i: f64,
    t_i: f64,
    half_width: f64,
    m: usize,
) -> Result<BubbleExtract> {
    let src = u.grid();
    let min = 2.0 * src.h();
    if r_i < min {
        return Err(Error::UnderResolved { r_i, min });
    }
    let win = Grid::new(m)?;
    let k = u.k();
    let lap = crate::grid::laplacian_map(u);
    let mut ut = vec![0.0; win.num_nodes() * k];
    let mut vt = vec![0.0; win.num_nodes()];
    let mut tension_sq = 0.0;
    let mut raw = vec![0.0; k];
    let mut lap_at = vec![0.0; k];
    let mut tang = vec![0.0; k];
    for a in 0..m {
        for b in 0..m {
            let node = win.node(a, b);
            let p = window_point(x_i, r_i, half_width, win, a, b);
            interpolate_into(u, p, &mut raw)?;
            target.project_into(&raw, &mut ut[node * k..(node + 1) * k])?;
            let mut sv = [0.0];
            interpolate_into(v, p, &mut sv)?;
            vt[node] = sv[0];
            interpolate_into(&lap, p, &mut lap_at)?;
            target.tangent_project_into(&ut[node * k..(node + 1) * k], &lap_at, &mut tang);
            tension_sq += tang.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let spacing = 2.0 * half_width / (m - 1) as f64;
    let u_tilde = MapField::from_values(win, k, ut)?;
    let v_tilde = ScalarField::from_values(win, vt)?;
    let e_bubble = crate::grid::dirichlet_energy(&u_tilde);
    let tension_norm = r_i * r_i * (tension_sq * spacing * spacing).sqrt();
    let grad_v_norm = gradient_sq(&v_tilde).max().sqrt() / (2.0 * half_width);
    let grad_v_reference = gradient_sq(v).max().sqrt();
    let source = source_window_energy(&gradient_sq(u), x_i, r_i * half_width);
    Ok(BubbleExtract {
        x_i,
        r_i,
        t_i,
        half_width,
        u_tilde,
        v_tilde,
        stats: BubbleStats {
            e_bubble,
            tension_norm,
            grad_v_norm,
            grad_v_reference,
            source_window_energy: source,
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BubbleVerdict {
    pub energy_ok: bool,
    pub tension_ok: bool,
    /// Only evaluated for a single degree-one bubble into the round sphere.
    pub sphere_energy_ok: Option<bool>,
    pub failed: Vec<String>,
}

impl BubbleVerdict {
    pub fn passed(&self) -> bool {
        self.failed.is_empty()
    }
}

pub const ENERGY_SLACK: f64 = 0.05;

/// Check the extracted bubble: energy at least `ε₁/4` (5% slack), tension
/// at most `rel_tol * E_bubble`, and for a single degree-one sphere bubble
/// an energy within `[0.8, 1.2] · 4π`.
pub fn verify_bubble(b: &BubbleExtract, epsilon1: f64, rel_tol: f64, single_sphere_bubble: bool) -> BubbleVerdict {
    let s = &b.stats;
    let energy_ok = s.e_bubble >= 0.25 * epsilon1 * (1.0 - ENERGY_SLACK);
    let tension_ok = s.tension_norm <= rel_tol * s.e_bubble;
    let four_pi = 4.0 * std::f64::consts::PI;
    let sphere_energy_ok =
        single_sphere_bubble.then(|| (0.8 * four_pi..=1.2 * four_pi).contains(&s.e_bubble));
    let mut failed = Vec::new();
    if !energy_ok {
        failed.push(format!("bubble energy {} below eps1/4", s.e_bubble));
    }
    if !tension_ok {
        failed.push(format!("tension {} above {} * energy", s.tension_norm, rel_tol));
    }
    if sphere_energy_ok == Some(false) {
        failed.push(format!("bubble energy {} outside [0.8, 1.2] * 4pi", s.e_bubble));
    }
    BubbleVerdict { energy_ok, tension_ok, sphere_energy_ok, failed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bubble_map;
    use std::f64::consts::PI;

    fn bubble(n: usize, center: [f64; 2], rho: f64) -> MapField {
        MapField::from_fn(Grid::new(n).unwrap(), 3, |x, y, out| {
            out.copy_from_slice(&bubble_map(center, rho, x, y))
        })
    }

    #[test]
    fn ladder_shapes() {
        let l = radius_ladder(Grid::new(129).unwrap());
        assert_eq!(l.len(), 5);
        assert!((l[4] - 2.0 / 128.0).abs() < 1e-15);
        let l = radius_ladder(Grid::new(65).unwrap());
        assert_eq!(l, vec![0.2, 0.1, 0.05, 2.0 / 64.0]);
        assert!(l.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn quiet_field_gives_empty_report() {
        let g = Grid::new(65).unwrap();
        let u = MapField::from_fn(g, 3, |x, _, out| {
            let a = 0.3 * x;
            out.copy_from_slice(&[a.sin(), 0.0, a.cos()]);
        });
        let rep = concentration_scan(&u, &radius_ladder(g), 1.0, 0.0);
        assert!(rep.candidates.is_empty());
    }

    #[test]
    fn single_bubble_single_candidate() {
        let u = bubble(129, [0.5, 0.5], 0.02);
        let g = u.grid();
        let rep = concentration_scan(&u, &radius_ladder(g), 1.0, 0.0);
        assert_eq!(rep.candidates.len(), 1, "{:?}", rep.candidates);
        let c = &rep.candidates[0];
        assert!((c.x[0] - 0.5).abs() <= g.h() && (c.x[1] - 0.5).abs() <= g.h());
        assert!((rep.candidates.len() as f64) <= rep.candidate_bound());
    }

    #[test]
    fn two_bubbles_two_candidates() {
        let g = Grid::new(129).unwrap();
        let u = MapField::from_fn(g, 3, |x, y, out| {
            // each bubble is the north pole away from its centre; compose by
            // choosing the nearer one
            let c = if (x - 0.3).hypot(y - 0.3) < (x - 0.7).hypot(y - 0.7) { [0.3, 0.3] } else { [0.7, 0.7] };
            out.copy_from_slice(&bubble_map(c, 0.015, x, y));
        });
        let rep = concentration_scan(&u, &radius_ladder(g), 1.0, 0.0);
        assert_eq!(rep.candidates.len(), 2);
        assert!((rep.candidates[0].x[0] - 0.3).abs() <= g.h());
        assert!((rep.candidates[1].x[0] - 0.7).abs() <= g.h());
        assert!(rep.candidates[0].node < rep.candidates[1].node);
    }

    #[test]
    fn selection_needs_history_and_energy() {
        let g = Grid::new(33).unwrap();
        let snap = Snapshot {
            step: 0,
            t: 0.0,
            u: MapField::constant(g, &[0.0, 0.0, 1.0]),
            v: ScalarField::zeros(g),
        };
        assert!(matches!(
            select_blowup(&[snap.clone()], 1.0, DEFAULT_R_CAP),
            Err(Error::InsufficientHistory { .. })
        ));
        assert!(matches!(
            select_blowup(&[snap.clone(), snap], 1.0, DEFAULT_R_CAP),
            Err(Error::NoConcentration { .. })
        ));
    }

    #[test]
    fn exact_bubble_extraction() {
        let n = 513;
        let rho = 0.03;
        let u = bubble(n, [0.5, 0.5], rho);
        let v = ScalarField::from_fn(u.grid(), |x, _| 0.2 * x);
        let t = TargetManifold::sphere2();
        let b = extract_bubble(&u, &v, &t, [0.5, 0.5], rho, 0.0, 8.0, 129).unwrap();
        // closed-form profile on the window
        let mut worst: f64 = 0.0;
        let win = b.u_tilde.grid();
        for a in 0..129 {
            for c in 0..129 {
                let [sx, sy] = win.point(a, c);
                let exact = bubble_map([0.0, 0.0], 1.0, 16.0 * sx - 8.0, 16.0 * sy - 8.0);
                let got = b.u_tilde.node_value(win.node(a, c));
                for m in 0..3 {
                    worst = worst.max((got[m] - exact[m]).abs());
                }
            }
        }
        assert!(worst <= 0.02, "max profile error {worst}");
        let four_pi = 4.0 * PI;
        // a degree-one sphere captured on the window carries 4π·64/65 of its energy
        assert!((b.stats.e_bubble - four_pi).abs() <= 0.05 * four_pi, "{}", b.stats.e_bubble);
        let rel = (b.stats.e_bubble - b.stats.source_window_energy).abs() / b.stats.source_window_energy;
        assert!(rel <= 0.03, "{rel}");
        let verdict = verify_bubble(&b, 1.0, 0.1, true);
        assert!(verdict.passed(), "{:?}", verdict.failed);
        assert!(b.stats.grad_v_norm <= 0.05 * b.stats.grad_v_reference);
    }

    #[test]
    fn constant_field_fails_energy_check() {
        let g = Grid::new(65).unwrap();
        let u = MapField::constant(g, &[0.0, 0.0, 1.0]);
        let v = ScalarField::zeros(g);
        let b = extract_bubble(&u, &v, &TargetManifold::sphere2(), [0.5, 0.5], 0.1, 0.0, 8.0, 33).unwrap();
        assert_eq!(b.stats.e_bubble, 0.0);
        assert!(!verify_bubble(&b, 1.0, 0.1, false).energy_ok);
    }

    #[test]
    fn extraction_refuses_sub_lattice_radius() {
        let g = Grid::new(65).unwrap();
        let u = MapField::constant(g, &[0.0, 0.0, 1.0]);
        let v = ScalarField::zeros(g);
        let r = extract_bubble(&u, &v, &TargetManifold::sphere2(), [0.5, 0.5], 0.01, 0.0, 8.0, 33);
        assert!(matches!(r, Err(Error::UnderResolved { .. })));
    }
}
