use std::sync::OnceLock;

use lorflow_core::diagnostics::select_at;
use lorflow_core::elliptic::EllipticConfig;
use lorflow_core::flow::{flow_step, reduced_energy, FlowConfig, FlowProblem, FlowState};
use lorflow_core::grid::{dirichlet_energy, laplacian_map, Grid, MapField, ScalarField};
use lorflow_core::scenario::bubble_map;
use lorflow_core::target::{TargetManifold, WarpFunction, WarpKind};
use proptest::prelude::*;

fn sphere_problem(n: usize, warp: WarpKind) -> FlowProblem {
    let s2 = TargetManifold::sphere2();
    let g = Grid::new(n).unwrap();
    let phi = MapField::from_fn(g, 3, |x, y, out| {
        let p = s2.project(&[x - 0.5, 0.4 * y, 1.0]).unwrap();
        out.copy_from_slice(&p);
    });
    let psi = ScalarField::from_fn(g, |x, y| (3.0 * x).sin() + y * y);
    let warp = WarpFunction::new(warp, &s2).unwrap();
    let elliptic = EllipticConfig { tol: 1e-12, ..EllipticConfig::default() };
    FlowProblem::new(s2, warp, phi, psi, elliptic).unwrap()
}

fn lower_bound_problem() -> &'static FlowProblem {
    static P: OnceLock<FlowProblem> = OnceLock::new();
    P.get_or_init(|| sphere_problem(17, WarpKind::AffineHeight { a: 2.0, b: 1.0, axis: 3 }))
}

/// Interior nodes replaced by projected ambient samples, boundary kept.
fn perturbed(problem: &FlowProblem, samples: &[f64], amp: f64) -> MapField {
    let g = problem.grid();
    let mut u = problem.phi.clone();
    for i in 1..g.n() - 1 {
        for j in 1..g.n() - 1 {
            let node = g.node(i, j);
            let y: Vec<f64> = (0..3).map(|c| u.node_value(node)[c] + amp * samples[3 * node + c]).collect();
            if let Ok(p) = problem.target.project(&y) {
                u.node_value_mut(node).copy_from_slice(&p);
            }
        }
    }
    u
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reduced_energy_bounded_below_by_extension_energy(
        samples in prop::collection::vec(-1.0f64..1.0, 17 * 17 * 3),
        amp in 0.0f64..3.0,
    ) {
        let p = lower_bound_problem();
        let u = perturbed(p, &samples, amp);
        let (eps, _, _) = reduced_energy(&u, p, None).unwrap();
        let bound = -p.warp.big_lambda() * dirichlet_energy(&p.psi_ext);
        prop_assert!(eps >= bound, "eps = {eps}, bound = {bound}");
    }
}

/// Radial oracle: a degree-one bubble of scale ρ holds `4π r²/(r² + ρ²)` in `B_r`.
#[test]
fn selected_radius_scales_with_bubble_size() {
    let g = Grid::new(513).unwrap();
    let level = std::f64::consts::PI;
    let mut radii = Vec::new();
    for rho in [0.04, 0.02, 0.01] {
        let u = MapField::from_fn(g, 3, |x, y, out| out.copy_from_slice(&bubble_map([0.5, 0.5], rho, x, y)));
        let (x, r, _) = select_at(&u, level, 0.25).unwrap();
        assert!((x[0] - 0.5).abs() <= g.h() && (x[1] - 0.5).abs() <= g.h());
        assert!(r >= 2.0 * g.h());
        let oracle = rho / 3f64.sqrt();
        assert!((r / oracle - 1.0).abs() < 0.1, "rho {rho}: r_i = {r}, oracle {oracle}");
        radii.push(r);
    }
    for w in radii.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
    }
}

#[test]
fn constant_warp_flow_is_the_plain_harmonic_map_flow() {
    let p = sphere_problem(33, WarpKind::Constant { c: 1.7 });
    let samples: Vec<f64> = (0..33 * 33 * 3).map(|k| ((k * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    let u0 = perturbed(&p, &samples, 0.3);
    let cfg = FlowConfig { n: 33, ..FlowConfig::default() };
    let tau = cfg.tau();
    let g = p.grid();
    let mut state = FlowState::initial(&p, u0.clone()).unwrap();
    let mut reference = u0;
    for _ in 0..200 {
        state = flow_step(&state, &cfg, &p).unwrap();
        let lap = laplacian_map(&reference);
        let mut next = reference.clone();
        for i in 1..g.n() - 1 {
            for j in 1..g.n() - 1 {
                let node = g.node(i, j);
                let y: Vec<f64> = (0..3)
                    .map(|c| reference.node_value(node)[c] + tau * lap.node_value(node)[c])
                    .collect();
                next.node_value_mut(node).copy_from_slice(&p.target.project(&y).unwrap());
            }
        }
        reference = next;
        assert!(state.u.sup_distance(&reference) <= 1e-12, "step {}", state.step_index);
        assert_eq!(state.v, p.psi_ext);
    }
}
