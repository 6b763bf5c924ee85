//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line.

use std::io::Write;
use std::path::Path;

use lorflow_core::diagnostics::{extract_bubble, verify_bubble};
use lorflow_core::elliptic::{EllipticOperator, FaceAverage};
use lorflow_core::flow::{self, FlowMode, Termination};
use lorflow_core::grid::{node_inner, Grid, MapField, NodeField, ScalarField};
use lorflow_core::harness::{self, RunReport};
use lorflow_core::scenario::{bubble_map, preset, InitialSpec};
use lorflow_core::target::TargetManifold;
use lorflow_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: usize,
    title: &'static str,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn new(id: usize, title: &'static str) -> Self {
        Self { id, title, failures: Vec::new(), notes: Vec::new() }
    }

    fn require(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Printed straight to stdout so the line survives output capture.
    fn print(&self) {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let body = if self.passed() { self.notes.join("; ") } else { self.failures.join("; ") };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "criterion {:>2} {status} {}: {body}", self.id, self.title);
    }
}

fn all_runs(reports: &[RunReport]) -> Vec<&RunReport> {
    let mut runs = Vec::new();
    for r in reports {
        runs.push(r);
        if let Some(p) = &r.cross_run {
            runs.push(p.as_ref());
        }
    }
    runs
}

fn find<'a>(reports: &'a [RunReport], name: &str) -> &'a RunReport {
    reports.iter().find(|r| r.scenario == name).unwrap_or_else(|| panic!("no report for {name}"))
}

fn check_passes(v: &mut Verdict, r: &RunReport, name: &str) {
    match r.check(name) {
        Some(c) => v.require(
            c.passed,
            format!("{}: {name} measured {:e} limit {:e}", r.scenario, c.measured, c.limit),
        ),
        None => v.require(false, format!("{}: {name} missing from report", r.scenario)),
    }
}

fn unit_operator(n: usize) -> EllipticOperator {
    let g = Grid::new(n).unwrap();
    EllipticOperator::new(g, &vec![1.0; g.num_nodes()], FaceAverage::Arithmetic)
}

fn solve_unit(n: usize, f: impl Fn(f64, f64) -> f64) -> (ScalarField, ScalarField) {
    let op = unit_operator(n);
    let exact = ScalarField::from_fn(op.grid(), f);
    let (v, _) = op.solve(&exact, None, 1e-13, 50 * n).unwrap();
    (v, exact)
}

fn max_err(a: &ScalarField, b: &ScalarField) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn elliptic_correctness() -> Verdict {
    let mut v = Verdict::new(4, "elliptic correctness");
    for (label, f) in [
        ("psi = x", (|x: f64, _y: f64| x) as fn(f64, f64) -> f64),
        ("psi = x^2 - y^2", |x: f64, y: f64| x * x - y * y),
    ] {
        let (sol, exact) = solve_unit(129, f);
        let e = max_err(&sol, &exact);
        v.require(e <= 1e-9, format!("{label} error {e:e}"));
    }
    let pi = std::f64::consts::PI;
    let harmonic = move |x: f64, y: f64| (pi * x).sin() * (pi * y).sinh() / pi.sinh();
    let (a, ea) = solve_unit(65, harmonic);
    let (b, eb) = solve_unit(129, harmonic);
    let ratio = max_err(&a, &ea) / max_err(&b, &eb);
    v.require((4.0 * 0.85..=4.0 * 1.15).contains(&ratio), format!("error ratio 65 -> 129 = {ratio:.4}"));
    v
}

/// Central differences of the reduced energy along projected tangent
/// directions against the implemented gradient.
fn envelope_ratios() -> Vec<f64> {
    let mut s = preset("blowup_bubble").unwrap();
    s.flow.n = 33;
    s.flow.elliptic.tol = 1e-13;
    s.u0 = InitialSpec::GluedBubble { center: [0.45, 0.55], rho: 0.15, r_inner: 0.3, r_outer: 0.45 };
    let (problem, u) = s.build().unwrap();
    let g = u.grid();
    let (_, v, _) = flow::reduced_energy(&u, &problem, None).unwrap();
    let grad = flow::reduced_gradient(&u, &v, &problem);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ratios = Vec::new();
    for _ in 0..10 {
        let modes: Vec<(f64, f64, [f64; 3])> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(1..4) as f64,
                    rng.gen_range(1..4) as f64,
                    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                )
            })
            .collect();
        let mut eta = MapField::from_fn(g, 3, |x, y, out| {
            out.fill(0.0);
            for (p, q, c) in &modes {
                let w = (p * std::f64::consts::PI * x).sin() * (q * std::f64::consts::PI * y).sin();
                for m in 0..3 {
                    out[m] += w * c[m];
                }
            }
        });
        for node in 0..g.num_nodes() {
            let t = problem.target.tangent_project(u.at(node), eta.node_value(node)).unwrap();
            eta.node_value_mut(node).copy_from_slice(&t);
        }
        let norm = node_inner(eta.values(), eta.values(), g).sqrt();
        eta.values_mut().iter_mut().for_each(|x| *x /= norm);
        let slope = node_inner(grad.values(), eta.values(), g);
        let energy_at = |s: f64| {
            let mut w = u.clone();
            for node in 0..g.num_nodes() {
                let y: Vec<f64> = u.at(node).iter().zip(eta.node_value(node)).map(|(a, b)| a + s * b).collect();
                w.node_value_mut(node).copy_from_slice(&problem.target.project(&y).unwrap());
            }
            flow::reduced_energy(&w, &problem, Some(&v)).unwrap().0
        };
        let err = |s: f64| ((energy_at(s) - energy_at(-s)) / (2.0 * s) - slope).abs();
        ratios.push(err(1e-2) / err(1e-3));
    }
    ratios
}

fn synthetic_bubble_energy() -> (f64, f64) {
    // radial quadrature of |grad u|^2 = 8 rho^2 / (rho^2 + r^2)^2 with rho = 1,
    // substituting r = t / (1 - t) on [0, 1)
    let steps = 200_000;
    let mut oracle = 0.0;
    for k in 0..steps {
        let t = (k as f64 + 0.5) / steps as f64;
        let r = t / (1.0 - t);
        let dr = 1.0 / ((1.0 - t) * (1.0 - t));
        oracle += 0.5 * 8.0 / ((1.0 + r * r) * (1.0 + r * r)) * 2.0 * std::f64::consts::PI * r * dr / steps as f64;
    }
    let n = 513;
    let rho = 0.03;
    let g = Grid::new(n).unwrap();
    let u = MapField::from_fn(g, 3, |x, y, out| out.copy_from_slice(&bubble_map([0.5, 0.5], rho, x, y)));
    let v = ScalarField::zeros(g);
    let b = extract_bubble(&u, &v, &TargetManifold::sphere2(), [0.5, 0.5], rho, 0.0, 8.0, 129).unwrap();
    assert!(verify_bubble(&b, 1.0, 0.1, true).passed());
    (b.stats.e_bubble, oracle)
}

fn ledger_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for scenario in std::fs::read_dir(dir).unwrap() {
        let scenario = scenario.unwrap().path();
        if !scenario.is_dir() {
            continue;
        }
        for f in std::fs::read_dir(&scenario).unwrap() {
            let p = f.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            if name.ends_with("ledger.csv") {
                let key = format!("{}/{name}", scenario.file_name().unwrap().to_string_lossy());
                out.push((key, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = Vec::new();
    let mut report = |v: Verdict| {
        v.print();
        verdicts.push(v);
    };

    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let (summary, reports) = harness::acceptance(first.path()).unwrap();
    let runs = all_runs(&reports);

    let mut v = Verdict::new(1, "dissipation");
    for r in &runs {
        check_passes(&mut v, r, "dissipation_monotone");
        if r.mode == FlowMode::Flow {
            v.require(r.config.flow.tau_factor == 0.2, format!("{}: tau_factor 0.2", r.scenario));
            check_passes(&mut v, r, "dissipation_identity");
        } else {
            // descent runs are held to strict decrease instead
            check_passes(&mut v, r, "descent_strict_decrease");
        }
    }
    report(v);

    let mut v = Verdict::new(2, "energy bounds");
    for r in &runs {
        check_passes(&mut v, r, "energy_bound_u");
        check_passes(&mut v, r, "energy_bound_v");
        check_passes(&mut v, r, "minimization_property");
    }
    report(v);

    let mut v = Verdict::new(3, "cumulative dissipation");
    for r in runs.iter().filter(|r| r.mode == FlowMode::Flow) {
        check_passes(&mut v, r, "cumulative_dissipation");
    }
    report(v);

    report(elliptic_correctness());

    let mut v = Verdict::new(5, "gradient and envelope");
    for (k, ratio) in envelope_ratios().into_iter().enumerate() {
        v.require((50.0..=200.0).contains(&ratio), format!("probe {k}: ratio {ratio:.2}"));
    }
    let descent: Vec<&&RunReport> = runs.iter().filter(|r| r.mode == FlowMode::Descent).collect();
    v.require(!descent.is_empty(), "a descent run is part of the suite");
    for r in descent {
        check_passes(&mut v, r, "descent_strict_decrease");
        v.require(r.steps > 0, format!("{}: {} accepted steps", r.scenario, r.steps));
    }
    report(v);

    let mut v = Verdict::new(6, "small-energy global run");
    let r = find(&reports, "small_energy");
    v.require(
        r.termination == Termination::Converged && r.t_final <= 2.0,
        format!("{} at t = {}", r.termination.as_str(), r.t_final),
    );
    for c in ["final_energy", "final_point", "no_concentration"] {
        check_passes(&mut v, r, c);
    }
    report(v);

    let mut v = Verdict::new(7, "non-positive-curvature run");
    let r = find(&reports, "npc_torus");
    v.require(
        r.termination == Termination::Converged && r.t_final <= 5.0,
        format!("{} at t = {}", r.termination.as_str(), r.t_final),
    );
    for c in ["tension_residual", "winding_number", "monitor_energy", "no_concentration"] {
        check_passes(&mut v, r, c);
    }
    report(v);

    let mut v = Verdict::new(8, "blow-up detection and bubble extraction");
    let r = find(&reports, "blowup_bubble");
    v.require(r.termination == Termination::ConcentrationDetected, r.termination.as_str());
    for c in ["max_grad_growth", "blowup_interior", "bubble_energy", "bubble_tension", "bubble_grad_v"] {
        check_passes(&mut v, r, c);
    }
    let (e, oracle) = synthetic_bubble_energy();
    v.require((oracle - 4.0 * std::f64::consts::PI).abs() < 1e-6, format!("quadrature oracle {oracle:.6}"));
    v.require((e - oracle).abs() <= 0.05 * oracle, format!("synthetic E_bubble {e:.4}"));
    report(v);

    let mut v = Verdict::new(9, "constraint preservation");
    for r in &runs {
        check_passes(&mut v, r, "constraint_preservation");
    }
    report(v);

    let mut v = Verdict::new(10, "determinism");
    let (summary2, _) = harness::acceptance(second.path()).unwrap();
    let (a, b) = (ledger_files(first.path()), ledger_files(second.path()));
    v.require(a.len() == runs.len(), format!("{} ledger files", a.len()));
    v.require(
        a.iter().map(|x| &x.0).eq(b.iter().map(|x| &x.0)),
        "both executions wrote the same ledger files",
    );
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        v.require(x == y, format!("{name} bit-identical"));
    }
    report(v);

    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "suite: {} on {} thread(s), {:.1} s and {:.1} s",
        if summary.passed && summary2.passed { "all scenario checks passed" } else { "scenario checks FAILED" },
        summary.threads,
        summary.wall_time_s,
        summary2.wall_time_s
    );
    for r in &runs {
        let failed = r.failed_checks();
        if !failed.is_empty() {
            let _ = writeln!(out, "  {} failed: {}", r.scenario, failed.join(", "));
        }
        assert!(r.invariant_coverage_errors().is_empty(), "{}", r.scenario);
    }
    drop(out);
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed()).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(summary.passed && summary2.passed);
}

#[test]
fn out_of_contract_time_step_is_rejected_before_stepping() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = preset("small_energy").unwrap();
    s.flow.tau_factor = 0.3;
    let err = harness::run_scenario(&s, dir.path()).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
    assert!(!dir.path().join("ledger.csv").exists());
}
