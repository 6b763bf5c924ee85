use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lorflow_core::diagnostics::{
    extract_bubble, select_at, select_blowup, verify_bubble, Selection, DEFAULT_R_CAP, DEFAULT_WINDOW,
    DEFAULT_WINDOW_NODES,
};
use lorflow_core::flow::{FlowMode, Snapshot};
use lorflow_core::grid::{Grid, NodeField, ScalarField};
use lorflow_core::harness::{self, RunConfig, RunReport};
use lorflow_core::io::{bubble_to_csv, write_text, FieldFile};
use lorflow_core::scenario::{preset, Scenario};
use lorflow_core::target::TargetManifold;

#[derive(Parser)]
#[command(name = "lorflow", version, about = "Harmonic map heat flow into Lorentzian warped products")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Flow,
    Descent,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a JSON config (`{"preset": ..}` or `{"scenario": ..}`, plus `"flow"` overrides).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Run a built-in scenario.
    Preset {
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Run every preset and write `summary.json`.
    Accept {
        #[arg(long)]
        out: PathBuf,
    },
    /// Select a blow-up point in snapshot files and extract the rescaled bubble.
    Bubble {
        /// `u` snapshot files; a sibling `*_v.csv` is used for `v` when present.
        #[arg(long, required = true, num_args = 1..)]
        snapshot: Vec<PathBuf>,
        #[arg(long)]
        epsilon1: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        half_width: f64,
        #[arg(long, default_value_t = DEFAULT_WINDOW_NODES)]
        window_nodes: usize,
        #[arg(long, default_value_t = DEFAULT_R_CAP)]
        r_cap: f64,
        #[arg(long, default_value_t = 0.1)]
        tension_rel_tol: f64,
        /// Also require a single degree-one sphere bubble energy.
        #[arg(long)]
        single_sphere: bool,
    },
}

fn with_mode(mut s: Scenario, mode: Option<Mode>) -> Result<Scenario> {
    if let Some(m) = mode {
        s.flow.mode = match m {
            Mode::Flow => FlowMode::Flow,
            Mode::Descent => FlowMode::Descent,
        };
        s.flow.validate()?;
    }
    Ok(s)
}

fn report_line(r: &RunReport) {
    let failed = r.failed_checks();
    println!(
        "{}: {} after {} steps (t = {}), {}",
        r.scenario,
        r.termination.as_str(),
        r.steps,
        r.t_final,
        if failed.is_empty() { "all checks passed".to_string() } else { format!("FAILED {}", failed.join(", ")) }
    );
}

fn run(s: &Scenario, out: &Path) -> Result<bool> {
    let report = harness::run_scenario(s, out)?;
    report_line(&report);
    Ok(report.passed)
}

fn load_snapshot(path: &Path) -> Result<Snapshot> {
    let file = FieldFile::read(path).with_context(|| format!("reading {}", path.display()))?;
    let t = file.header_f64("t").unwrap_or(0.0);
    let u = file.into_map()?;
    let v_path = path
        .to_str()
        .and_then(|p| p.strip_suffix("_u.csv"))
        .map(|stem| PathBuf::from(format!("{stem}_v.csv")))
        .filter(|p| p.exists());
    let v = match v_path {
        Some(p) => FieldFile::read(&p)?.into_scalar()?,
        None => ScalarField::zeros(u.grid()),
    };
    if v.grid() != u.grid() {
        bail!("{}: v snapshot grid differs from u", path.display());
    }
    Ok(Snapshot { step: 0, t, u, v })
}

#[allow(clippy::too_many_arguments)]
fn bubble(
    paths: &[PathBuf],
    epsilon1: f64,
    out: &Path,
    half_width: f64,
    window_nodes: usize,
    r_cap: f64,
    tension_rel_tol: f64,
    single_sphere: bool,
) -> Result<bool> {
    let mut history = paths.iter().map(|p| load_snapshot(p)).collect::<Result<Vec<_>>>()?;
    history.sort_by(|a, b| a.t.total_cmp(&b.t));
    let target = match history[0].u.ncomp() {
        3 => TargetManifold::sphere2(),
        4 => TargetManifold::CliffordTorus,
        k => bail!("no target with ambient dimension {k}"),
    };
    let sel = if history.len() >= 2 {
        select_blowup(&history, epsilon1, r_cap)?
    } else {
        let (x_i, r_i, e_ball) = select_at(&history[0].u, 0.5 * epsilon1, r_cap)?;
        Selection {
            x_i,
            r_i,
            t_i: history[0].t,
            snapshot: 0,
            e_ball,
            boundary_ratio: Grid::dist_to_boundary(x_i) / r_i,
        }
    };
    let snap = &history[sel.snapshot];
    let ex = extract_bubble(&snap.u, &snap.v, &target, sel.x_i, sel.r_i, sel.t_i, half_width, window_nodes)?;
    let verdict = verify_bubble(&ex, epsilon1, tension_rel_tol, single_sphere);
    write_text(&out.join("bubble_u.csv"), &bubble_to_csv(&ex.u_tilde, sel.x_i, sel.r_i, sel.t_i))?;
    write_text(&out.join("bubble_v.csv"), &bubble_to_csv(&ex.v_tilde, sel.x_i, sel.r_i, sel.t_i))?;
    let json = serde_json::json!({ "selection": sel, "stats": ex.stats, "verdict": verdict });
    write_text(&out.join("bubble.json"), &serde_json::to_string_pretty(&json)?)?;
    println!(
        "bubble at {:?}, r_i = {}, t_i = {}: E = {}, tension = {}, {}",
        sel.x_i,
        sel.r_i,
        sel.t_i,
        ex.stats.e_bubble,
        ex.stats.tension_norm,
        if verdict.passed() { "passed".to_string() } else { format!("FAILED {}", verdict.failed.join("; ")) }
    );
    Ok(verdict.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, mode } => std::fs::read_to_string(&config)
            .with_context(|| format!("reading {}", config.display()))
            .and_then(|text| Ok(RunConfig::parse(&text)?.scenario()?))
            .and_then(|s| with_mode(s, mode))
            .and_then(|s| run(&s, &out)),
        Command::Preset { name, out, mode } => preset(&name)
            .map_err(Into::into)
            .and_then(|s| with_mode(s, mode))
            .and_then(|s| run(&s, &out)),
        Command::Accept { out } => harness::acceptance(&out).map_err(Into::into).map(|(summary, reports)| {
            reports.iter().for_each(report_line);
            println!("acceptance {} in {:.1} s", if summary.passed { "passed" } else { "FAILED" }, summary.wall_time_s);
            summary.passed
        }),
        Command::Bubble {
            snapshot,
            epsilon1,
            out,
            half_width,
            window_nodes,
            r_cap,
            tension_rel_tol,
            single_sphere,
        } => bubble(&snapshot, epsilon1, &out, half_width, window_nodes, r_cap, tension_rel_tol, single_sphere),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
