//! Command implementations and the process exit-code contract.
//!
//! Exit codes: 0 success, 2 structural-assumption or configuration failure,
//! 3 validation failure (the artifacts or the estimate did not hold up),
//! 4 numerical failure inside the pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lockin::domain::trivial_estimate;
use lockin::model::{check_oscillatory, spectral_abscissa};
use lockin::sim::{
    lyapunov_audit, monte_carlo_validate, sample_inside, simulate, FullState, SimOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts;
use crate::config::{Overrides, RunConfig};
use crate::pipeline::{build_model, exit_code_for, run_pipeline, Pipeline};

/// Lock-in domain estimation for a phase-locked loop driven through a
/// linear disturbance block.
#[derive(Debug, Parser)]
#[command(name = "lockin", version, about)]
pub struct Cli {
    /// Path to a TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory for artifacts (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// RNG seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Parameter preset: version-I or version-II (overrides the config).
    #[arg(long, global = true)]
    pub preset: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the structural assumptions of the configured model.
    Check,
    /// Run the full estimation pipeline and write its artifacts.
    Estimate,
    /// Re-derive the estimate and stress it with seeded simulations.
    Validate {
        /// Also write each audit trajectory as CSV into the output directory.
        #[arg(long)]
        dump: bool,
    },
    /// Integrate one closed-loop trajectory from an explicit initial state.
    Simulate {
        /// Initial state as six comma-separated numbers:
        /// dtheta,domega,x1,x2,x3,x4.
        #[arg(long)]
        state: String,
        /// Write the trajectory as CSV into the output directory.
        #[arg(long)]
        dump: bool,
    },
    /// Run the pipeline and export extended per-orbit and model reports.
    Export,
}

/// Run a parsed command line to completion and return the exit code.
pub fn run(cli: Cli) -> i32 {
    let overrides = Overrides {
        preset: cli.preset.clone(),
        out: cli.out.clone(),
        seed: cli.seed,
    };
    let result = RunConfig::resolve(cli.config.as_deref(), &overrides).and_then(|cfg| {
        match cli.command {
            Command::Check => cmd_check(&cfg),
            Command::Estimate => cmd_estimate(&cfg),
            Command::Validate { dump } => cmd_validate(&cfg, dump),
            Command::Simulate { state, dump } => cmd_simulate(&cfg, &state, dump),
            Command::Export => cmd_export(&cfg),
        }
    });
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    }
}

fn push_eigenvalues(out: &mut String, label: &str, eigs: &[(f64, f64)]) {
    use std::fmt::Write as _;
    let _ = writeln!(out, "{label}:");
    for (re, im) in eigs {
        let _ = writeln!(out, "  {re:+.6e} {im:+.6e}i");
    }
}

/// Structural gate: the block matrix must be Hurwitz and the locked state
/// of the loop must be an oscillatory focus. Returns the printable report
/// and the first failed assumption, if any.
fn check_assumptions(cfg: &RunConfig) -> Result<(String, Option<String>)> {
    use std::fmt::Write as _;
    let mut out = String::new();
    let model = match build_model(&cfg.model) {
        Ok(m) => m,
        Err(e) => return Ok((out, Some(e.to_string()))),
    };

    let a_eigs: Vec<(f64, f64)> = model
        .a_matrix()
        .complex_eigenvalues()
        .iter()
        .map(|l| (l.re, l.im))
        .collect();
    push_eigenvalues(&mut out, "block matrix eigenvalues", &a_eigs);
    let abscissa = spectral_abscissa(model.a_matrix());
    let hurwitz = abscissa < 0.0;
    let _ = writeln!(
        out,
        "block matrix Hurwitz: {} (spectral abscissa {abscissa:+.6e})",
        if hurwitz { "yes" } else { "NO" }
    );

    let report = check_oscillatory(model.as_ref()).context("linearizing the locked state")?;
    let pll_eigs: Vec<(f64, f64)> = report
        .eigenvalues
        .iter()
        .map(|l| (l.re, l.im))
        .collect();
    push_eigenvalues(&mut out, "loop Jacobian eigenvalues", &pll_eigs);
    let _ = writeln!(
        out,
        "locked state oscillatory and stable: {}",
        if report.pass { "yes" } else { "NO" }
    );

    let failure = if !hurwitz {
        Some("block matrix not Hurwitz".to_string())
    } else if !report.pass {
        Some("locked state non-oscillatory (needs a stable complex pair)".to_string())
    } else {
        None
    };
    Ok((out, failure))
}

fn cmd_check(cfg: &RunConfig) -> Result<i32> {
    let (report, failure) = check_assumptions(cfg)?;
    print!("{report}");
    match failure {
        Some(reason) => {
            println!("assumption check: FAIL — {reason}");
            Ok(2)
        }
        None => {
            println!("assumption check: PASS");
            Ok(0)
        }
    }
}

fn write_estimate_artifacts(cfg: &RunConfig, pipeline: &Pipeline) -> Result<()> {
    let dir = &cfg.out_dir;
    artifacts::write_text(dir, "family.csv", &artifacts::family_csv(&pipeline.family))?;
    artifacts::write_text(dir, "growth.csv", &artifacts::growth_csv(&pipeline.table))?;
    artifacts::write_text(dir, "domain.csv", &artifacts::domain_csv(&pipeline.estimate))?;
    artifacts::write_text(
        dir,
        "summary.json",
        &artifacts::summary_json(&pipeline.estimate, pipeline.gauge.gamma(), &cfg.version),
    )?;
    Ok(())
}

fn print_estimate_summary(cfg: &RunConfig, pipeline: &Pipeline) {
    println!("preset: {}", cfg.version);
    println!("decay rate gamma: {:.6e}", pipeline.gauge.gamma());
    println!("family members: {}", pipeline.family.cycles.len());
    println!("V_bar: {:.6e}", pipeline.estimate.v_bar);
    println!("V_bar_bar: {:.6e}", pipeline.estimate.v_bar_bar);
    if pipeline.degenerate {
        println!("note: growth never favored the loop; the estimate is the trivial square");
    }
}

fn cmd_estimate(cfg: &RunConfig) -> Result<i32> {
    let pipeline = run_pipeline(cfg)?;
    write_estimate_artifacts(cfg, &pipeline)?;
    print_estimate_summary(cfg, &pipeline);
    println!(
        "wrote family.csv, growth.csv, domain.csv, summary.json to {}",
        cfg.out_dir.display()
    );
    Ok(0)
}

fn cmd_validate(cfg: &RunConfig, dump: bool) -> Result<i32> {
    let summary_path = cfg.out_dir.join("summary.json");
    if !summary_path.exists() {
        eprintln!(
            "no summary.json in {}: run the estimate command first",
            cfg.out_dir.display()
        );
        return Ok(2);
    }
    let stored = artifacts::load_summary(&summary_path)?;
    let pipeline = run_pipeline(cfg)?;

    let mut failed = false;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    let checks = [
        ("V_bar", stored.v_bar, pipeline.estimate.v_bar),
        ("V_bar_bar", stored.v_bar_bar, pipeline.estimate.v_bar_bar),
        ("gamma", stored.gamma, pipeline.gauge.gamma()),
    ];
    for (name, old, new) in checks {
        if rel(old, new) > 1e-9 {
            println!("artifact mismatch: {name} stored {old:.16e}, recomputed {new:.16e}");
            failed = true;
        }
    }
    if stored.version != cfg.version {
        println!(
            "artifact mismatch: version stored '{}', configured '{}'",
            stored.version, cfg.version
        );
        failed = true;
    }
    if failed {
        println!("validation: FAIL (artifacts do not match the configuration)");
        return Ok(3);
    }

    let model = pipeline.model.as_ref();
    let v_bar = pipeline.estimate.v_bar;
    let mut opts = SimOptions::defaults_for(model, &pipeline.gauge, v_bar)?;
    if let Some(h) = cfg.horizon {
        opts.horizon = h;
    }

    let report = monte_carlo_validate(
        &pipeline.estimate,
        &pipeline.family,
        &pipeline.gauge,
        model,
        cfg.sim_n,
        cfg.seed,
        &opts,
    )?;
    println!(
        "monte carlo: n = {}, converged = {}, slipped = {}, inconclusive = {}",
        report.n, report.n_converged, report.n_slipped, report.n_inconclusive
    );
    println!("worst slip margin: {:.6e} rad", report.worst_margin);
    if report.n_slipped > 0 {
        failed = true;
    }

    // Proof-function audit inside the trivial square: the running maximum
    // of the two levels must never increase beyond interpolation slack.
    let square = trivial_estimate(v_bar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut audited = 0usize;
    let mut violations = 0usize;
    let mut worst_jump = f64::NEG_INFINITY;
    for k in 0..cfg.audit_n {
        let y0 = sample_inside(&square, &pipeline.family, &pipeline.gauge, &mut rng)?;
        let (outcome, traj) = simulate(model, &pipeline.gauge, &y0, &opts, true)?;
        let traj = traj.expect("recording was requested");
        if outcome.slipped {
            println!("audit trajectory {k} slipped");
            failed = true;
        }
        let audit = lyapunov_audit(&traj, &pipeline.family, &pipeline.gauge, 0.02, 1e-9 * v_bar);
        audited += audit.checked;
        violations += audit.violations;
        worst_jump = worst_jump.max(audit.worst_jump);
        if dump {
            artifacts::write_text(
                &cfg.out_dir,
                &format!("audit_trajectory_{k:03}.csv"),
                &artifacts::trajectory_csv(&traj),
            )?;
        }
    }
    if cfg.audit_n > 0 {
        println!(
            "proof-function audit: {audited} sample pairs, {violations} increases, worst jump {worst_jump:.6e}"
        );
        if violations > 0 {
            failed = true;
        }
    }

    if failed {
        println!("validation: FAIL");
        Ok(3)
    } else {
        println!("validation: PASS");
        Ok(0)
    }
}

fn parse_state(text: &str) -> Result<FullState> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("parsing '{s}'")))
        .collect::<Result<_>>()?;
    if parts.len() != 6 {
        bail!(
            "--state needs exactly six comma-separated numbers (dtheta,domega,x1,x2,x3,x4), got {}",
            parts.len()
        );
    }
    Ok(FullState::from_column_slice(&parts))
}

fn cmd_simulate(cfg: &RunConfig, state: &str, dump: bool) -> Result<i32> {
    let y0 = parse_state(state)?;
    let model = build_model(&cfg.model)?;
    let gauge = lockin::gauge::build_gauge(model.a_matrix(), cfg.gauge_margin)?;

    // The convergence ball scales with the certified frontier when a
    // summary exists; otherwise fall back to the initial block level.
    let summary_path = cfg.out_dir.join("summary.json");
    let v_ref = if summary_path.exists() {
        artifacts::load_summary(&summary_path)?.v_bar
    } else {
        gauge.v_cc(&lockin::sim::block_part(&y0)).max(1.0)
    };
    let mut opts = SimOptions::defaults_for(model.as_ref(), &gauge, v_ref)?;
    if let Some(h) = cfg.horizon {
        opts.horizon = h;
    }

    let (outcome, traj) = simulate(model.as_ref(), &gauge, &y0, &opts, dump)?;
    let verdict = if outcome.slipped {
        "slipped"
    } else if outcome.converged {
        "converged"
    } else {
        "inconclusive (horizon reached)"
    };
    println!("outcome: {verdict}");
    println!("decided at t = {:.6e} s", outcome.t_final);
    println!(
        "phase excursion: [{:.6e}, {:.6e}] rad",
        outcome.min_dtheta, outcome.max_dtheta
    );
    if dump {
        let traj = traj.expect("recording was requested");
        artifacts::write_text(&cfg.out_dir, "trajectory.csv", &artifacts::trajectory_csv(&traj))?;
        println!(
            "wrote trajectory.csv ({} points) to {}",
            traj.t.len(),
            cfg.out_dir.display()
        );
    }
    Ok(0)
}

/// JSON model report with a fixed key order for bit-exact regeneration.
fn model_json(cfg: &RunConfig, pipeline: &Pipeline) -> String {
    use std::fmt::Write as _;
    let model = pipeline.model.as_ref();
    let f = artifacts::fmt_f64;
    let mut out = String::from("{\n");
    let _ = writeln!(out, "  \"version\": \"{}\",", cfg.version);
    let _ = writeln!(out, "  \"gamma\": {},", f(pipeline.gauge.gamma()));
    let _ = writeln!(
        out,
        "  \"spectral_abscissa\": {},",
        f(spectral_abscissa(model.a_matrix()))
    );
    let eigs: Vec<String> = model
        .a_matrix()
        .complex_eigenvalues()
        .iter()
        .map(|l| format!("[{}, {}]", f(l.re), f(l.im)))
        .collect();
    let _ = writeln!(out, "  \"block_eigenvalues\": [{}],", eigs.join(", "));
    let report = check_oscillatory(model).expect("checked earlier in the pipeline");
    let eigs: Vec<String> = report
        .eigenvalues
        .iter()
        .map(|l| format!("[{}, {}]", f(l.re), f(l.im)))
        .collect();
    let _ = writeln!(out, "  \"loop_eigenvalues\": [{}],", eigs.join(", "));
    let _ = writeln!(out, "  \"mu\": {},", f(model.mu()));
    let _ = writeln!(out, "  \"members\": {},", pipeline.family.cycles.len());
    let _ = writeln!(
        out,
        "  \"frontier_amplitude\": {},",
        f(pipeline.family.frontier().amplitude)
    );
    let _ = writeln!(out, "  \"V_bar\": {},", f(pipeline.estimate.v_bar));
    let _ = writeln!(out, "  \"V_bar_bar\": {}", f(pipeline.estimate.v_bar_bar));
    out.push_str("}\n");
    out
}

fn cmd_export(cfg: &RunConfig) -> Result<i32> {
    let pipeline = run_pipeline(cfg)?;
    write_estimate_artifacts(cfg, &pipeline)?;
    artifacts::write_text(&cfg.out_dir, "anchors.csv", &artifacts::anchors_csv(&pipeline.family))?;
    artifacts::write_text(&cfg.out_dir, "model.json", &model_json(cfg, &pipeline))?;
    print_estimate_summary(cfg, &pipeline);
    println!(
        "wrote family.csv, growth.csv, domain.csv, summary.json, anchors.csv, model.json to {}",
        cfg.out_dir.display()
    );
    Ok(0)
}
