//! Artifact writers: CSV tables and the JSON run summary.
//!
//! Every float is printed with 17 significant digits so repeated runs of
//! the same configuration produce byte-identical files and regressions can
//! diff them directly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lockin::domain::DomainEstimate;
use lockin::family::Family;
use lockin::growth::GrowthTable;
use lockin::sim::Trajectory;
use serde::Deserialize;

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One row per stored orbit sample, one block per orbit, innermost first.
pub fn family_csv(family: &Family) -> String {
    let mut out = String::from("V,t,dtheta,domega,dtheta_prime,domega_prime,grad_1,grad_2\n");
    for cycle in &family.cycles {
        for p in &cycle.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                fmt_f64(cycle.level),
                fmt_f64(p.t),
                fmt_f64(p.state.dtheta),
                fmt_f64(p.state.domega),
                fmt_f64(p.prime[0]),
                fmt_f64(p.prime[1]),
                fmt_f64(p.grad[0]),
                fmt_f64(p.grad[1]),
            );
        }
    }
    out
}

/// Long-format dump of the tabulated growth surface.
pub fn growth_csv(table: &GrowthTable) -> String {
    let mut out = String::from("vpll,vcc,F\n");
    for (i, &vpll) in table.vpll.iter().enumerate() {
        for (j, &vcc) in table.vcc.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{}",
                fmt_f64(vpll),
                fmt_f64(vcc),
                fmt_f64(table.f[i][j]),
            );
        }
    }
    out
}

/// The budget frontier, one row per table node.
pub fn domain_csv(estimate: &DomainEstimate) -> String {
    let mut out = String::from("vcc,phi\n");
    for &(vcc, phi) in &estimate.table {
        let _ = writeln!(out, "{},{}", fmt_f64(vcc), fmt_f64(phi));
    }
    out
}

/// Run summary; key order and float formatting are fixed for bit-exact
/// regeneration.
pub fn summary_json(estimate: &DomainEstimate, gamma: f64, version: &str) -> String {
    format!(
        "{{\n  \"V_bar\": {},\n  \"V_bar_bar\": {},\n  \"gamma\": {},\n  \"version\": \"{}\"\n}}\n",
        fmt_f64(estimate.v_bar),
        fmt_f64(estimate.v_bar_bar),
        fmt_f64(gamma),
        version,
    )
}

/// Parsed counterpart of [`summary_json`].
#[derive(Debug, Deserialize)]
pub struct Summary {
    #[serde(rename = "V_bar")]
    pub v_bar: f64,
    #[serde(rename = "V_bar_bar")]
    pub v_bar_bar: f64,
    pub gamma: f64,
    pub version: String,
}

pub fn load_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading summary {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing summary {}", path.display()))
}

/// One recorded trajectory, full state per accepted step.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,dtheta,domega,x1,x2,x3,x4\n");
    for (t, y) in traj.t.iter().zip(&traj.y) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            fmt_f64(*t),
            fmt_f64(y[0]),
            fmt_f64(y[1]),
            fmt_f64(y[2]),
            fmt_f64(y[3]),
            fmt_f64(y[4]),
            fmt_f64(y[5]),
        );
    }
    out
}

/// Per-orbit scalars: section anchor, its level sensitivity, period,
/// amplitude.
pub fn anchors_csv(family: &Family) -> String {
    let mut out = String::from("V,anchor,anchor_prime,period,amplitude\n");
    for cycle in &family.cycles {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(cycle.level),
            fmt_f64(cycle.anchor),
            fmt_f64(cycle.anchor_prime),
            fmt_f64(cycle.period),
            fmt_f64(cycle.amplitude),
        );
    }
    out
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
