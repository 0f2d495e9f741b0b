//! Run configuration: one TOML file plus command-line overrides.
//!
//! Every analysis knob lives here so a run is reproducible from the file
//! alone. Unset fields fall back to a named preset; unknown keys are
//! rejected rather than ignored.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lockin::family::FamilyOptions;
use lockin::growth::GrowthOptions;
use lockin::model::InverterParams;
use serde::Deserialize;

use crate::plugin::TestMatrixParams;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u64>,
    preset: Option<String>,
    out_dir: Option<PathBuf>,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    gauge: RawGauge,
    #[serde(default)]
    family: RawFamily,
    #[serde(default)]
    growth: RawGrowth,
    #[serde(default)]
    sim: RawSim,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    /// "inverter" (default) or "test-matrix".
    kind: Option<String>,
    kappa_p: Option<f64>,
    kappa_i: Option<f64>,
    k_p: Option<f64>,
    k_i: Option<f64>,
    l_f: Option<f64>,
    r_f: Option<f64>,
    l_g: Option<f64>,
    r_g: Option<f64>,
    omega_g: Option<f64>,
    v_g: Option<f64>,
    i_ref: Option<[f64; 2]>,
    /// Explicit block matrix of the test plugin, row major.
    a: Option<[[f64; 4]; 4]>,
    g_gain: Option<f64>,
    g_damp: Option<f64>,
    h: Option<[f64; 4]>,
    mu: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGauge {
    margin: Option<f64>,
    eps_margin: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFamily {
    v_seed: Option<f64>,
    v_step_min: Option<f64>,
    cycle_tol: Option<f64>,
    band_margin: Option<f64>,
    growth: Option<f64>,
    max_members: Option<usize>,
    samples_per_cycle: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrowth {
    vcc_levels: Option<usize>,
    safety_factor: Option<f64>,
    vcc_lo_rel: Option<f64>,
    vcc_hi_rel: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    n: Option<usize>,
    seed: Option<u64>,
    horizon: Option<f64>,
    audit_n: Option<usize>,
}

/// Which model the run analyzes.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    Inverter(InverterParams),
    TestMatrix(TestMatrixParams),
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Label written into the run summary.
    pub version: String,
    pub model: ModelSpec,
    pub gauge_margin: f64,
    pub eps_margin: f64,
    pub family: FamilyOptions,
    pub growth: GrowthOptions,
    pub sim_n: usize,
    /// Trajectories recorded for the proof-function audit.
    pub audit_n: usize,
    pub seed: u64,
    pub horizon: Option<f64>,
    pub out_dir: PathBuf,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub preset: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let raw = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let raw: RawConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                match raw.schema_version {
                    Some(SCHEMA_VERSION) => {}
                    Some(v) => bail!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"),
                    None => bail!("config file must declare schema_version = {SCHEMA_VERSION}"),
                }
                raw
            }
            None => RawConfig::default(),
        };

        let preset = overrides
            .preset
            .clone()
            .or(raw.preset.clone())
            .unwrap_or_else(|| "version-I".to_string());
        let params = match preset.as_str() {
            "version-I" => InverterParams::version_i(),
            "version-II" => InverterParams::version_ii(),
            other => bail!("unknown preset '{other}' (expected version-I or version-II)"),
        };

        let m = &raw.model;
        let kind = m.kind.as_deref().unwrap_or("inverter");
        let model = match kind {
            "inverter" => {
                let mut p = params;
                if let Some(v) = m.kappa_p {
                    p.kappa_p = v;
                }
                if let Some(v) = m.kappa_i {
                    p.kappa_i = v;
                }
                if let Some(v) = m.k_p {
                    p.k_p = v;
                }
                if let Some(v) = m.k_i {
                    p.k_i = v;
                }
                if let Some(v) = m.l_f {
                    p.l_f = v;
                }
                if let Some(v) = m.r_f {
                    p.r_f = v;
                }
                if let Some(v) = m.l_g {
                    p.l_g = v;
                }
                if let Some(v) = m.r_g {
                    p.r_g = v;
                }
                if let Some(v) = m.omega_g {
                    p.omega_g = v;
                }
                if let Some(v) = m.v_g {
                    p.v_g = v;
                }
                if let Some(v) = m.i_ref {
                    p.i_ref = v;
                }
                ModelSpec::Inverter(p)
            }
            "test-matrix" => {
                let a = m
                    .a
                    .context("model.kind = \"test-matrix\" requires an explicit model.a matrix")?;
                let mut p = TestMatrixParams::new(a);
                if let Some(v) = m.k_p {
                    p.k_p = v;
                }
                if let Some(v) = m.k_i {
                    p.k_i = v;
                }
                if let Some(v) = m.g_gain {
                    p.g_gain = v;
                }
                if let Some(v) = m.g_damp {
                    p.g_damp = v;
                }
                if let Some(v) = m.h {
                    p.h = v;
                }
                if let Some(v) = m.mu {
                    p.mu = v;
                }
                ModelSpec::TestMatrix(p)
            }
            other => bail!("unknown model.kind '{other}' (expected inverter or test-matrix)"),
        };
        let version = match &model {
            ModelSpec::Inverter(_) => preset.clone(),
            ModelSpec::TestMatrix(_) => "test-matrix".to_string(),
        };

        let gauge_margin = raw.gauge.margin.unwrap_or(0.5);
        let eps_margin = raw.gauge.eps_margin.unwrap_or(0.1);
        ensure_unit("gauge.margin", gauge_margin)?;
        ensure_unit("gauge.eps_margin", eps_margin)?;

        let mut family = FamilyOptions {
            v_seed: raw.family.v_seed,
            ..FamilyOptions::default()
        };
        if let Some(v) = raw.family.v_step_min {
            ensure_positive("family.v_step_min", v)?;
            family.v_step_min_rel = v;
        }
        if let Some(v) = raw.family.cycle_tol {
            ensure_positive("family.cycle_tol", v)?;
            family.cycle_tol = v;
        }
        if let Some(v) = raw.family.band_margin {
            if !(v > 0.0 && v <= 1.0) {
                bail!("family.band_margin must lie in (0, 1], got {v}");
            }
            family.band_margin = v;
        }
        if let Some(v) = raw.family.growth {
            if !(v > 1.0) {
                bail!("family.growth must exceed 1, got {v}");
            }
            family.growth = v;
        }
        if let Some(v) = raw.family.max_members {
            family.max_members = v;
        }
        if let Some(v) = raw.family.samples_per_cycle {
            family.samples_per_cycle = v;
        }
        if let Some(v) = family.v_seed {
            ensure_positive("family.v_seed", v)?;
        }

        let mut growth = GrowthOptions::default();
        if let Some(v) = raw.growth.vcc_levels {
            if v < 2 {
                bail!("growth.vcc_levels must be at least 2, got {v}");
            }
            growth.vcc_log_count = v;
        }
        if let Some(v) = raw.growth.safety_factor {
            if !(v >= 1.0) {
                bail!("growth.safety_factor must be at least 1, got {v}");
            }
            growth.safety = v;
        }
        if let Some(v) = raw.growth.vcc_lo_rel {
            ensure_positive("growth.vcc_lo_rel", v)?;
            growth.vcc_lo_rel = v;
        }
        if let Some(v) = raw.growth.vcc_hi_rel {
            ensure_positive("growth.vcc_hi_rel", v)?;
            growth.vcc_hi_rel = v;
        }
        if growth.vcc_hi_rel <= growth.vcc_lo_rel {
            bail!(
                "growth.vcc_hi_rel ({}) must exceed growth.vcc_lo_rel ({})",
                growth.vcc_hi_rel,
                growth.vcc_lo_rel
            );
        }

        if let Some(v) = raw.sim.horizon {
            ensure_positive("sim.horizon", v)?;
        }

        Ok(RunConfig {
            version,
            model,
            gauge_margin,
            eps_margin,
            family,
            growth,
            sim_n: raw.sim.n.unwrap_or(500),
            audit_n: raw.sim.audit_n.unwrap_or(20),
            seed: overrides.seed.or(raw.sim.seed).unwrap_or(20_260_814),
            horizon: raw.sim.horizon,
            out_dir: overrides
                .out
                .clone()
                .or(raw.out_dir)
                .unwrap_or_else(|| PathBuf::from("out")),
        })
    }
}

fn ensure_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        bail!("{name} must be positive and finite, got {v}");
    }
    Ok(())
}

fn ensure_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        bail!("{name} must lie in (0, 1), got {v}");
    }
    Ok(())
}
