//! Staged estimation pipeline shared by the commands.
//!
//! Each stage is tagged with a context label so a failure names the stage,
//! and the underlying library error stays downcastable for exit-code
//! mapping.

use anyhow::{Context, Result};
use lockin::domain::{solve_phi, trivial_estimate, DomainEstimate};
use lockin::error::Error;
use lockin::extremal::Extremizer;
use lockin::family::{continue_family, Family};
use lockin::gauge::{build_gauge, Gauge};
use lockin::growth::{tabulate, GrowthTable};
use lockin::model::{default_inverter_model, CascadeModel};

use crate::config::{ModelSpec, RunConfig};
use crate::plugin::TestMatrixModel;

/// Everything the commands need from one full estimation run.
pub struct Pipeline {
    pub model: Box<dyn CascadeModel>,
    pub gauge: Gauge,
    pub family: Family,
    pub table: GrowthTable,
    pub estimate: DomainEstimate,
    /// Set when the budget integration could not leave the trivial square
    /// and the estimate degenerated to the square itself.
    pub degenerate: bool,
}

pub fn build_model(spec: &ModelSpec) -> lockin::Result<Box<dyn CascadeModel>> {
    match spec {
        ModelSpec::Inverter(p) => Ok(Box::new(default_inverter_model(*p)?)),
        ModelSpec::TestMatrix(p) => Ok(Box::new(TestMatrixModel::new(p.clone())?)),
    }
}

/// Run gauge -> family -> growth -> budget on the configured model.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Pipeline> {
    let model = build_model(&cfg.model).context("model stage")?;
    let gauge = build_gauge(model.a_matrix(), cfg.gauge_margin).context("gauge stage")?;
    // The extremizer borrows the model, so everything needing it lives in
    // this block; the results are owned and the borrow ends here.
    let (family, table, estimate, degenerate) = {
        let ex = Extremizer::new(model.as_ref(), &gauge, cfg.eps_margin).context("gauge stage")?;
        let family =
            continue_family(model.as_ref(), &gauge, &ex, &cfg.family).context("family stage")?;
        let table = tabulate(model.as_ref(), &ex, &family, &cfg.growth).context("growth stage")?;
        let v_bar = family.frontier_level();
        let (estimate, degenerate) = match solve_phi(&table, gauge.gamma(), v_bar) {
            Ok(est) => (est, false),
            // A surface that never favors growth still certifies the square.
            Err(Error::NoExtension { .. }) => (
                trivial_estimate(v_bar).context("domain stage")?,
                true,
            ),
            Err(e) => return Err(e).context("domain stage"),
        };
        (family, table, estimate, degenerate)
    };
    Ok(Pipeline {
        model,
        gauge,
        family,
        table,
        estimate,
        degenerate,
    })
}

/// Map a failure to the process exit code: structural/configuration
/// problems exit 2, numerical breakdowns exit 4.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::ModelInvalid(_)
                | Error::GradientGateFailed { .. }
                | Error::NotHurwitz { .. }
                | Error::InvalidConfig(_) => 2,
                _ => 4,
            };
        }
    }
    2
}
