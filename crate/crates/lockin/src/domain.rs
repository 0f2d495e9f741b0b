//! Admissible initial-condition domain in the (block level, loop level) plane.
//!
//! The block level decays at worst rate `-gamma v`, so a trajectory started
//! at block level `v > v_bar` spends `dv / (gamma v)` near each level on its
//! way down to `v_bar`, and the loop level grows at most at the tabulated
//! surface rate meanwhile. Integrating that exchange rightward from the
//! corner `(v_bar, v_bar)`,
//!
//! ```text
//! phi'(v) = -F(phi(v), v) / (gamma v),    phi(v_bar) = v_bar,
//! ```
//!
//! gives the largest loop budget `phi(v)` whose worst-case envelope still
//! re-enters the square `{v_cc <= v_bar, v_pll <= v_bar}`. The first zero of
//! `phi` marks the largest admissible block level. Budgets never exceed
//! `v_bar` (the family certifies nothing above its frontier), so `phi` is
//! clamped there; below `v_bar` the surface is non-positive and the budget
//! is the full frontier level.

use crate::family::Family;
use crate::gauge::Gauge;
use crate::growth::GrowthTable;
use crate::model::PllState;
use crate::ode::{integrate, Direction, EventSpec, OdeOptions, OdeStatus};
use crate::{Error, Result};
use nalgebra::{SVector, Vector4};

/// Solved admissible domain: the budget curve and its endpoints.
#[derive(Clone, Debug)]
pub struct DomainEstimate {
    /// Frontier level of the certifying family.
    pub v_bar: f64,
    /// Largest admissible block level; equals `v_bar` for the trivial
    /// square, exceeds it when the budget curve extends.
    pub v_bar_bar: f64,
    /// Budget rows `(v_cc, phi)`, ascending in `v_cc` over
    /// `[0, v_bar_bar]`, non-increasing in `phi`.
    pub table: Vec<(f64, f64)>,
}

/// Maximum spacing of stored budget rows relative to the frontier level.
const TABLE_SPACING_REL: f64 = 1.0 / 200.0;

impl DomainEstimate {
    /// Interpolated loop budget at a block level, `None` outside
    /// `[0, v_bar_bar]`.
    pub fn phi_at(&self, v_cc: f64) -> Option<f64> {
        if !v_cc.is_finite() || v_cc < 0.0 || v_cc > self.v_bar_bar {
            return None;
        }
        let rows = &self.table;
        let k = rows.partition_point(|r| r.0 <= v_cc);
        if k == 0 {
            return Some(rows[0].1);
        }
        if k == rows.len() {
            return Some(rows[rows.len() - 1].1);
        }
        let (v0, p0) = rows[k - 1];
        let (v1, p1) = rows[k];
        let t = if v1 > v0 { (v_cc - v0) / (v1 - v0) } else { 0.0 };
        Some(p0 + t * (p1 - p0))
    }

    /// Membership test of a full initial condition: the block level must
    /// not exceed the largest admissible one and the loop state must sit
    /// inside the sublevel set of the interpolated budget.
    pub fn contains(
        &self,
        family: &Family,
        gauge: &Gauge,
        x: &Vector4<f64>,
        pll: PllState,
    ) -> bool {
        let v_cc = gauge.v_cc(x);
        let Some(phi) = self.phi_at(v_cc) else {
            return false;
        };
        match family.query_vpll(pll) {
            Some(v_pll) => v_pll <= phi,
            None => false,
        }
    }
}

/// The square estimate: full budget up to the frontier, nothing beyond.
pub fn trivial_estimate(v_bar: f64) -> Result<DomainEstimate> {
    if !(v_bar > 0.0) || !v_bar.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "frontier level must be positive, got {v_bar}"
        )));
    }
    Ok(DomainEstimate {
        v_bar,
        v_bar_bar: v_bar,
        table: constant_rows(0.0, v_bar, v_bar),
    })
}

/// Uniform rows `(v, phi)` over `[lo, hi]` at the required spacing.
fn constant_rows(lo: f64, hi: f64, phi: f64) -> Vec<(f64, f64)> {
    let n = (((hi - lo) / (phi.max(hi) * TABLE_SPACING_REL)).ceil() as usize).max(1);
    (0..=n)
        .map(|k| (lo + (hi - lo) * k as f64 / n as f64, phi))
        .collect()
}

/// Solve the budget equation rightward from the corner.
///
/// The surface is scanned along the clamped budget first: while it stays
/// non-positive the budget sits clamped at `v_bar`. If it never turns
/// positive the estimate degenerates — strictly negative values mean the
/// clamp is engaged persistently (`NoExtension`), identically zero values
/// mean an unbounded extension the grid cannot certify (`GridExhausted`).
/// Once positive, the equation is integrated with the embedded-error
/// stepper until the budget hits zero (defining `v_bar_bar`) or the grid
/// ends (`GridExhausted`).
pub fn solve_phi(growth: &GrowthTable, gamma: f64, v_bar: f64) -> Result<DomainEstimate> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "decay rate must be positive, got {gamma}"
        )));
    }
    if !(v_bar > 0.0) || v_bar > growth.vpll_max() * (1.0 + 1e-12) {
        return Err(Error::InvalidConfig(format!(
            "frontier level {v_bar:.6e} outside the surface rows [0, {:.6e}]",
            growth.vpll_max()
        )));
    }
    let v_end = growth.vcc_max();
    if v_end <= v_bar {
        return Err(Error::GridExhausted {
            phi: v_bar,
            vcc: v_end,
        });
    }
    let phi_cap = v_bar.min(growth.vpll_max());

    // Clamped-corner scan: find where the surface first turns positive.
    let h_scan = v_bar * TABLE_SPACING_REL;
    let mut v_start = None;
    let mut any_negative = false;
    let mut worst_slope = f64::NEG_INFINITY;
    let mut v = v_bar;
    while v < v_end {
        let f = growth.eval(phi_cap, v)?;
        if f > 0.0 {
            v_start = Some(v);
            break;
        }
        if f < 0.0 {
            any_negative = true;
        }
        worst_slope = worst_slope.max(-f / (gamma * v));
        v = (v + h_scan).min(v_end);
    }
    let Some(v_start) = v_start else {
        if any_negative {
            return Err(Error::NoExtension { rate: worst_slope });
        }
        return Err(Error::GridExhausted {
            phi: v_bar,
            vcc: v_end,
        });
    };

    let rhs = |v: f64, y: &SVector<f64, 1>| -> Result<SVector<f64, 1>> {
        let phi = y[0].clamp(0.0, phi_cap);
        Ok(SVector::<f64, 1>::new(
            -growth.eval(phi, v)? / (gamma * v),
        ))
    };
    let zero_crossing = |_: f64, y: &SVector<f64, 1>| y[0];
    let events = [EventSpec {
        value: &zero_crossing,
        direction: Direction::Falling,
        terminal: true,
    }];
    let options = OdeOptions {
        rtol: 1e-10,
        atol: 1e-12 * v_bar,
        h_max: Some(v_bar * TABLE_SPACING_REL),
        record: true,
        ..OdeOptions::default()
    };
    let run = integrate(
        &rhs,
        v_start,
        SVector::<f64, 1>::new(v_bar),
        v_end,
        &events,
        &options,
        |_, _| {},
    )?;

    let v_bar_bar = match run.status {
        OdeStatus::Event { t, .. } => t,
        OdeStatus::ReachedEnd => {
            return Err(Error::GridExhausted {
                phi: run.final_state()[0],
                vcc: v_end,
            });
        }
    };

    // Assemble: constant rows through the clamped stretch, then the solved
    // curve forced monotone against round-off, ending exactly at zero.
    let mut table = constant_rows(0.0, v_start, v_bar);
    let mut prev_phi = v_bar;
    for (&v, y) in run.t.iter().zip(run.y.iter()) {
        if v <= table.last().expect("non-empty").0 || v >= v_bar_bar {
            continue;
        }
        let phi = y[0].clamp(0.0, prev_phi);
        table.push((v, phi));
        prev_phi = phi;
    }
    table.push((v_bar_bar, 0.0));
    Ok(DomainEstimate {
        v_bar,
        v_bar_bar,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extremal::Extremizer;
    use crate::family::{continue_family, FamilyOptions};
    use crate::gauge::build_gauge;
    use crate::growth::{tabulate, GrowthOptions};
    use crate::model::{default_inverter_model, CascadeModel, InverterParams};

    /// Surface with the given value function, constant across loop rows so
    /// closed forms in the block level hold exactly (the value is linear in
    /// the block level between nodes, which bilinear interpolation
    /// reproduces).
    fn synthetic_surface(v_bar: f64, value: impl Fn(f64) -> f64) -> GrowthTable {
        let mut vcc = vec![0.0];
        let n = 400;
        for k in 0..=n {
            vcc.push(0.01 * v_bar + (50.0 * v_bar - 0.01 * v_bar) * k as f64 / n as f64);
        }
        let row: Vec<f64> = vcc.iter().map(|&v| value(v)).collect();
        GrowthTable {
            vpll: vec![0.0, v_bar],
            vcc,
            f: vec![row.clone(), row],
        }
    }

    #[test]
    fn trivial_estimate_is_the_square() {
        let est = trivial_estimate(3.0).unwrap();
        assert_eq!(est.v_bar_bar, 3.0);
        assert_eq!(est.phi_at(0.0), Some(3.0));
        assert_eq!(est.phi_at(1.7), Some(3.0));
        assert_eq!(est.phi_at(3.0), Some(3.0));
        assert_eq!(est.phi_at(3.0001), None);
        assert_eq!(est.phi_at(-0.1), None);
        assert!(trivial_estimate(0.0).is_err());
    }

    #[test]
    fn zero_growth_exhausts_the_grid() {
        let v_bar = 2.0;
        let table = synthetic_surface(v_bar, |_| 0.0);
        match solve_phi(&table, 0.8, v_bar) {
            Err(Error::GridExhausted { phi, vcc }) => {
                assert!((phi - v_bar).abs() <= 1e-12);
                assert!((vcc - 50.0 * v_bar).abs() <= 1e-9);
            }
            other => panic!("expected grid exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn contracting_surface_reports_no_extension() {
        let v_bar = 2.0;
        let table = synthetic_surface(v_bar, |_| -1.0);
        match solve_phi(&table, 0.8, v_bar) {
            Err(Error::NoExtension { rate }) => assert!(rate > 0.0),
            other => panic!("expected no-extension, got {other:?}"),
        }
    }

    #[test]
    fn linear_growth_matches_the_closed_form() {
        let v_bar = 2.0;
        let gamma = 0.8;
        let table = synthetic_surface(v_bar, |v| gamma * v);
        let est = solve_phi(&table, gamma, v_bar).unwrap();
        // phi' = -1, so phi(v) = v_bar - (v - v_bar) and the zero sits at
        // twice the frontier.
        assert!(
            (est.v_bar_bar - 2.0 * v_bar).abs() <= 1e-6 * v_bar,
            "v_bar_bar = {:.8e}",
            est.v_bar_bar
        );
        let phi = est.phi_at(1.5 * v_bar).unwrap();
        assert!((phi - 0.5 * v_bar).abs() <= 1e-6 * v_bar);
        assert_eq!(est.phi_at(v_bar), Some(v_bar));
        assert_eq!(est.phi_at(0.3 * v_bar), Some(v_bar));
        let monotone = est.table.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-15);
        assert!(monotone, "budget table must be non-increasing");
        let spaced = est
            .table
            .windows(2)
            .all(|w| w[1].0 - w[0].0 <= v_bar / 200.0 + 1e-12);
        assert!(spaced, "budget rows must stay densely spaced");
    }

    #[test]
    fn delayed_growth_keeps_the_clamp_before_declining() {
        let v_bar = 2.0;
        let gamma = 0.8;
        // Non-positive until twice the frontier, then grows linearly:
        // the budget stays clamped, then follows
        // phi(v) = v_bar - (v - 2 v_bar) + 2 v_bar ln(v / (2 v_bar)).
        let table = synthetic_surface(v_bar, |v| gamma * (v - 2.0 * v_bar));
        let est = solve_phi(&table, gamma, v_bar).unwrap();
        assert_eq!(est.phi_at(1.5 * v_bar), Some(v_bar), "clamped stretch");
        let closed = |v: f64| v_bar - (v - 2.0 * v_bar) + 2.0 * v_bar * (v / (2.0 * v_bar)).ln();
        // Bisect the closed form for its root.
        let (mut lo, mut hi) = (2.0 * v_bar, 50.0 * v_bar);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if closed(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        assert!(
            (est.v_bar_bar - root).abs() <= 1e-4 * root,
            "v_bar_bar = {:.8e}, closed form {root:.8e}",
            est.v_bar_bar
        );
        let v_probe = 0.5 * (2.0 * v_bar + root);
        let phi = est.phi_at(v_probe).unwrap();
        assert!((phi - closed(v_probe)).abs() <= 1e-5 * v_bar);
    }

    #[test]
    fn real_pipeline_extends_the_square_and_answers_membership() {
        let model = default_inverter_model(InverterParams::version_i()).unwrap();
        let gauge = build_gauge(model.a_matrix(), 0.5).unwrap();
        let ex = Extremizer::new(&model, &gauge, 0.1).unwrap();
        let opts = FamilyOptions {
            max_members: 3,
            growth: 1.6,
            samples_per_cycle: 128,
            ..FamilyOptions::default()
        };
        let family = continue_family(&model, &gauge, &ex, &opts).unwrap();
        let growth_opts = GrowthOptions {
            vcc_log_count: 19,
            ..GrowthOptions::default()
        };
        let table = tabulate(&model, &ex, &family, &growth_opts).unwrap();
        let v_bar = family.frontier_level();
        let est = solve_phi(&table, gauge.gamma(), v_bar).unwrap();

        assert!(est.v_bar_bar > v_bar, "the budget curve must extend");
        assert_eq!(est.phi_at(0.0), Some(v_bar));
        let left = est.phi_at(v_bar).unwrap();
        assert!((left - v_bar).abs() <= 1e-9 * v_bar, "left corner value");
        let monotone = est.table.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
        assert!(monotone);
        assert!((est.phi_at(est.v_bar_bar).unwrap()).abs() <= 1e-12 * v_bar);

        // Membership: the origin is inside; a block state at the largest
        // admissible level admits only the locked loop state; anything
        // beyond is outside.
        let origin = PllState {
            dtheta: 0.0,
            domega: 0.0,
        };
        assert!(est.contains(&family, &gauge, &Vector4::zeros(), origin));
        let u = Vector4::new(1.0, -0.5, 0.25, 0.8).normalize();
        let x_edge = gauge.boundary_point(&u, 0.999 * est.v_bar_bar);
        assert!(est.contains(&family, &gauge, &x_edge, origin));
        let x_out = gauge.boundary_point(&u, 1.01 * est.v_bar_bar);
        assert!(!est.contains(&family, &gauge, &x_out, origin));

        // A loop state on an interior orbit is admissible with no block
        // disturbance but not once the budget has shrunk below its level.
        let mid_state = family.cycles[1].points[10].state;
        assert!(est.contains(&family, &gauge, &Vector4::zeros(), mid_state));
        let v_mid = est
            .table
            .iter()
            .find(|r| r.1 < 0.5 * family.cycles[1].level)
            .expect("budget drops below half the middle level")
            .0;
        let x_mid = gauge.boundary_point(&u, v_mid);
        assert!(!est.contains(&family, &gauge, &x_mid, mid_state));
    }
}
