//! Closed-loop simulation and Monte Carlo validation of domain estimates.
//!
//! The full state stacks the loop pair on top of the block,
//! `y = [dtheta, domega, x1..x4]`, and is integrated with the adaptive
//! embedded pair. A run ends in exactly one of three ways: the phase error
//! reaches half a turn (a slip), the state enters a small ball around the
//! origin and stays there for a dwell time (convergence), or the horizon
//! runs out (inconclusive — reported, never counted as converged).

use std::f64::consts::PI;

use crate::domain::DomainEstimate;
use crate::family::Family;
use crate::gauge::Gauge;
use crate::model::{check_oscillatory, eval_f, CascadeModel, PllState};
use crate::ode::{integrate, Direction, EventSpec, OdeOptions, OdeStatus, OdeSystem};
use crate::{Error, Result};
use nalgebra::{SVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Stacked state `[dtheta, domega, x1..x4]`.
pub type FullState = SVector<f64, 6>;

pub fn pack_state(pll: PllState, x: &Vector4<f64>) -> FullState {
    FullState::from_column_slice(&[pll.dtheta, pll.domega, x[0], x[1], x[2], x[3]])
}

pub fn pll_part(y: &FullState) -> PllState {
    PllState::new(y[0], y[1])
}

pub fn block_part(y: &FullState) -> Vector4<f64> {
    Vector4::new(y[2], y[3], y[4], y[5])
}

/// The coupled dynamics: the block runs open-loop while its output forces
/// the loop through the shared synchronization signal.
struct ClosedLoop<'a> {
    model: &'a dyn CascadeModel,
}

impl OdeSystem<6> for ClosedLoop<'_> {
    fn rhs(&self, _t: f64, y: &FullState) -> Result<FullState> {
        let x = block_part(y);
        let f = eval_f(self.model, pll_part(y), &x)?;
        let dx = self.model.a_matrix() * x;
        Ok(FullState::from_column_slice(&[
            -self.model.k_p() * f + y[1],
            -self.model.k_i() * f,
            dx[0],
            dx[1],
            dx[2],
            dx[3],
        ]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    /// Wall-clock limit of one run, in simulated seconds.
    pub horizon: f64,
    /// Block-level threshold of the convergence ball.
    pub v_cc_ball: f64,
    /// Loop-norm threshold of the convergence ball, radians.
    pub pll_ball: f64,
    /// Time the state must remain inside the ball to count as converged.
    pub dwell: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl SimOptions {
    /// Defaults tied to the certified construction: the ball is a fixed
    /// fraction of the frontier level and a milliradian of loop error, the
    /// dwell spans five linearized loop periods, and the horizon covers
    /// fifty time constants of the slower subsystem (block decay or loop
    /// damping, whichever is slower).
    pub fn defaults_for(model: &dyn CascadeModel, gauge: &Gauge, v_bar: f64) -> Result<Self> {
        let report = check_oscillatory(model)?;
        let lam = report.eigenvalues[0];
        let re = lam.re.abs().max(f64::MIN_POSITIVE);
        let im = lam.im.abs().max(f64::MIN_POSITIVE);
        let period = 2.0 * PI / im;
        Ok(Self {
            horizon: 50.0 * (2.0 / gauge.gamma()).max(2.0 / re),
            v_cc_ball: 1e-6 * v_bar,
            pll_ball: 1e-3,
            dwell: 5.0 * period,
            rtol: 1e-8,
            atol: 1e-10,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrajectoryOutcome {
    /// Entered the origin ball and stayed for the dwell time.
    pub converged: bool,
    /// The phase error reached half a turn.
    pub slipped: bool,
    /// Time the outcome was decided: slip time, dwell completion, or the
    /// horizon for inconclusive runs.
    pub t_final: f64,
    pub min_dtheta: f64,
    pub max_dtheta: f64,
}

/// Dense record of accepted integration points.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub y: Vec<FullState>,
}

/// Signed distance-like indicator of the convergence ball: negative once
/// both the block level and the loop norm are inside their thresholds.
fn ball_indicator(gauge: &Gauge, opts: &SimOptions, y: &FullState) -> f64 {
    let v_cc = gauge.v_cc(&block_part(y));
    let pll2 = y[0] * y[0] + y[1] * y[1];
    (v_cc / opts.v_cc_ball).max(pll2 / (opts.pll_ball * opts.pll_ball)) - 1.0
}

/// Simulate one initial condition to a decision.
///
/// Returns the outcome and, when `record` is set, the dense trajectory.
/// A singular synchronization denominator along the way is reported as an
/// error, never swallowed.
pub fn simulate(
    model: &dyn CascadeModel,
    gauge: &Gauge,
    state0: &FullState,
    opts: &SimOptions,
    record: bool,
) -> Result<(TrajectoryOutcome, Option<Trajectory>)> {
    if !(opts.horizon > 0.0) || !(opts.dwell >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "horizon {} and dwell {} must be positive",
            opts.horizon, opts.dwell
        )));
    }
    let sys = ClosedLoop { model };
    let slip_fn = |_: f64, y: &FullState| y[0].abs() - PI;
    let ball_fn = |_: f64, y: &FullState| ball_indicator(gauge, opts, y);
    let ode_opts = OdeOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        record: false,
        ..OdeOptions::default()
    };

    let mut t = 0.0;
    let mut y = *state0;
    let mut min_dtheta = y[0];
    let mut max_dtheta = y[0];
    let mut traj = if record {
        Some(Trajectory {
            t: vec![0.0],
            y: vec![y],
        })
    } else {
        None
    };

    if y[0].abs() >= PI {
        return Ok((
            TrajectoryOutcome {
                converged: false,
                slipped: true,
                t_final: 0.0,
                min_dtheta,
                max_dtheta,
            },
            traj,
        ));
    }

    let outcome = loop {
        let inside = ball_indicator(gauge, opts, &y) < 0.0;
        let t_target = if inside {
            (t + opts.dwell).min(opts.horizon)
        } else {
            opts.horizon
        };
        if t_target <= t {
            // Already at the horizon without a completed dwell.
            break TrajectoryOutcome {
                converged: false,
                slipped: false,
                t_final: opts.horizon,
                min_dtheta,
                max_dtheta,
            };
        }
        let ball_event = EventSpec {
            value: &ball_fn,
            direction: if inside {
                Direction::Rising
            } else {
                Direction::Falling
            },
            terminal: true,
        };
        let slip_event = EventSpec {
            value: &slip_fn,
            direction: Direction::Rising,
            terminal: true,
        };
        let events = [slip_event, ball_event];
        let run = integrate(&sys, t, y, t_target, &events, &ode_opts, |ts, ys| {
            min_dtheta = min_dtheta.min(ys[0]);
            max_dtheta = max_dtheta.max(ys[0]);
            if let Some(tr) = traj.as_mut() {
                if *tr.t.last().expect("seeded") < ts {
                    tr.t.push(ts);
                    tr.y.push(*ys);
                }
            }
        })?;
        let t_new = run.final_time();
        let y_new = *run.final_state();
        match run.status {
            OdeStatus::Event { index: 0, .. } => {
                break TrajectoryOutcome {
                    converged: false,
                    slipped: true,
                    t_final: t_new,
                    min_dtheta,
                    max_dtheta,
                };
            }
            OdeStatus::Event { .. } => {
                // Crossed the ball boundary in either direction: re-enter
                // the loop with the phase flipped.
                t = t_new;
                y = y_new;
            }
            OdeStatus::ReachedEnd => {
                // The dwell completed iff the chunk target was the dwell
                // deadline (the `min` picked it, so the compare is exact).
                let dwelled = inside && t_target == t + opts.dwell;
                break TrajectoryOutcome {
                    converged: dwelled,
                    slipped: false,
                    t_final: if dwelled { t_target } else { opts.horizon },
                    min_dtheta,
                    max_dtheta,
                };
            }
        }
    };
    Ok((outcome, traj))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct McReport {
    pub n: usize,
    pub n_converged: usize,
    pub n_slipped: usize,
    pub n_inconclusive: usize,
    /// Smallest slack to the slip lines over all runs: `pi - max |dtheta|`.
    /// Infinite for an empty report.
    pub worst_margin: f64,
}

/// Draw one initial condition inside the estimate with a 1% inset: a block
/// level uniform below the admissible maximum, a block state just inside
/// that ellipsoid, and a loop state rejection-sampled inside the
/// interpolated budget's sublevel set.
pub fn sample_inside(
    est: &DomainEstimate,
    family: &Family,
    gauge: &Gauge,
    rng: &mut ChaCha8Rng,
) -> Result<FullState> {
    let v_c = rng.random_range(0.0..0.99 * est.v_bar_bar);
    let u = unit_direction(rng);
    let x = gauge.boundary_point(&u, v_c) * 0.995;
    let phi = est.phi_at(v_c).unwrap_or(0.0);
    let budget = 0.99 * phi;
    let innermost = &family.cycles[0];
    if budget <= 1e-12 * est.v_bar {
        return Ok(pack_state(PllState::new(0.0, 0.0), &x));
    }
    // Bounding box of the smallest member enclosing the budget, shrunk by
    // the amplitude scaling when the budget undercuts the whole family.
    let bracket = family
        .cycles
        .iter()
        .find(|c| c.level >= budget)
        .unwrap_or_else(|| family.frontier());
    let scale = if budget < innermost.level {
        (budget / innermost.level).sqrt() * 1.05
    } else {
        1.0
    };
    let (mut lo_t, mut hi_t) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_w, mut hi_w) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &bracket.points {
        lo_t = lo_t.min(p.state.dtheta);
        hi_t = hi_t.max(p.state.dtheta);
        lo_w = lo_w.min(p.state.domega);
        hi_w = hi_w.max(p.state.domega);
    }
    for _ in 0..100_000 {
        let pll = PllState::new(
            rng.random_range(lo_t..hi_t) * scale,
            rng.random_range(lo_w..hi_w) * scale,
        );
        if let Some(v) = family.query_vpll(pll) {
            if v <= budget {
                return Ok(pack_state(pll, &x));
            }
        }
    }
    Err(Error::InvalidConfig(
        "rejection sampling of the loop state starved".into(),
    ))
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    loop {
        let v = Vector4::from_fn(|_, _| rng.random_range(-1.0f64..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Validate an estimate by simulating `n` independent draws from inside it.
///
/// The draws are generated up front from the seed, simulated across
/// available parallelism, and reduced in draw order, so a fixed seed gives
/// a fixed report.
pub fn monte_carlo_validate(
    est: &DomainEstimate,
    family: &Family,
    gauge: &Gauge,
    model: &dyn CascadeModel,
    n: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<McReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = (0..n)
        .map(|_| sample_inside(est, family, gauge, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let outcomes = states
        .par_iter()
        .map(|s| simulate(model, gauge, s, opts, false).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let mut report = McReport {
        n,
        worst_margin: f64::INFINITY,
        ..McReport::default()
    };
    for o in outcomes {
        if o.slipped {
            report.n_slipped += 1;
        } else if o.converged {
            report.n_converged += 1;
        } else {
            report.n_inconclusive += 1;
        }
        let reach = o.min_dtheta.abs().max(o.max_dtheta.abs());
        report.worst_margin = report.worst_margin.min(PI - reach);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AuditReport {
    /// Consecutive sample pairs compared.
    pub checked: usize,
    /// Samples skipped because the loop state left the certified region.
    pub skipped: usize,
    /// Increases beyond the tolerance pad.
    pub violations: usize,
    /// Largest increase seen, padded or not.
    pub worst_jump: f64,
}

/// Audit the proof function `max(V_loop, V_block)` for monotone decay
/// along a dense trajectory inside the trivial square.
///
/// The loop level comes from the nested-orbit query, whose radial
/// interpolation between members carries a few-percent error; `tol_rel`
/// pads comparisons accordingly.
pub fn lyapunov_audit(
    traj: &Trajectory,
    family: &Family,
    gauge: &Gauge,
    tol_rel: f64,
    tol_abs: f64,
) -> AuditReport {
    let mut report = AuditReport::default();
    let mut prev: Option<f64> = None;
    for y in &traj.y {
        let v_cc = gauge.v_cc(&block_part(y));
        let Some(v_pll) = family.query_vpll(pll_part(y)) else {
            report.skipped += 1;
            prev = None;
            continue;
        };
        let m = v_cc.max(v_pll);
        if let Some(p) = prev {
            report.checked += 1;
            let jump = m - p;
            if jump > tol_abs + tol_rel * p {
                report.violations += 1;
            }
            report.worst_jump = report.worst_jump.max(jump);
        }
        prev = Some(m);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::solve_phi;
    use crate::extremal::Extremizer;
    use crate::family::{continue_family, FamilyOptions};
    use crate::gauge::build_gauge;
    use crate::growth::{tabulate, GrowthOptions};
    use crate::model::{default_inverter_model, InverterModel, InverterParams};

    struct World {
        model: InverterModel,
        gauge: Gauge,
        family: Family,
        opts: SimOptions,
    }

    fn world() -> World {
        let model = default_inverter_model(InverterParams::version_i()).unwrap();
        let gauge = build_gauge(model.a_matrix(), 0.5).unwrap();
        let ex = Extremizer::new(&model, &gauge, 0.1).unwrap();
        let fam_opts = FamilyOptions {
            max_members: 3,
            growth: 1.6,
            samples_per_cycle: 128,
            ..FamilyOptions::default()
        };
        let family = continue_family(&model, &gauge, &ex, &fam_opts).unwrap();
        let opts = SimOptions::defaults_for(&model, &gauge, family.frontier_level()).unwrap();
        World {
            model,
            gauge,
            family,
            opts,
        }
    }

    #[test]
    fn the_origin_converges_immediately() {
        let w = world();
        let (out, _) = simulate(&w.model, &w.gauge, &FullState::zeros(), &w.opts, false).unwrap();
        assert!(out.converged && !out.slipped);
        assert!((out.t_final - w.opts.dwell).abs() <= 1e-9 * w.opts.dwell);
    }

    #[test]
    fn near_the_saddle_the_outcome_depends_on_the_side() {
        let w = world();
        // The unforced saddle sits where the synchronization signal changes
        // sign on the rest axis — below half a turn because the phase
        // detector carries a constant load offset. Bisect for it.
        let f_rest = |theta: f64| {
            eval_f(&w.model, PllState::new(theta, 0.0), &Vector4::zeros()).unwrap()
        };
        let (mut lo, mut hi) = (0.5, PI - 1e-9);
        assert!(f_rest(lo) > 0.0, "restoring near the origin side");
        assert!(f_rest(hi) < 0.0, "repelling just inside the slip line");
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f_rest(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let saddle = 0.5 * (lo + hi);

        let rest = pack_state(PllState::new(saddle - 0.01, 0.0), &Vector4::zeros());
        let (out, _) = simulate(&w.model, &w.gauge, &rest, &w.opts, false).unwrap();
        assert!(
            out.converged && !out.slipped,
            "resting just inside the saddle must swing back: {out:?}"
        );

        let beyond = (saddle + 0.01).min(PI - 1e-6);
        let push = pack_state(PllState::new(beyond, 0.0), &Vector4::zeros());
        let (out, _) = simulate(&w.model, &w.gauge, &push, &w.opts, false).unwrap();
        assert!(
            out.slipped && !out.converged,
            "resting just outside the saddle must slip: {out:?}"
        );
        assert!(out.max_dtheta >= PI - 1e-9);

        let at_line = pack_state(PllState::new(PI, 0.0), &Vector4::zeros());
        let (out, _) = simulate(&w.model, &w.gauge, &at_line, &w.opts, false).unwrap();
        assert!(out.slipped && out.t_final == 0.0);
    }

    #[test]
    fn deep_inside_the_square_the_proof_function_decays() {
        let w = world();
        let v_bar = w.family.frontier_level();
        let u = Vector4::new(0.3, -1.0, 0.6, 0.2).normalize();
        let x0 = w.gauge.boundary_point(&u, 0.3 * v_bar);
        let pll0 = w.family.cycles[0].points[7].state;
        let y0 = pack_state(pll0, &x0);
        let (out, traj) = simulate(&w.model, &w.gauge, &y0, &w.opts, true).unwrap();
        assert!(out.converged && !out.slipped, "{out:?}");
        let traj = traj.unwrap();

        // Block level obeys the exponential decay certificate.
        let v0 = w.gauge.v_cc(&block_part(&traj.y[0]));
        let gamma = w.gauge.gamma();
        for (t, y) in traj.t.iter().zip(traj.y.iter()) {
            let v = w.gauge.v_cc(&block_part(y));
            let bound = v0 * (-gamma * t).exp();
            assert!(
                v <= bound * (1.0 + 1e-6) + 1e-12 * v_bar,
                "block level {v:.6e} above its decay bound {bound:.6e} at t = {t:.3}"
            );
        }

        let audit = lyapunov_audit(&traj, &w.family, &w.gauge, 0.02, 1e-9 * v_bar);
        assert_eq!(audit.violations, 0, "{audit:?}");
        assert!(audit.checked > 100);
    }

    #[test]
    fn a_block_only_start_decays_without_slipping() {
        let w = world();
        let u = Vector4::new(1.0, 0.4, -0.7, 0.1).normalize();
        let x0 = w.gauge.boundary_point(&u, 0.8 * w.family.frontier_level());
        let y0 = pack_state(PllState::new(0.0, 0.0), &x0);
        let (out, traj) = simulate(&w.model, &w.gauge, &y0, &w.opts, true).unwrap();
        assert!(!out.slipped);
        let traj = traj.unwrap();
        let mut prev = f64::INFINITY;
        for y in &traj.y {
            let v = w.gauge.v_cc(&block_part(y));
            assert!(
                v <= prev * (1.0 + 1e-6) + 1e-12,
                "block level rose beyond integration noise: {v:.9e} after {prev:.9e}"
            );
            prev = v;
        }
    }

    #[test]
    fn sampled_draws_respect_the_estimate_and_reports_are_deterministic() {
        let w = world();
        let ex = Extremizer::new(&w.model, &w.gauge, 0.1).unwrap();
        let growth_opts = GrowthOptions {
            vcc_log_count: 19,
            ..GrowthOptions::default()
        };
        let table = tabulate(&w.model, &ex, &w.family, &growth_opts).unwrap();
        let est = solve_phi(&table, w.gauge.gamma(), w.family.frontier_level()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let y = sample_inside(&est, &w.family, &w.gauge, &mut rng).unwrap();
            assert!(
                est.contains(&w.family, &w.gauge, &block_part(&y), pll_part(&y)),
                "draw escapes the estimate: {y:?}"
            );
        }

        let empty = monte_carlo_validate(&est, &w.family, &w.gauge, &w.model, 0, 3, &w.opts)
            .unwrap();
        assert_eq!(
            (empty.n, empty.n_converged, empty.n_slipped, empty.n_inconclusive),
            (0, 0, 0, 0)
        );
        assert!(empty.worst_margin.is_infinite());

        let a = monte_carlo_validate(&est, &w.family, &w.gauge, &w.model, 6, 42, &w.opts)
            .unwrap();
        let b = monte_carlo_validate(&est, &w.family, &w.gauge, &w.model, 6, 42, &w.opts)
            .unwrap();
        assert_eq!(a.n_slipped, 0, "draws from inside the estimate never slip");
        assert_eq!(a.n, 6);
        assert_eq!(a.n_converged, b.n_converged);
        assert_eq!(a.worst_margin, b.worst_margin);
        assert!(a.worst_margin > 0.0);
    }
}
