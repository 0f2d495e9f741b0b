//! The nested family of comparison limit cycles and the loop level function.
//!
//! For each frozen block level `V` the comparison dynamics settle onto an
//! attracting closed orbit encircling the locked state. Sweeping `V` upward
//! yields a strictly nested family of such orbits; the map assigning `V` to
//! each orbit is the loop level function whose sub-level sets are the
//! certified loop regions.
//!
//! Orbits are located as fixed points of the return map on the section
//! `{domega = 0, falling, dtheta > 0}`, which every encircling orbit crosses
//! exactly once per revolution (the loop runs clockwise: a positive phase
//! error pulls the frequency down). Each orbit then gets one variational
//! revolution attached: the state-transition matrix and level-sensitivity
//! column — transported through branch switches by the saltation map — give
//! the anchor sensitivity through the fixed-point condition, per-sample
//! level derivatives, and finally the level-function gradient at each
//! stored point.

use nalgebra::{DVector, Matrix2, Vector2, Vector4};

use crate::comparison::{ComparisonSystem, EVENT_ESCAPE, EVENT_SWITCH};
use crate::dae::{integrate, make_consistent, DaeOptions, DaeStatus, SemiExplicitDae};
use crate::extremal::{Extremizer, Sense};
use crate::gauge::Gauge;
use crate::model::{check_oscillatory, eval_f, CascadeModel, PllState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct FamilyOptions {
    /// Level of the first (innermost) member; `None` picks a level whose
    /// forcing balances the loop restoring torque at a phase amplitude of
    /// about 0.01 rad.
    pub v_seed: Option<f64>,
    /// Multiplicative level step of the continuation.
    pub growth: f64,
    /// Stop once the relative level step has been halved below this.
    pub v_step_min_rel: f64,
    /// Return-map residual below which an orbit counts as closed.
    pub cycle_tol: f64,
    /// Total revolution budget of one orbit search.
    pub max_revolutions: usize,
    pub max_members: usize,
    /// Stored points per orbit after downsampling.
    pub samples_per_cycle: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Orbits whose phase amplitude reaches this are not accepted.
    pub amplitude_cap: f64,
    /// Branch switches allowed within one revolution before the orbit is
    /// declared non-simple.
    pub max_switches_per_rev: usize,
    /// Continuation stops before levels reach this fraction of the
    /// singularity clearance.
    pub band_margin: f64,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        Self {
            v_seed: None,
            growth: 1.5,
            v_step_min_rel: 1e-3,
            cycle_tol: 1e-7,
            max_revolutions: 200,
            max_members: 64,
            samples_per_cycle: 256,
            rtol: 1e-7,
            atol: 1e-9,
            amplitude_cap: std::f64::consts::PI,
            max_switches_per_rev: 16,
            band_margin: 0.9,
        }
    }
}

/// One stored point of a comparison orbit.
#[derive(Clone, Copy, Debug)]
pub struct CyclePoint {
    /// Time since the section anchor.
    pub t: f64,
    pub state: PllState,
    /// Level derivative of the orbit point at fixed time-since-anchor.
    pub prime: [f64; 2],
    /// Gradient of the loop level function at this point.
    pub grad: [f64; 2],
    /// Branch-selected extremal value of `f` driving the orbit here.
    pub f_star: f64,
    /// Extremal block state behind `f_star`.
    pub x_star: Vector4<f64>,
    pub lambda_star: f64,
    /// True when the gradient came from neighbor interpolation because the
    /// local velocity/prime pair was near-parallel.
    pub grad_interpolated: bool,
}

impl CyclePoint {
    /// Orbit velocity, reconstructible from stored data alone.
    pub fn velocity(&self, k_p: f64, k_i: f64) -> [f64; 2] {
        [
            -k_p * self.f_star + self.state.domega,
            -k_i * self.f_star,
        ]
    }
}

/// A closed comparison orbit at one level.
#[derive(Clone, Debug)]
pub struct Cycle {
    pub level: f64,
    pub period: f64,
    /// Phase coordinate of the section anchor.
    pub anchor: f64,
    /// Level derivative of the anchor through the fixed-point condition.
    pub anchor_prime: f64,
    /// Samples ordered by time, the first at the anchor.
    pub points: Vec<CyclePoint>,
    /// Largest phase excursion over the full revolution (pre-downsampling).
    pub amplitude: f64,
}

impl Cycle {
    pub fn polygon(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().map(|p| (p.state.dtheta, p.state.domega))
    }
}

/// The nested orbit family, innermost first.
#[derive(Clone, Debug)]
pub struct Family {
    pub cycles: Vec<Cycle>,
}

struct Revolution {
    end_dtheta: f64,
    period: f64,
    end_y: DVector<f64>,
    end_z: DVector<f64>,
    /// Per-segment records (branch, t, y, z); empty unless recording.
    segments: Vec<Segment>,
    max_amplitude: f64,
}

struct Segment {
    branch: Sense,
    t: Vec<f64>,
    y: Vec<DVector<f64>>,
    z: Vec<DVector<f64>>,
}

/// Integrate one full revolution from the section point `(anchor, 0)`.
///
/// Branch switches at interior `domega = 0` crossings flip the active
/// extremum; in variational mode the transition matrix and sensitivity
/// column are pushed through each switch by the saltation map. The
/// revolution completes at the next falling crossing with `dtheta > 0`.
#[allow(clippy::too_many_arguments)]
fn revolve(
    model: &dyn CascadeModel,
    gauge: &Gauge,
    ex: &Extremizer<'_>,
    level: f64,
    anchor: f64,
    warm_z: Option<&DVector<f64>>,
    opts: &FamilyOptions,
    variational: bool,
    record: bool,
    time_guard: f64,
) -> Result<Revolution> {
    let state0 = PllState::new(anchor, 0.0);
    let mut sys = ComparisonSystem::new(model, gauge, level, Sense::Max, variational);

    // Algebraic start: polish the warm guess if it stays on the right
    // branches, otherwise solve both branches from scratch.
    let y0 = if variational {
        DVector::from_vec(vec![anchor, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    } else {
        DVector::from_vec(vec![anchor, 0.0])
    };
    let dae_opts = DaeOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        record,
        ..DaeOptions::default()
    };
    let mut z = match warm_z {
        Some(zw) => match make_consistent(&sys, 0.0, &y0, zw, dae_opts.alg_tol) {
            Ok(zc) if sys.validate(0.0, &y0, &zc).is_ok() => zc,
            _ => ComparisonSystem::initial_alg(ex, state0, level)?,
        },
        None => ComparisonSystem::initial_alg(ex, state0, level)?,
    };

    // The anchor must sit on a falling crossing: the loop field there points
    // into the lower half plane.
    let f_at_anchor = sys.branch_f(state0, &z, Sense::Max)?;
    if !(f_at_anchor > 0.0) {
        return Err(Error::NoCycle {
            level,
            reason: format!(
                "seed {anchor:.6e} is not on a falling section crossing (f = {f_at_anchor:.3e})"
            ),
        });
    }

    let mut t = 0.0;
    let mut y = y0;
    let mut segments: Vec<Segment> = Vec::new();
    let mut switches = 0usize;
    let mut max_amplitude = anchor.abs();

    loop {
        let res = integrate(&sys, t, y.clone(), z.clone(), t + time_guard, &dae_opts, |_, yy, _| {
            max_amplitude = max_amplitude.max(yy[0].abs());
        })?;
        match res.status {
            DaeStatus::ReachedEnd => {
                return Err(Error::NoCycle {
                    level,
                    reason: format!("no section return within {time_guard:.3e} time units"),
                });
            }
            DaeStatus::Event { index: EVENT_ESCAPE, .. } => {
                return Err(Error::NoCycle {
                    level,
                    reason: "trajectory escaped the principal phase well".into(),
                });
            }
            DaeStatus::Event { index: EVENT_SWITCH, t: te } => {
                if record {
                    segments.push(Segment {
                        branch: sys.active(),
                        t: res.t.clone(),
                        y: res.y.clone(),
                        z: res.z.clone(),
                    });
                }
                let mut y_e = res.final_diff().clone();
                let z_e = res.final_alg().clone();
                let state_e = PllState::new(y_e[0], y_e[1]);
                // A falling crossing completes the revolution when the old
                // branch was the minimum (upper half plane) and the phase is
                // positive.
                if sys.active() == Sense::Min && y_e[0] > 0.0 {
                    return Ok(Revolution {
                        end_dtheta: y_e[0],
                        period: te,
                        end_y: y_e,
                        end_z: z_e,
                        segments,
                        max_amplitude,
                    });
                }
                switches += 1;
                if switches > opts.max_switches_per_rev {
                    return Err(Error::NoCycle {
                        level,
                        reason: format!("non-simple orbit: {switches} branch switches"),
                    });
                }
                let old = sys.active();
                let new = match old {
                    Sense::Min => Sense::Max,
                    Sense::Max => Sense::Min,
                };
                if variational {
                    let s = sys.saltation(state_e, &z_e, old, new)?;
                    apply_saltation(&mut y_e, &s);
                }
                sys.set_active(new);
                t = te;
                y = y_e;
                z = z_e;
            }
            DaeStatus::Event { index, .. } => {
                return Err(Error::NoCycle {
                    level,
                    reason: format!("unexpected event index {index}"),
                });
            }
        }
    }
}

fn apply_saltation(y: &mut DVector<f64>, s: &Matrix2<f64>) {
    let m1 = s * Vector2::new(y[2], y[3]);
    let m2 = s * Vector2::new(y[4], y[5]);
    let w = s * Vector2::new(y[6], y[7]);
    y[2] = m1[0];
    y[3] = m1[1];
    y[4] = m2[0];
    y[5] = m2[1];
    y[6] = w[0];
    y[7] = w[1];
}

/// Locate the closed orbit at `level` by iterating the section return map.
///
/// Two plain sweeps bootstrap a secant iteration on the residual
/// `P(a) - a`; the revolution budget covers the whole search.
fn find_anchor(
    model: &dyn CascadeModel,
    gauge: &Gauge,
    ex: &Extremizer<'_>,
    level: f64,
    seed: f64,
    opts: &FamilyOptions,
    time_guard: f64,
) -> Result<(f64, DVector<f64>)> {
    let mut revs = 0usize;
    let mut warm: Option<DVector<f64>> = None;
    let run = |a: f64, warm: Option<&DVector<f64>>| -> Result<Revolution> {
        revolve(
            model, gauge, ex, level, a, warm, opts, false, false, time_guard,
        )
    };

    let mut a = seed;
    let mut prev: Option<(f64, f64)> = None;
    loop {
        if revs >= opts.max_revolutions {
            return Err(Error::NoCycle {
                level,
                reason: format!("revolution budget ({}) exhausted", opts.max_revolutions),
            });
        }
        let rev = run(a, warm.as_ref())?;
        revs += 1;
        let r = rev.end_dtheta - a;
        if r.abs() <= opts.cycle_tol {
            return Ok((a, rev.end_z));
        }
        let mut next = rev.end_dtheta;
        if let Some((a_prev, r_prev)) = prev {
            let dr = r - r_prev;
            if dr.abs() > 1e-14 {
                let cand = a - r * (a - a_prev) / dr;
                if cand.is_finite() && cand > 0.0 && cand < crate::comparison::ESCAPE_DTHETA {
                    next = cand;
                }
            }
        }
        prev = Some((a, r));
        warm = Some(rev.end_z);
        a = next;
    }
}

/// One variational revolution around a converged anchor, producing the
/// stored orbit with primes and gradients attached.
#[allow(clippy::too_many_arguments)]
fn build_cycle(
    model: &dyn CascadeModel,
    gauge: &Gauge,
    ex: &Extremizer<'_>,
    level: f64,
    anchor: f64,
    warm_z: Option<&DVector<f64>>,
    opts: &FamilyOptions,
    time_guard: f64,
) -> Result<Cycle> {
    let rev = revolve(
        model, gauge, ex, level, anchor, warm_z, opts, true, true, time_guard,
    )?;

    let bound = rev
        .segments
        .iter()
        .flat_map(|s| s.y.iter())
        .flat_map(|y| y.iter().skip(2))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if !bound.is_finite() || bound > 1e8 {
        return Err(Error::SensitivityDiverged {
            level,
            revolutions: 1,
        });
    }

    // Anchor sensitivity through the fixed-point condition of the section
    // map. The pre-crossing field at the return uses the minimum branch
    // (the orbit approaches the section from the upper half plane).
    let sys = ComparisonSystem::new(model, gauge, level, Sense::Min, true);
    let end_state = PllState::new(rev.end_y[0], rev.end_y[1]);
    let field_end = sys.plane_field(end_state, &rev.end_z, Sense::Min)?;
    if field_end[1].abs() < 1e-300 {
        return Err(Error::NoCycle {
            level,
            reason: "grazing section return".into(),
        });
    }
    let slope = field_end[0] / field_end[1];
    let m_t = Matrix2::new(rev.end_y[2], rev.end_y[4], rev.end_y[3], rev.end_y[5]);
    let w_t = Vector2::new(rev.end_y[6], rev.end_y[7]);
    let p_a = m_t[(0, 0)] - slope * m_t[(1, 0)];
    let p_v = w_t[0] - slope * w_t[1];
    let hyperbolicity = 1.0 - p_a;
    if hyperbolicity.abs() < 1e-6 {
        return Err(Error::SensitivityDiverged {
            level,
            revolutions: 1,
        });
    }
    let anchor_prime = p_v / hyperbolicity;

    // Downsample the recorded revolution to an even time stride.
    let total: usize = rev.segments.iter().map(|s| s.t.len()).sum();
    let keep_every = (total / opts.samples_per_cycle.max(8)).max(1);
    let k_p = model.k_p();
    let k_i = model.k_i();
    let mut points: Vec<CyclePoint> = Vec::new();
    let mut degenerate: Vec<usize> = Vec::new();
    let mut counter = 0usize;
    for seg in &rev.segments {
        for i in 0..seg.t.len() {
            // Switch points (segment ends) are always kept: they pin the
            // exact crossings of the switching line, including the
            // revolution-completing section return.
            let keep = counter.is_multiple_of(keep_every) || i + 1 == seg.t.len();
            counter += 1;
            if !keep {
                continue;
            }
            // Skip the duplicated point at a segment boundary (the previous
            // segment already recorded the switch state).
            if i == 0 && !points.is_empty() {
                continue;
            }
            let y = &seg.y[i];
            let z = &seg.z[i];
            let state = PllState::new(y[0], y[1]);
            let m = Matrix2::new(y[2], y[4], y[3], y[5]);
            let w = Vector2::new(y[6], y[7]);
            let prime = m * Vector2::new(anchor_prime, 0.0) + w;
            let x_star = ComparisonSystem::branch_x(z, seg.branch);
            let lambda_star = ComparisonSystem::branch_lambda(z, seg.branch);
            let f_star = eval_f(model, state, &x_star)?;
            let velocity = Vector2::new(-k_p * f_star + state.domega, -k_i * f_star);
            let det = velocity[0] * prime[1] - velocity[1] * prime[0];
            let floor = 1e-8 * velocity.norm() * prime.norm();
            let (grad, is_degenerate) = if det.abs() > floor && floor > 0.0 {
                ([-velocity[1] / det, velocity[0] / det], false)
            } else {
                ([f64::NAN, f64::NAN], true)
            };
            if is_degenerate {
                degenerate.push(points.len());
            }
            points.push(CyclePoint {
                t: seg.t[i],
                state,
                prime: [prime[0], prime[1]],
                grad,
                f_star,
                x_star,
                lambda_star,
                grad_interpolated: is_degenerate,
            });
        }
    }
    if points.len() < 8 {
        return Err(Error::NoCycle {
            level,
            reason: format!("only {} stored samples", points.len()),
        });
    }
    if degenerate.len() * 5 > points.len() {
        return Err(Error::GradientDegenerate {
            level,
            degenerate: degenerate.len(),
            total: points.len(),
        });
    }
    interpolate_degenerate_gradients(&mut points, &degenerate);

    Ok(Cycle {
        level,
        period: rev.period,
        anchor,
        anchor_prime,
        points,
        amplitude: rev.max_amplitude,
    })
}

/// Fill marked samples with an arc-length-weighted blend of the nearest
/// clean neighbors on either side (cyclically).
fn interpolate_degenerate_gradients(points: &mut [CyclePoint], degenerate: &[usize]) {
    if degenerate.is_empty() {
        return;
    }
    let n = points.len();
    let arc = |points: &[CyclePoint], i: usize, j: usize| -> f64 {
        let a = points[i].state;
        let b = points[j].state;
        ((a.dtheta - b.dtheta).powi(2) + (a.domega - b.domega).powi(2)).sqrt()
    };
    let mut filled: Vec<(usize, [f64; 2])> = Vec::with_capacity(degenerate.len());
    for &idx in degenerate {
        let mut before = None;
        let mut d_before = 0.0;
        let mut cursor = idx;
        for _ in 0..n {
            let next = (cursor + n - 1) % n;
            d_before += arc(points, cursor, next);
            cursor = next;
            if !points[cursor].grad_interpolated {
                before = Some(cursor);
                break;
            }
        }
        let mut after = None;
        let mut d_after = 0.0;
        cursor = idx;
        for _ in 0..n {
            let next = (cursor + 1) % n;
            d_after += arc(points, cursor, next);
            cursor = next;
            if !points[cursor].grad_interpolated {
                after = Some(cursor);
                break;
            }
        }
        if let (Some(b), Some(a)) = (before, after) {
            let wsum = d_before + d_after;
            let wb = if wsum > 0.0 { d_after / wsum } else { 0.5 };
            let wa = 1.0 - wb;
            filled.push((
                idx,
                [
                    wb * points[b].grad[0] + wa * points[a].grad[0],
                    wb * points[b].grad[1] + wa * points[a].grad[1],
                ],
            ));
        }
    }
    for (idx, grad) in filled {
        points[idx].grad = grad;
    }
}

/// Build the nested family by level continuation.
///
/// Starts from a small seed level, grows multiplicatively, and on failure
/// halves the relative step until it drops below `v_step_min_rel`; the last
/// accepted member marks the frontier. Members must be strictly nested and
/// stay below the amplitude cap.
pub fn continue_family(
    model: &dyn CascadeModel,
    gauge: &Gauge,
    ex: &Extremizer<'_>,
    opts: &FamilyOptions,
) -> Result<Family> {
    let report = check_oscillatory(model)?;
    if !report.pass {
        return Err(Error::ModelInvalid(
            "the comparison construction needs an oscillatory locked state".into(),
        ));
    }
    let omega = report.eigenvalues[0].im.abs();
    let base_period = 2.0 * std::f64::consts::PI / omega;
    let time_guard = 50.0 * base_period;

    // Seed level: forcing spread over the ellipsoid balancing the restoring
    // torque at a 0.01 rad phase amplitude.
    let r0 = 0.01;
    let h0 = model.h(0.0);
    let spread2 = (gauge.p_inv() * h0).dot(&h0);
    let g_slope = model.g_dtheta(0.0, 0.0);
    let v_seed = opts.v_seed.unwrap_or_else(|| {
        if spread2 > 0.0 {
            (g_slope * r0).powi(2) / spread2
        } else {
            1e-2
        }
    });

    let mut cycles: Vec<Cycle> = Vec::new();
    let mut level = v_seed;
    let mut anchor_guess = r0;
    let mut growth = opts.growth;
    let mut seed_shrinks = 0usize;
    let mut last_error: Option<Error> = None;

    while cycles.len() < opts.max_members {
        if level >= opts.band_margin * ex.clearance() {
            break;
        }
        let attempt = find_anchor(model, gauge, ex, level, anchor_guess, opts, time_guard)
            .and_then(|(anchor, warm_z)| {
                build_cycle(
                    model,
                    gauge,
                    ex,
                    level,
                    anchor,
                    Some(&warm_z),
                    opts,
                    time_guard,
                )
            });
        match attempt {
            Ok(cycle) => {
                if cycle.amplitude >= opts.amplitude_cap {
                    break;
                }
                if let Some(prev) = cycles.last() {
                    if !strictly_nested(prev, &cycle) {
                        break;
                    }
                }
                anchor_guess = cycle.anchor * growth.sqrt();
                level *= growth;
                cycles.push(cycle);
            }
            Err(e) => {
                last_error = Some(e);
                if cycles.is_empty() {
                    // The seed itself failed; try smaller levels a few times.
                    seed_shrinks += 1;
                    if seed_shrinks > 8 {
                        break;
                    }
                    level /= 4.0;
                    anchor_guess = r0 * (level / v_seed).sqrt().min(1.0);
                    continue;
                }
                let rel = growth - 1.0;
                if rel * 0.5 < opts.v_step_min_rel {
                    break;
                }
                growth = 1.0 + rel * 0.5;
                let prev = cycles.last().expect("non-empty checked above");
                level = prev.level * growth;
                anchor_guess = prev.anchor * growth.sqrt();
            }
        }
    }

    if cycles.is_empty() {
        return Err(Error::EmptyFamily(format!(
            "no comparison orbit found near seed level {v_seed:.6e}: {}",
            last_error.map_or_else(|| "no attempts made".into(), |e| e.to_string())
        )));
    }
    Ok(Family { cycles })
}

/// Every vertex of `inner` strictly inside `outer`'s polygon.
fn strictly_nested(inner: &Cycle, outer: &Cycle) -> bool {
    let poly: Vec<(f64, f64)> = outer.polygon().collect();
    inner
        .polygon()
        .all(|p| point_in_polygon(&poly, p))
}

/// Even-odd rule with a horizontal ray.
fn point_in_polygon(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    let n = poly.len();
    let mut inside = false;
    let (px, py) = p;
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        if (y1 > py) != (y2 > py) {
            let x_cross = x1 + (py - y1) / (y2 - y1) * (x2 - x1);
            if px < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Largest positive distance along the unit ray `u` from the origin to the
/// polygon boundary.
fn ray_exit_radius(poly: &[(f64, f64)], u: (f64, f64)) -> Option<f64> {
    let n = poly.len();
    let mut best: Option<f64> = None;
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        let ex = x2 - x1;
        let ey = y2 - y1;
        let det = ex * (-u.1) - ey * (-u.0);
        if det.abs() < 1e-300 {
            continue;
        }
        // Solve p1 + s*(p2-p1) = r*u for (s, r).
        let s = (-x1 * (-u.1) - (-u.0) * (-y1)) / det;
        let r = (ex * (-y1) - ey * (-x1)) / det;
        if (0.0..=1.0).contains(&s) && r > 0.0 {
            best = Some(best.map_or(r, |b: f64| b.max(r)));
        }
    }
    best
}

impl Family {
    pub fn frontier(&self) -> &Cycle {
        self.cycles.last().expect("a family is never empty")
    }

    /// The certified loop budget `V` at the frontier.
    pub fn frontier_level(&self) -> f64 {
        self.frontier().level
    }

    pub fn levels(&self) -> impl Iterator<Item = f64> + '_ {
        self.cycles.iter().map(|c| c.level)
    }

    /// Count of adjacent nesting violations (should be zero).
    pub fn nesting_violations(&self) -> usize {
        self.cycles
            .windows(2)
            .filter(|w| !strictly_nested(&w[0], &w[1]))
            .count()
    }

    /// Loop level of a plane point: the interpolated level of the orbit
    /// through it, `Some(0)` exactly at the origin, `None` outside the
    /// outermost orbit.
    ///
    /// Between adjacent orbits the square root of the level is interpolated
    /// linearly in the radial distance along the ray from the origin, which
    /// is exact in the small-level regime where amplitude grows like the
    /// square root of the level.
    pub fn query_vpll(&self, state: PllState) -> Option<f64> {
        let p = (state.dtheta, state.domega);
        let r_p = (p.0 * p.0 + p.1 * p.1).sqrt();
        if r_p == 0.0 {
            return Some(0.0);
        }
        let polys: Vec<Vec<(f64, f64)>> = self
            .cycles
            .iter()
            .map(|c| c.polygon().collect())
            .collect();
        // Binary search for the innermost orbit containing the point
        // (containment is monotone along the nested family).
        if !point_in_polygon(polys.last().unwrap(), p) {
            return None;
        }
        let mut lo = 0usize; // candidate answer range [lo, hi]
        let mut hi = polys.len() - 1;
        if point_in_polygon(&polys[0], p) {
            hi = 0;
        } else {
            // Invariant: point outside polys[lo], inside polys[hi].
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if point_in_polygon(&polys[mid], p) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
        }
        let u = (p.0 / r_p, p.1 / r_p);
        let r_outer = ray_exit_radius(&polys[hi], u)?;
        let v_outer = self.cycles[hi].level;
        let (r_inner, v_inner) = if hi == 0 {
            (0.0, 0.0)
        } else {
            (ray_exit_radius(&polys[hi - 1], u)?, self.cycles[hi - 1].level)
        };
        if r_outer <= r_inner {
            return Some(v_outer);
        }
        let frac = ((r_p - r_inner) / (r_outer - r_inner)).clamp(0.0, 1.0);
        let sqrt_v = v_inner.sqrt() + (v_outer.sqrt() - v_inner.sqrt()) * frac;
        Some(sqrt_v * sqrt_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauge::build_gauge;
    use crate::model::{default_inverter_model, InverterParams};

    fn setup() -> (crate::model::InverterModel, Gauge) {
        let m = default_inverter_model(InverterParams::version_i()).unwrap();
        let g = build_gauge(m.a_matrix(), 0.5).unwrap();
        (m, g)
    }

    fn small_family(members: usize, growth: f64) -> (crate::model::InverterModel, Gauge, Family) {
        let (m, g) = setup();
        let family = {
            let ex = Extremizer::new(&m, &g, 0.1).unwrap();
            let opts = FamilyOptions {
                max_members: members,
                growth,
                samples_per_cycle: 128,
                ..FamilyOptions::default()
            };
            continue_family(&m, &g, &ex, &opts).unwrap()
        };
        (m, g, family)
    }

    #[test]
    fn small_orbit_period_approaches_the_linear_one() {
        let (m, g) = setup();
        let ex = Extremizer::new(&m, &g, 0.1).unwrap();
        let opts = FamilyOptions {
            max_members: 1,
            ..FamilyOptions::default()
        };
        let family = continue_family(&m, &g, &ex, &opts).unwrap();
        let report = check_oscillatory(&m).unwrap();
        let t_lin = 2.0 * std::f64::consts::PI / report.eigenvalues[0].im.abs();
        let cycle = &family.cycles[0];
        assert!(
            (cycle.period - t_lin).abs() / t_lin < 0.15,
            "period {} vs linear {}",
            cycle.period,
            t_lin
        );
    }

    #[test]
    fn orbit_crosses_the_switching_line_twice() {
        let (_m, _g, family) = small_family(1, 1.5);
        let cycle = &family.cycles[0];
        // Count circular sign changes over the strictly-signed samples
        // (switch points themselves sit numerically on the line).
        let signs: Vec<f64> = cycle
            .points
            .iter()
            .map(|p| p.state.domega)
            .filter(|d| d.abs() > 1e-12)
            .map(f64::signum)
            .collect();
        let n = signs.len();
        assert!(n > 16, "enough off-line samples");
        let sign_changes = (0..n).filter(|&i| signs[i] != signs[(i + 1) % n]).count();
        assert_eq!(sign_changes, 2, "one falling and one rising crossing");
    }

    #[test]
    fn members_are_strictly_nested() {
        let (_m, _g, family) = small_family(3, 1.6);
        assert_eq!(family.cycles.len(), 3);
        assert_eq!(family.nesting_violations(), 0);
        for w in family.cycles.windows(2) {
            assert!(w[0].level < w[1].level);
            assert!(w[0].amplitude < w[1].amplitude);
        }
    }

    #[test]
    fn anchor_prime_matches_finite_differences_across_levels() {
        let (m, g) = setup();
        let ex = Extremizer::new(&m, &g, 0.1).unwrap();
        let opts = FamilyOptions {
            max_members: 2,
            growth: 1.5,
            cycle_tol: 1e-9,
            rtol: 1e-9,
            atol: 1e-11,
            ..FamilyOptions::default()
        };
        let family = continue_family(&m, &g, &ex, &opts).unwrap();
        let cycle = &family.cycles[1];
        let report = check_oscillatory(&m).unwrap();
        let guard = 100.0 * std::f64::consts::PI / report.eigenvalues[0].im.abs();

        let dl = 1e-3 * cycle.level;
        let anchor_at = |lvl: f64| -> f64 {
            find_anchor(&m, &g, &ex, lvl, cycle.anchor, &opts, guard)
                .unwrap()
                .0
        };
        let fd = (anchor_at(cycle.level + dl) - anchor_at(cycle.level - dl)) / (2.0 * dl);
        assert!(
            (cycle.anchor_prime - fd).abs() <= 2e-3 * fd.abs().max(1e-12),
            "anchor prime {:.8e} vs FD {:.8e}",
            cycle.anchor_prime,
            fd
        );
    }

    #[test]
    fn gradients_annihilate_velocity_and_normalize_primes() {
        let (m, _g, family) = small_family(2, 1.5);
        let cycle = &family.cycles[1];
        let mut checked = 0;
        for p in &cycle.points {
            if p.grad_interpolated {
                continue;
            }
            let v = p.velocity(m.k_p(), m.k_i());
            let dot_v = v[0] * p.grad[0] + v[1] * p.grad[1];
            let dot_p = p.prime[0] * p.grad[0] + p.prime[1] * p.grad[1];
            let scale = (v[0].hypot(v[1])) * (p.grad[0].hypot(p.grad[1]));
            assert!(dot_v.abs() <= 1e-9 * scale.max(1e-300), "tangency {dot_v:.3e}");
            assert!((dot_p - 1.0).abs() <= 1e-9, "normalization {dot_p:.3e}");
            checked += 1;
        }
        assert!(checked * 5 >= cycle.points.len() * 4, "enough clean samples");
    }

    #[test]
    fn level_queries_recover_member_levels_and_reject_outsiders() {
        let (_m, _g, family) = small_family(3, 1.6);
        assert_eq!(family.query_vpll(PllState::new(0.0, 0.0)), Some(0.0));
        // On stored points of the middle member the interpolated level is
        // within the gap to the neighbors.
        let mid = &family.cycles[1];
        for p in mid.points.iter().step_by(16) {
            let v = family.query_vpll(p.state).expect("on the orbit");
            assert!(
                (v - mid.level).abs() <= 0.15 * mid.level,
                "level {v:.4e} vs member {:.4e} at ({:.3}, {:.4})",
                mid.level,
                p.state.dtheta,
                p.state.domega
            );
        }
        // Far outside the outermost member.
        assert_eq!(family.query_vpll(PllState::new(3.0, 0.5)), None);
    }

    #[test]
    fn family_stops_at_the_frontier_and_reports_it() {
        let (_m, _g, family) = small_family(2, 1.5);
        assert_eq!(family.frontier_level(), family.cycles.last().unwrap().level);
        assert!(family.frontier_level() > family.cycles[0].level);
    }
}
