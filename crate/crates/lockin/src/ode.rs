//! Explicit adaptive time integration with event localization.
//!
//! A Dormand-Prince 5(4) pair with FSAL, step-size control on the embedded
//! error estimate, and root-bracketing event detection. Events are localized
//! by bisection on re-stepped short steps from the last accepted point, so
//! the reported crossing inherits the accuracy of the accepted solution.

use nalgebra::SVector;

use crate::{Error, Result};

/// Right-hand side of an explicit first-order system.
pub trait OdeSystem<const N: usize>: Sync {
    fn rhs(&self, t: f64, y: &SVector<f64, N>) -> Result<SVector<f64, N>>;
}

impl<const N: usize, F> OdeSystem<N> for F
where
    F: Fn(f64, &SVector<f64, N>) -> Result<SVector<f64, N>> + Sync,
{
    fn rhs(&self, t: f64, y: &SVector<f64, N>) -> Result<SVector<f64, N>> {
        self(t, y)
    }
}

/// Sign-change filter of an event function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Any,
    Rising,
    Falling,
}

/// A scalar event `g(t, y) = 0` watched during integration.
pub struct EventSpec<'a, const N: usize> {
    pub value: &'a (dyn Fn(f64, &SVector<f64, N>) -> f64 + Sync),
    pub direction: Direction,
    pub terminal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OdeStatus {
    ReachedEnd,
    /// Terminal event fired; index into the event slice.
    Event { index: usize, t: f64 },
}

#[derive(Clone, Debug)]
pub struct OdeResult<const N: usize> {
    /// Accepted sample times (always contains the initial and final point).
    pub t: Vec<f64>,
    pub y: Vec<SVector<f64, N>>,
    pub status: OdeStatus,
    pub steps: usize,
    pub rejected: usize,
    /// Non-terminal event hits as `(event index, t, state)`.
    pub hits: Vec<(usize, f64, SVector<f64, N>)>,
}

impl<const N: usize> OdeResult<N> {
    pub fn final_time(&self) -> f64 {
        *self.t.last().expect("result is never empty")
    }

    pub fn final_state(&self) -> &SVector<f64, N> {
        self.y.last().expect("result is never empty")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h0: Option<f64>,
    pub h_max: Option<f64>,
    /// Relative step floor; an unmet error test below it aborts.
    pub h_min_rel: f64,
    pub max_steps: usize,
    /// Record every accepted step (`true`) or only the endpoints.
    pub record: bool,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            h0: None,
            h_max: None,
            h_min_rel: 1e-14,
            max_steps: 50_000_000,
            record: true,
        }
    }
}

/// Time tolerance (relative to the span) of event bisection.
const EVENT_TIME_TOL: f64 = 1e-10;

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One embedded step from `(t, y)` with the derivative `k1 = rhs(t, y)`
/// already available. Returns the fifth-order solution, the error estimate,
/// and the last stage (FSAL).
fn dopri_step<const N: usize>(
    sys: &dyn OdeSystem<N>,
    t: f64,
    y: &SVector<f64, N>,
    k1: &SVector<f64, N>,
    h: f64,
) -> Result<(SVector<f64, N>, SVector<f64, N>, SVector<f64, N>)> {
    let mut k = [SVector::<f64, N>::zeros(); 7];
    k[0] = *k1;
    for s in 1..7 {
        let mut ys = *y;
        for (j, kj) in k.iter().enumerate().take(s) {
            let a = A[s][j];
            if a != 0.0 {
                ys += kj * (a * h);
            }
        }
        k[s] = sys.rhs(t + C[s] * h, &ys)?;
    }
    let mut y5 = *y;
    let mut err = SVector::<f64, N>::zeros();
    for s in 0..7 {
        if B5[s] != 0.0 {
            y5 += k[s] * (B5[s] * h);
        }
        let d = B5[s] - B4[s];
        if d != 0.0 {
            err += k[s] * (d * h);
        }
    }
    Ok((y5, err, k[6]))
}

fn error_norm<const N: usize>(
    err: &SVector<f64, N>,
    y: &SVector<f64, N>,
    y_new: &SVector<f64, N>,
    rtol: f64,
    atol: f64,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        let sc = atol + rtol * y[i].abs().max(y_new[i].abs());
        let q = err[i] / sc;
        acc += q * q;
    }
    (acc / N as f64).sqrt()
}

/// Starting step heuristic from the local scales of `y` and its derivative.
fn initial_step<const N: usize>(
    sys: &dyn OdeSystem<N>,
    t0: f64,
    y0: &SVector<f64, N>,
    f0: &SVector<f64, N>,
    span: f64,
    rtol: f64,
    atol: f64,
) -> Result<f64> {
    let sc =
        |y: &SVector<f64, N>, i: usize| -> f64 { atol + rtol * y[i].abs() };
    let d0 = (0..N)
        .map(|i| (y0[i] / sc(y0, i)).powi(2))
        .sum::<f64>()
        .sqrt();
    let d1 = (0..N)
        .map(|i| (f0[i] / sc(y0, i)).powi(2))
        .sum::<f64>()
        .sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let y1 = y0 + f0 * h0;
    let f1 = sys.rhs(t0 + h0, &y1)?;
    let d2 = (0..N)
        .map(|i| ((f1[i] - f0[i]) / sc(y0, i)).powi(2))
        .sum::<f64>()
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok(h1.min(100.0 * h0).min(span))
}

/// Integrate `sys` from `(t0, y0)` to `t_end`, watching `events`.
///
/// `observer` sees every accepted point (including the initial one and any
/// terminal event point) and is independent of `options.record`.
pub fn integrate<const N: usize>(
    sys: &dyn OdeSystem<N>,
    t0: f64,
    y0: SVector<f64, N>,
    t_end: f64,
    events: &[EventSpec<'_, N>],
    options: &OdeOptions,
    mut observer: impl FnMut(f64, &SVector<f64, N>),
) -> Result<OdeResult<N>> {
    if !(t_end > t0) {
        return Err(Error::InvalidConfig(format!(
            "integration span must be forward in time: [{t0}, {t_end}]"
        )));
    }
    let span = t_end - t0;
    let h_max = options.h_max.unwrap_or(span);
    let h_floor = options.h_min_rel * span;

    let mut t = t0;
    let mut y = y0;
    let mut k1 = sys.rhs(t, &y)?;
    let mut h = match options.h0 {
        Some(h0) => h0.min(h_max),
        None => initial_step(sys, t, &y, &k1, span, options.rtol, options.atol)?.min(h_max),
    };

    let mut res = OdeResult {
        t: vec![t],
        y: vec![y],
        status: OdeStatus::ReachedEnd,
        steps: 0,
        rejected: 0,
        hits: Vec::new(),
    };
    observer(t, &y);
    let mut g_prev: Vec<f64> = events.iter().map(|e| (e.value)(t, &y)).collect();

    let mut total = 0usize;
    loop {
        if t >= t_end {
            break;
        }
        total += 1;
        if total > options.max_steps {
            return Err(Error::NoConvergence {
                what: "time integration step budget",
                iterations: options.max_steps,
                residual: t_end - t,
            });
        }
        let last = h >= t_end - t;
        let h_try = h.min(t_end - t);
        let (y_new, err, k_last) = dopri_step(sys, t, &y, &k1, h_try)?;
        let en = error_norm(&err, &y, &y_new, options.rtol, options.atol);
        if !en.is_finite() {
            h *= 0.25;
            res.rejected += 1;
            if h < h_floor {
                return Err(Error::StepFailure {
                    t,
                    h,
                    floor: h_floor,
                });
            }
            continue;
        }
        if en > 1.0 {
            res.rejected += 1;
            h = h_try * (0.9 * en.powf(-0.2)).clamp(0.2, 1.0);
            if h < h_floor {
                return Err(Error::StepFailure {
                    t,
                    h,
                    floor: h_floor,
                });
            }
            continue;
        }

        let t_new = if last { t_end } else { t + h_try };

        // Event scan over the accepted interval.
        let mut fired: Option<(usize, f64, SVector<f64, N>)> = None;
        for (idx, ev) in events.iter().enumerate() {
            let g0 = g_prev[idx];
            let g1 = (ev.value)(t_new, &y_new);
            let crossed = match ev.direction {
                Direction::Any => g0 * g1 < 0.0 || (g0 != 0.0 && g1 == 0.0),
                Direction::Rising => g0 < 0.0 && g1 >= 0.0,
                Direction::Falling => g0 > 0.0 && g1 <= 0.0,
            };
            if !crossed {
                continue;
            }
            let (te, ye) = locate_event(sys, t, &y, &k1, h_try, ev, g0)?;
            match &fired {
                Some((_, tf, _)) if *tf <= te => {}
                _ => fired = Some((idx, te, ye)),
            }
        }

        if let Some((idx, te, ye)) = fired {
            if events[idx].terminal {
                if options.record {
                    res.t.push(te);
                    res.y.push(ye);
                } else {
                    res.t = vec![te];
                    res.y = vec![ye];
                }
                observer(te, &ye);
                res.steps += 1;
                res.status = OdeStatus::Event { index: idx, t: te };
                return Ok(res);
            }
            res.hits.push((idx, te, ye));
        }

        t = t_new;
        y = y_new;
        k1 = k_last;
        res.steps += 1;
        if options.record {
            res.t.push(t);
            res.y.push(y);
        } else {
            res.t = vec![t];
            res.y = vec![y];
        }
        observer(t, &y);
        for (idx, ev) in events.iter().enumerate() {
            g_prev[idx] = (ev.value)(t, &y);
        }
        h = (h_try * (0.9 * en.max(1e-10).powf(-0.2)).clamp(0.2, 5.0)).min(h_max);
    }

    Ok(res)
}

/// Bisect the crossing time of `ev` inside an accepted step from `(t, y)`.
///
/// Interior states are produced by single fifth-order steps of shrinking
/// size from the accepted left endpoint, so their accuracy is at least
/// that of the accepted step itself.
fn locate_event<const N: usize>(
    sys: &dyn OdeSystem<N>,
    t: f64,
    y: &SVector<f64, N>,
    k1: &SVector<f64, N>,
    h: f64,
    ev: &EventSpec<'_, N>,
    g_left: f64,
) -> Result<(f64, SVector<f64, N>)> {
    let state_at = |dt: f64| -> Result<SVector<f64, N>> {
        if dt <= 0.0 {
            return Ok(*y);
        }
        let (ys, _, _) = dopri_step(sys, t, y, k1, dt)?;
        Ok(ys)
    };
    let mut lo = 0.0f64;
    let mut hi = h;
    let mut g_lo = g_left;
    let tol = EVENT_TIME_TOL * h.max(1e-300);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let ym = state_at(mid)?;
        let gm = (ev.value)(t + mid, &ym);
        let crossed_left = match ev.direction {
            Direction::Any => g_lo * gm < 0.0 || gm == 0.0,
            Direction::Rising => g_lo < 0.0 && gm >= 0.0,
            Direction::Falling => g_lo > 0.0 && gm <= 0.0,
        };
        if crossed_left {
            hi = mid;
        } else {
            lo = mid;
            g_lo = gm;
        }
    }
    let ye = state_at(hi)?;
    Ok((t + hi, ye))
}
