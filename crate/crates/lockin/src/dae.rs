//! Semi-explicit index-1 DAE integration.
//!
//! Systems of the form `dy/dt = f(t, y, z)`, `0 = g(t, y, z)` with a
//! nonsingular algebraic Jacobian `dg/dz`. The stepper is the one-step
//! trapezoidal rule solved simultaneously for the differential and algebraic
//! unknowns by a damped quasi-Newton iteration (finite-difference Jacobian,
//! reused across iterations and steps). The local error is estimated against
//! an implicit-Euler companion step, which is conservative for a
//! second-order method. Events are terminal by design: the caller restarts
//! segments, which keeps switching logic out of the stepper.

use nalgebra::{DMatrix, DVector};

use crate::ode::Direction;
use crate::{Error, Result};

/// A semi-explicit DAE with optional terminal events.
pub trait SemiExplicitDae: Sync {
    fn n_diff(&self) -> usize;
    fn n_alg(&self) -> usize;

    /// Differential right-hand side `f(t, y, z)` into `out` (length `n_diff`).
    fn rhs(&self, t: f64, y: &DVector<f64>, z: &DVector<f64>, out: &mut DVector<f64>)
        -> Result<()>;

    /// Algebraic residual `g(t, y, z)` into `out` (length `n_alg`).
    fn residual(
        &self,
        t: f64,
        y: &DVector<f64>,
        z: &DVector<f64>,
        out: &mut DVector<f64>,
    ) -> Result<()>;

    /// Positive scale of each algebraic equation, used to normalize Newton
    /// residuals. Defaults to one.
    fn residual_scales(&self, y: &DVector<f64>, z: &DVector<f64>, out: &mut DVector<f64>) {
        let _ = (y, z);
        out.fill(1.0);
    }

    fn n_events(&self) -> usize {
        0
    }

    /// Scalar event function; all events are terminal.
    fn event(&self, index: usize, t: f64, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let _ = (index, t, y, z);
        0.0
    }

    fn event_direction(&self, _index: usize) -> Direction {
        Direction::Any
    }

    /// Invariant check evaluated at every accepted point; an `Err` aborts.
    fn validate(&self, _t: f64, _y: &DVector<f64>, _z: &DVector<f64>) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DaeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h0: Option<f64>,
    pub h_max: Option<f64>,
    /// Step floor relative to the span.
    pub h_min_rel: f64,
    pub max_steps: usize,
    /// Scaled algebraic residual each accepted point must satisfy.
    pub alg_tol: f64,
    pub record: bool,
}

impl Default for DaeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-7,
            atol: 1e-9,
            h0: None,
            h_max: None,
            h_min_rel: 1e-13,
            max_steps: 20_000_000,
            alg_tol: 1e-11,
            record: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DaeStatus {
    ReachedEnd,
    Event { index: usize, t: f64 },
}

#[derive(Clone, Debug)]
pub struct DaeResult {
    pub t: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub status: DaeStatus,
    pub steps: usize,
    pub rejected: usize,
}

impl DaeResult {
    pub fn final_time(&self) -> f64 {
        *self.t.last().expect("result is never empty")
    }
    pub fn final_diff(&self) -> &DVector<f64> {
        self.y.last().expect("result is never empty")
    }
    pub fn final_alg(&self) -> &DVector<f64> {
        self.z.last().expect("result is never empty")
    }
}

/// Project `z_guess` onto the algebraic manifold at fixed `(t, y)`.
///
/// Damped Newton with a finite-difference Jacobian of `g` with respect to
/// `z`; converges when every scaled residual component is below `tol`.
pub fn make_consistent(
    dae: &dyn SemiExplicitDae,
    t: f64,
    y: &DVector<f64>,
    z_guess: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let na = dae.n_alg();
    if na == 0 {
        return Ok(z_guess.clone());
    }
    let mut z = z_guess.clone();
    let mut r = DVector::zeros(na);
    let mut scales = DVector::from_element(na, 1.0);
    let mut jac = DMatrix::zeros(na, na);
    let mut r_pert = DVector::zeros(na);

    for _ in 0..50 {
        dae.residual(t, y, &z, &mut r)?;
        dae.residual_scales(y, &z, &mut scales);
        let rn = scaled_inf_norm(&r, &scales);
        if rn <= tol {
            return Ok(z);
        }

        for j in 0..na {
            let dz = fd_delta(z[j]);
            let saved = z[j];
            z[j] = saved + dz;
            dae.residual(t, y, &z, &mut r_pert)?;
            z[j] = saved;
            for i in 0..na {
                jac[(i, j)] = (r_pert[i] - r[i]) / dz;
            }
        }
        let lu = jac.clone().lu();
        let delta = lu.solve(&(-&r)).ok_or(Error::NoConvergence {
            what: "algebraic consistency (singular Jacobian)",
            iterations: 0,
            residual: rn,
        })?;

        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let cand = &z + alpha * &delta;
            if dae.residual(t, y, &cand, &mut r_pert).is_ok() {
                let rn_new = scaled_inf_norm(&r_pert, &scales);
                if rn_new.is_finite() && (rn_new < rn || alpha < 0.1) {
                    z = cand;
                    improved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            return Err(Error::NoConvergence {
                what: "algebraic consistency",
                iterations: 50,
                residual: rn,
            });
        }
    }
    dae.residual(t, y, &z, &mut r)?;
    dae.residual_scales(y, &z, &mut scales);
    let rn = scaled_inf_norm(&r, &scales);
    if rn <= tol {
        Ok(z)
    } else {
        Err(Error::NoConvergence {
            what: "algebraic consistency",
            iterations: 50,
            residual: rn,
        })
    }
}

/// Integrate from consistent `(t0, y0, z0)` to `t_end` or a terminal event.
pub fn integrate(
    dae: &dyn SemiExplicitDae,
    t0: f64,
    y0: DVector<f64>,
    z0: DVector<f64>,
    t_end: f64,
    options: &DaeOptions,
    mut observer: impl FnMut(f64, &DVector<f64>, &DVector<f64>),
) -> Result<DaeResult> {
    let nd = dae.n_diff();
    let na = dae.n_alg();
    if nd == 0 {
        return Err(Error::InvalidConfig(
            "a DAE needs at least one differential state".into(),
        ));
    }
    if y0.len() != nd || z0.len() != na {
        return Err(Error::InvalidConfig(format!(
            "state sizes ({}, {}) do not match the system ({nd}, {na})",
            y0.len(),
            z0.len()
        )));
    }
    if !(t_end > t0) {
        return Err(Error::InvalidConfig(format!(
            "integration span must be forward in time: [{t0}, {t_end}]"
        )));
    }

    let span = t_end - t0;
    let h_max = options.h_max.unwrap_or(span);
    let h_floor = options.h_min_rel * span;
    let mut stepper = Stepper::new(dae, options);

    let mut t = t0;
    let mut y = y0;
    let mut z = make_consistent(dae, t, &y, &z0, options.alg_tol)?;
    dae.validate(t, &y, &z)?;
    let mut f_left = DVector::zeros(nd);
    dae.rhs(t, &y, &z, &mut f_left)?;

    let mut res = DaeResult {
        t: vec![t],
        y: vec![y.clone()],
        z: vec![z.clone()],
        status: DaeStatus::ReachedEnd,
        steps: 0,
        rejected: 0,
    };
    observer(t, &y, &z);
    let mut g_prev: Vec<f64> = (0..dae.n_events()).map(|i| dae.event(i, t, &y, &z)).collect();

    let mut h = options.h0.unwrap_or(span * 1e-6).min(h_max);
    let mut total = 0usize;
    while t < t_end {
        total += 1;
        if total > options.max_steps {
            return Err(Error::NoConvergence {
                what: "DAE step budget",
                iterations: options.max_steps,
                residual: t_end - t,
            });
        }
        let h_try = h.min(t_end - t);
        let step = match stepper.step(t, &y, &z, &f_left, h_try) {
            Ok(s) => s,
            Err(StepReject::Solver) => {
                res.rejected += 1;
                h = h_try * 0.3;
                if h < h_floor {
                    return Err(Error::StepFailure {
                        t,
                        h,
                        floor: h_floor,
                    });
                }
                continue;
            }
            Err(StepReject::Hard(e)) => return Err(e),
        };
        if step.err_norm > 1.0 {
            res.rejected += 1;
            h = h_try * (0.9 / step.err_norm.sqrt()).clamp(0.2, 1.0);
            if h < h_floor {
                return Err(Error::StepFailure {
                    t,
                    h,
                    floor: h_floor,
                });
            }
            continue;
        }

        let t_new = if h_try >= t_end - t { t_end } else { t + h_try };

        // Terminal event scan over the accepted interval.
        let mut fired: Option<(usize, f64)> = None;
        for (idx, &g0) in g_prev.iter().enumerate() {
            let g1 = dae.event(idx, t_new, &step.y, &step.z);
            if crossed(dae.event_direction(idx), g0, g1) {
                match fired {
                    Some((_, tf)) if tf <= t_new => {}
                    _ => fired = Some((idx, t_new)),
                }
            }
        }
        if let Some((idx, _)) = fired {
            let (te, ye, ze) = locate_event(dae, &mut stepper, t, &y, &z, &f_left, h_try, idx,
                g_prev[idx])?;
            dae.validate(te, &ye, &ze)?;
            if options.record {
                res.t.push(te);
                res.y.push(ye.clone());
                res.z.push(ze.clone());
            } else {
                res.t = vec![te];
                res.y = vec![ye.clone()];
                res.z = vec![ze.clone()];
            }
            observer(te, &ye, &ze);
            res.steps += 1;
            res.status = DaeStatus::Event { index: idx, t: te };
            return Ok(res);
        }

        t = t_new;
        y = step.y;
        z = step.z;
        f_left = step.f_right;
        dae.validate(t, &y, &z)?;
        res.steps += 1;
        if options.record {
            res.t.push(t);
            res.y.push(y.clone());
            res.z.push(z.clone());
        } else {
            res.t = vec![t];
            res.y = vec![y.clone()];
            res.z = vec![z.clone()];
        }
        observer(t, &y, &z);
        for (idx, g) in g_prev.iter_mut().enumerate() {
            *g = dae.event(idx, t, &y, &z);
        }
        h = (h_try * (0.9 / step.err_norm.max(1e-10).sqrt()).clamp(0.2, 4.0)).min(h_max);
    }

    Ok(res)
}

fn crossed(dir: Direction, g0: f64, g1: f64) -> bool {
    match dir {
        Direction::Any => g0 * g1 < 0.0 || (g0 != 0.0 && g1 == 0.0),
        Direction::Rising => g0 < 0.0 && g1 >= 0.0,
        Direction::Falling => g0 > 0.0 && g1 <= 0.0,
    }
}

/// Bisect on the substep length from the last accepted point until the
/// event time is pinned down; every probe is a full nonlinear solve, so the
/// located state is itself a consistent trapezoidal solution.
#[allow(clippy::too_many_arguments)]
fn locate_event(
    dae: &dyn SemiExplicitDae,
    stepper: &mut Stepper<'_>,
    t: f64,
    y: &DVector<f64>,
    z: &DVector<f64>,
    f_left: &DVector<f64>,
    h: f64,
    idx: usize,
    g_left: f64,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let dir = dae.event_direction(idx);
    let mut lo = 0.0f64;
    let mut hi = h;
    let mut g_lo = g_left;
    let tol = (1e-9 * h).max(1e-12);
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    for _ in 0..80 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let step = stepper
            .step(t, y, z, f_left, mid)
            .map_err(|e| match e {
                StepReject::Hard(err) => err,
                StepReject::Solver => Error::NoConvergence {
                    what: "event localization substep",
                    iterations: 0,
                    residual: f64::NAN,
                },
            })?;
        let gm = dae.event(idx, t + mid, &step.y, &step.z);
        if crossed(dir, g_lo, gm) {
            hi = mid;
            best = Some((t + mid, step.y, step.z));
        } else {
            lo = mid;
            g_lo = gm;
        }
    }
    match best {
        Some(b) => Ok(b),
        None => {
            // The crossing sits in the last sliver before `t + h`.
            let step = stepper.step(t, y, z, f_left, hi).map_err(|e| match e {
                StepReject::Hard(err) => err,
                StepReject::Solver => Error::NoConvergence {
                    what: "event localization substep",
                    iterations: 0,
                    residual: f64::NAN,
                },
            })?;
            Ok((t + hi, step.y, step.z))
        }
    }
}

struct StepOutput {
    y: DVector<f64>,
    z: DVector<f64>,
    f_right: DVector<f64>,
    err_norm: f64,
}

enum StepReject {
    /// Newton failed; the driver should shrink the step.
    Solver,
    /// Model evaluation failed outright.
    Hard(Error),
}

/// Trapezoidal single-step solver with a cached finite-difference Jacobian.
struct Stepper<'a> {
    dae: &'a dyn SemiExplicitDae,
    options: &'a DaeOptions,
    nd: usize,
    na: usize,
    jac: DMatrix<f64>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    jac_h: f64,
    steps_since_jac: usize,
    // Workspaces.
    r: DVector<f64>,
    r_pert: DVector<f64>,
    f_new: DVector<f64>,
    g_new: DVector<f64>,
    scales: DVector<f64>,
}

impl<'a> Stepper<'a> {
    fn new(dae: &'a dyn SemiExplicitDae, options: &'a DaeOptions) -> Self {
        let nd = dae.n_diff();
        let na = dae.n_alg();
        Self {
            dae,
            options,
            nd,
            na,
            jac: DMatrix::zeros(nd + na, nd + na),
            lu: None,
            jac_h: f64::NAN,
            steps_since_jac: usize::MAX,
            r: DVector::zeros(nd + na),
            r_pert: DVector::zeros(nd + na),
            f_new: DVector::zeros(nd),
            g_new: DVector::zeros(na),
            scales: DVector::zeros(na.max(1)),
        }
    }

    /// Combined residual at the candidate right point `(yn, zn)`.
    #[allow(clippy::too_many_arguments)]
    fn eval_residual(
        &mut self,
        t1: f64,
        y0: &DVector<f64>,
        f0: &DVector<f64>,
        h: f64,
        yn: &DVector<f64>,
        zn: &DVector<f64>,
        into_pert: bool,
    ) -> Result<()> {
        self.dae.rhs(t1, yn, zn, &mut self.f_new)?;
        if self.na > 0 {
            self.dae.residual(t1, yn, zn, &mut self.g_new)?;
        }
        let out = if into_pert { &mut self.r_pert } else { &mut self.r };
        for i in 0..self.nd {
            out[i] = yn[i] - y0[i] - 0.5 * h * (f0[i] + self.f_new[i]);
        }
        for i in 0..self.na {
            out[self.nd + i] = self.g_new[i];
        }
        Ok(())
    }

    fn rebuild_jacobian(
        &mut self,
        t1: f64,
        y0: &DVector<f64>,
        f0: &DVector<f64>,
        h: f64,
        yn: &DVector<f64>,
        zn: &DVector<f64>,
    ) -> std::result::Result<(), StepReject> {
        let n = self.nd + self.na;
        self.eval_residual(t1, y0, f0, h, yn, zn, false)
            .map_err(StepReject::Hard)?;
        let base = self.r.clone();
        let mut yp = yn.clone();
        let mut zp = zn.clone();
        for j in 0..n {
            let (val, slot): (f64, &mut f64) = if j < self.nd {
                (yn[j], &mut yp[j])
            } else {
                (zn[j - self.nd], &mut zp[j - self.nd])
            };
            let d = fd_delta(val);
            *slot = val + d;
            self.eval_residual(t1, y0, f0, h, &yp, &zp, true)
                .map_err(StepReject::Hard)?;
            if j < self.nd {
                yp[j] = val;
            } else {
                zp[j - self.nd] = val;
            }
            for i in 0..n {
                self.jac[(i, j)] = (self.r_pert[i] - base[i]) / d;
            }
        }
        self.lu = Some(self.jac.clone().lu());
        self.jac_h = h;
        self.steps_since_jac = 0;
        Ok(())
    }

    fn step(
        &mut self,
        t: f64,
        y: &DVector<f64>,
        z: &DVector<f64>,
        f_left: &DVector<f64>,
        h: f64,
    ) -> std::result::Result<StepOutput, StepReject> {
        let t1 = t + h;
        // Predictor: explicit Euler on y, frozen z.
        let mut yn = y + f_left * h;
        let mut zn = z.clone();

        let stale = self.lu.is_none()
            || self.steps_since_jac > 25
            || !(0.5..=2.0).contains(&(h / self.jac_h));
        if stale {
            self.rebuild_jacobian(t1, y, f_left, h, &yn, &zn)?;
        }

        let mut rebuilt_now = stale;
        let mut converged = false;
        for _attempt in 0..2 {
            converged = false;
            for _iter in 0..12 {
                if self
                    .eval_residual(t1, y, f_left, h, &yn, &zn, false)
                    .is_err()
                {
                    break;
                }
                if self.converged(y, &yn, &zn, h) {
                    converged = true;
                    break;
                }
                let lu = self.lu.as_ref().expect("jacobian built above");
                let Some(delta) = lu.solve(&(-&self.r)) else {
                    break;
                };
                if !delta.iter().all(|v| v.is_finite()) {
                    break;
                }
                for i in 0..self.nd {
                    yn[i] += delta[i];
                }
                for i in 0..self.na {
                    zn[i] += delta[self.nd + i];
                }
            }
            if converged || rebuilt_now {
                break;
            }
            // Retry once with a fresh Jacobian from the predictor.
            yn = y + f_left * h;
            zn = z.clone();
            self.rebuild_jacobian(t1, y, f_left, h, &yn, &zn)?;
            rebuilt_now = true;
        }
        if !converged {
            self.lu = None;
            return Err(StepReject::Solver);
        }

        // f at the accepted right point is already in self.f_new thanks to
        // the converged residual evaluation.
        let f_right = self.f_new.clone();
        let mut acc = 0.0;
        for i in 0..self.nd {
            let err = 0.5 * h * (f_right[i] - f_left[i]);
            let sc = self.options.atol + self.options.rtol * y[i].abs().max(yn[i].abs());
            acc += (err / sc) * (err / sc);
        }
        let err_norm = (acc / self.nd as f64).sqrt();
        self.steps_since_jac += 1;
        Ok(StepOutput {
            y: yn,
            z: zn,
            f_right,
            err_norm,
        })
    }

    /// Newton termination: differential rows well inside the step error
    /// budget, algebraic rows below the hard algebraic tolerance.
    fn converged(&mut self, y0: &DVector<f64>, yn: &DVector<f64>, zn: &DVector<f64>, _h: f64) -> bool {
        for i in 0..self.nd {
            let sc = self.options.atol + self.options.rtol * y0[i].abs().max(yn[i].abs());
            if self.r[i].abs() > 0.03 * sc {
                return false;
            }
        }
        if self.na > 0 {
            self.dae.residual_scales(yn, zn, &mut self.scales);
            for i in 0..self.na {
                if self.r[self.nd + i].abs() > self.options.alg_tol * self.scales[i].max(1e-300) {
                    return false;
                }
            }
        }
        true
    }
}

fn scaled_inf_norm(r: &DVector<f64>, scales: &DVector<f64>) -> f64 {
    r.iter()
        .zip(scales.iter())
        .map(|(v, s)| (v / s.max(1e-300)).abs())
        .fold(0.0, f64::max)
}

fn fd_delta(value: f64) -> f64 {
    1.5e-8 * (1.0 + value.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dy/dt = -z, 0 = z - y  (equivalent to exponential decay).
    struct SlavedDecay;
    impl SemiExplicitDae for SlavedDecay {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            1
        }
        fn rhs(
            &self,
            _t: f64,
            _y: &DVector<f64>,
            z: &DVector<f64>,
            out: &mut DVector<f64>,
        ) -> crate::Result<()> {
            out[0] = -z[0];
            Ok(())
        }
        fn residual(
            &self,
            _t: f64,
            y: &DVector<f64>,
            z: &DVector<f64>,
            out: &mut DVector<f64>,
        ) -> crate::Result<()> {
            out[0] = z[0] - y[0];
            Ok(())
        }
    }

    /// dy/dt = -z with z the real root of z^3 + z = 2 y.
    struct CubicSlaved;
    impl SemiExplicitDae for CubicSlaved {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            1
        }
        fn rhs(
            &self,
            _t: f64,
            _y: &DVector<f64>,
            z: &DVector<f64>,
            out: &mut DVector<f64>,
        ) -> crate::Result<()> {
            out[0] = -z[0];
            Ok(())
        }
        fn residual(
            &self,
            _t: f64,
            y: &DVector<f64>,
            z: &DVector<f64>,
            out: &mut DVector<f64>,
        ) -> crate::Result<()> {
            out[0] = z[0] * z[0] * z[0] + z[0] - 2.0 * y[0];
            Ok(())
        }
    }

    /// Pure ODE corner case: no algebraic variables at all.
    struct PlainDecay;
    impl SemiExplicitDae for PlainDecay {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            0
        }
        fn rhs(
            &self,
            _t: f64,
            y: &DVector<f64>,
            _z: &DVector<f64>,
            out: &mut DVector<f64>,
        ) -> crate::Result<()> {
            out[0] = -y[0];
            Ok(())
        }
        fn residual(
            &self,
            _t: f64,
            _y: &DVector<f64>,
            _z: &DVector<f64>,
            _out: &mut DVector<f64>,
        ) -> crate::Result<()> {
            Ok(())
        }
    }

    /// Constant descent with an event on the slaved square.
    struct DescentWithEvent;
    impl SemiExplicitDae for DescentWithEvent {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            1
        }
        fn rhs(
            &self,
            _t: f64,
            _y: &DVector<f64>,
            _z: &DVector<f64>,
            out: &mut DVector<f64>,
        ) -> crate::Result<()> {
            out[0] = -1.0;
            Ok(())
        }
        fn residual(
            &self,
            _t: f64,
            y: &DVector<f64>,
            z: &DVector<f64>,
            out: &mut DVector<f64>,
        ) -> crate::Result<()> {
            out[0] = z[0] - y[0] * y[0];
            Ok(())
        }
        fn n_events(&self) -> usize {
            1
        }
        fn event(&self, _index: usize, _t: f64, _y: &DVector<f64>, z: &DVector<f64>) -> f64 {
            z[0] - 0.25
        }
        fn event_direction(&self, _index: usize) -> Direction {
            Direction::Falling
        }
    }

    fn run(
        dae: &dyn SemiExplicitDae,
        y0: Vec<f64>,
        z0: Vec<f64>,
        t_end: f64,
        options: &DaeOptions,
    ) -> DaeResult {
        integrate(
            dae,
            0.0,
            DVector::from_vec(y0),
            DVector::from_vec(z0),
            t_end,
            options,
            |_, _, _| {},
        )
        .unwrap()
    }

    #[test]
    fn slaved_decay_matches_the_exponential() {
        let res = run(
            &SlavedDecay,
            vec![1.0],
            vec![0.9],
            3.0,
            &DaeOptions::default(),
        );
        let exact = (-3.0f64).exp();
        assert!(
            (res.final_diff()[0] - exact).abs() < 1e-6 * exact.max(1e-6),
            "y = {}, want {exact}",
            res.final_diff()[0]
        );
        assert!((res.final_alg()[0] - res.final_diff()[0]).abs() < 1e-10);
    }

    #[test]
    fn nonlinear_algebraic_variable_stays_on_the_manifold() {
        let res = run(
            &CubicSlaved,
            vec![1.0],
            vec![1.1],
            1.0,
            &DaeOptions::default(),
        );
        for (y, z) in res.y.iter().zip(res.z.iter()) {
            let g = z[0].powi(3) + z[0] - 2.0 * y[0];
            assert!(g.abs() <= 1e-10, "drift {g:.3e}");
        }
    }

    #[test]
    fn degenerate_case_without_algebraic_variables_works() {
        let res = run(&PlainDecay, vec![2.0], vec![], 2.0, &DaeOptions::default());
        let exact = 2.0 * (-2.0f64).exp();
        assert!((res.final_diff()[0] - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn terminal_event_is_localized_on_the_algebraic_variable() {
        // y goes 1 -> 0 linearly, z = y^2 crosses 0.25 at t = 0.5.
        let res = run(
            &DescentWithEvent,
            vec![1.0],
            vec![1.0],
            2.0,
            &DaeOptions::default(),
        );
        match res.status {
            DaeStatus::Event { index: 0, t } => {
                assert!((t - 0.5).abs() < 1e-8, "event at {t}");
            }
            other => panic!("expected event, got {other:?}"),
        }
        assert!((res.final_alg()[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn consistency_projection_recovers_from_a_bad_guess() {
        let y = DVector::from_vec(vec![1.0]);
        let z = make_consistent(
            &CubicSlaved,
            0.0,
            &y,
            &DVector::from_vec(vec![5.0]),
            1e-12,
        )
        .unwrap();
        // Real root of z^3 + z = 2 is z = 1.
        assert!((z[0] - 1.0).abs() < 1e-10, "z = {}", z[0]);
    }

    #[test]
    fn tightening_the_tolerance_improves_accuracy() {
        let coarse = run(
            &SlavedDecay,
            vec![1.0],
            vec![1.0],
            3.0,
            &DaeOptions {
                rtol: 1e-4,
                atol: 1e-6,
                ..DaeOptions::default()
            },
        );
        let fine = run(
            &SlavedDecay,
            vec![1.0],
            vec![1.0],
            3.0,
            &DaeOptions {
                rtol: 1e-9,
                atol: 1e-11,
                ..DaeOptions::default()
            },
        );
        let exact = (-3.0f64).exp();
        let e_coarse = (coarse.final_diff()[0] - exact).abs();
        let e_fine = (fine.final_diff()[0] - exact).abs();
        assert!(
            e_fine < e_coarse * 1e-2,
            "coarse {e_coarse:.3e}, fine {e_fine:.3e}"
        );
    }

    #[test]
    fn validation_failures_abort_the_run() {
        struct Guarded;
        impl SemiExplicitDae for Guarded {
            fn n_diff(&self) -> usize {
                1
            }
            fn n_alg(&self) -> usize {
                0
            }
            fn rhs(
                &self,
                _t: f64,
                _y: &DVector<f64>,
                _z: &DVector<f64>,
                out: &mut DVector<f64>,
            ) -> crate::Result<()> {
                out[0] = -1.0;
                Ok(())
            }
            fn residual(
                &self,
                _t: f64,
                _y: &DVector<f64>,
                _z: &DVector<f64>,
                _out: &mut DVector<f64>,
            ) -> crate::Result<()> {
                Ok(())
            }
            fn validate(&self, _t: f64, y: &DVector<f64>, _z: &DVector<f64>) -> crate::Result<()> {
                if y[0] < 0.5 {
                    Err(crate::Error::IndexViolation {
                        t: 0.0,
                        detail: "guard tripped".into(),
                    })
                } else {
                    Ok(())
                }
            }
        }
        let err = integrate(
            &Guarded,
            0.0,
            DVector::from_vec(vec![1.0]),
            DVector::zeros(0),
            2.0,
            &DaeOptions::default(),
            |_, _, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::IndexViolation { .. }), "got {err:?}");
    }
}
