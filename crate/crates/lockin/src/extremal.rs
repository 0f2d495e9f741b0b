//! Extremization of the synchronization signal over gauge ellipsoids.
//!
//! The comparison construction repeatedly needs the extreme values of
//! `f(dtheta, domega, x)` over a sub-level set `{x : v_cc(x) <= V}`. Since
//! `f` is linear-fractional in `x` it attains its extrema on the boundary,
//! where the first-order conditions reduce to the five-equation system
//!
//! ```text
//!   x' P x - V = 0
//!   P x - lambda (s*b + H x) = 0        (denominator absorbed into lambda)
//! ```
//!
//! with `lambda > 0` at a maximizer and `lambda < 0` at a minimizer. The
//! production path is a damped Newton iteration on that system
//! ([`Extremizer::solve_kkt`]), warm-started along continuation runs and
//! cold-started from a coarse sampling oracle. The independent check path
//! ([`Extremizer::oracle`]) is brute-force sampling with projected-gradient
//! polish and never touches the Newton code.

use nalgebra::{SMatrix, SVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gauge::{singularity_clearance, Gauge};
use crate::model::{
    b_vector, eval_f, eval_f_partials, skew_coupling, CascadeModel, PllState,
};
use crate::{Error, Result};

/// Which extremum of `f` over the ellipsoid is requested.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Min,
    Max,
}

impl Sense {
    pub fn label(self) -> &'static str {
        match self {
            Sense::Min => "min",
            Sense::Max => "max",
        }
    }
}

/// A solved constrained extremum of `f` on `{v_cc = level}`.
#[derive(Clone, Copy, Debug)]
pub struct ExtremalPoint {
    pub x: Vector4<f64>,
    /// Multiplier of the absorbed stationarity condition; positive at a
    /// maximum, negative at a minimum.
    pub lambda: f64,
    pub f_value: f64,
}

/// Scaled residual tolerance of the Newton solve.
const KKT_TOL: f64 = 1e-12;
/// Newton iteration cap.
const KKT_MAX_ITER: usize = 50;
/// Sample count of the coarse cold-start oracle.
const COLD_START_SAMPLES: usize = 512;

/// Ellipsoid extremizer bound to one model and gauge.
///
/// Carries the singularity clearance so every requested level can be
/// validated against the safe range `(0, clearance)`.
pub struct Extremizer<'a> {
    model: &'a dyn CascadeModel,
    gauge: &'a Gauge,
    clearance: f64,
}

impl<'a> Extremizer<'a> {
    pub fn new(model: &'a dyn CascadeModel, gauge: &'a Gauge, eps_margin: f64) -> Result<Self> {
        let clearance = singularity_clearance(gauge, model, eps_margin)?;
        Ok(Self {
            model,
            gauge,
            clearance,
        })
    }

    pub fn clearance(&self) -> f64 {
        self.clearance
    }

    pub fn gauge(&self) -> &Gauge {
        self.gauge
    }

    pub fn model(&self) -> &'a dyn CascadeModel {
        self.model
    }

    fn check_level(&self, level: f64) -> Result<()> {
        if !(level > 0.0) || !level.is_finite() {
            return Err(Error::OutOfRange(format!(
                "ellipsoid level must be positive and finite, got {level}"
            )));
        }
        if level >= self.clearance {
            return Err(Error::LevelUnsafe {
                level,
                clearance: self.clearance,
            });
        }
        Ok(())
    }

    /// Newton solve of the stationarity system.
    ///
    /// `warm` supplies the previous solution along a continuation path; a
    /// cold start is seeded from a coarse run of the sampling oracle. The
    /// converged point must sit on the requested multiplier branch, else
    /// [`Error::WrongBranch`] is returned (callers typically re-seed).
    pub fn solve_kkt(
        &self,
        state: PllState,
        level: f64,
        sense: Sense,
        warm: Option<&ExtremalPoint>,
    ) -> Result<ExtremalPoint> {
        self.check_level(level)?;
        let seed = match warm {
            Some(w) => *w,
            None => self.coarse_seed(state, level, sense)?,
        };
        self.newton(state, level, sense, &seed)
    }

    /// Robust extremization: warm-started Newton with an oracle-seeded
    /// retry when the warm start converges to the wrong branch or stalls.
    pub fn extremize(
        &self,
        state: PllState,
        level: f64,
        sense: Sense,
        warm: Option<&ExtremalPoint>,
    ) -> Result<ExtremalPoint> {
        match self.solve_kkt(state, level, sense, warm) {
            Ok(p) => Ok(p),
            Err(Error::WrongBranch { .. }) | Err(Error::NoConvergence { .. }) => {
                let seed = self.coarse_seed(state, level, sense)?;
                self.newton(state, level, sense, &seed)
            }
            Err(e) => Err(e),
        }
    }

    /// Branch-selected comparison value: the minimum of `f` over the
    /// ellipsoid for `domega >= 0`, the maximum for `domega < 0`.
    pub fn f_star(
        &self,
        state: PllState,
        level: f64,
        warm: Option<&ExtremalPoint>,
    ) -> Result<ExtremalPoint> {
        let sense = if state.domega >= 0.0 { Sense::Min } else { Sense::Max };
        self.extremize(state, level, sense, warm)
    }

    fn coarse_seed(&self, state: PllState, level: f64, sense: Sense) -> Result<ExtremalPoint> {
        self.oracle_with(state, level, sense, COLD_START_SAMPLES, 0x5eed, 20)
    }

    /// Brute-force oracle: `n` quasi-uniform boundary samples (plus interior
    /// spot checks) refined by projected-gradient steps. Independent of the
    /// Newton path; the returned multiplier is a least-squares estimate.
    pub fn oracle(
        &self,
        state: PllState,
        level: f64,
        sense: Sense,
        n: usize,
        rng_seed: u64,
    ) -> Result<ExtremalPoint> {
        self.oracle_with(state, level, sense, n, rng_seed, 200)
    }

    fn oracle_with(
        &self,
        state: PllState,
        level: f64,
        sense: Sense,
        n: usize,
        rng_seed: u64,
        polish_iters: usize,
    ) -> Result<ExtremalPoint> {
        if level == 0.0 {
            let f_value = eval_f(self.model, state, &Vector4::zeros())?;
            return Ok(ExtremalPoint {
                x: Vector4::zeros(),
                lambda: 0.0,
                f_value,
            });
        }
        self.check_level(level)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let better = |a: f64, b: f64| match sense {
            Sense::Max => a > b,
            Sense::Min => a < b,
        };

        let mut best_x = Vector4::zeros();
        let mut best_f = f64::NAN;
        for i in 0..n.max(8) {
            let mut u = Vector4::from_fn(|_, _| standard_normal(&mut rng));
            let norm = u.norm();
            if norm == 0.0 {
                continue;
            }
            u /= norm;
            // Every eighth sample probes the interior as well; extrema of a
            // linear-fractional objective must sit on the boundary, so the
            // interior can never win by more than sampling noise.
            let scales: &[f64] = if i % 8 == 0 { &[1.0, 0.5, 0.25] } else { &[1.0] };
            for s in scales {
                let x = self.gauge.boundary_point(&u, level * s * s);
                if let Ok(f) = eval_f(self.model, state, &x) {
                    if best_f.is_nan() || better(f, best_f) {
                        best_f = f;
                        best_x = x;
                    }
                }
            }
        }
        if best_f.is_nan() {
            return Err(Error::NoConvergence {
                what: "oracle sampling",
                iterations: n,
                residual: f64::NAN,
            });
        }

        // Projected-gradient polish on the boundary: step along the signed
        // gradient (preconditioned by the inverse constraint metric, which
        // makes the ellipsoid round and keeps the contraction rate healthy),
        // rescale back onto the level set, backtrack on failure.
        let mut x = rescale_to_level(self.gauge, &best_x, level);
        let mut f = eval_f(self.model, state, &x)?;
        let dir_sign = match sense {
            Sense::Max => 1.0,
            Sense::Min => -1.0,
        };
        let mut step = 0.5;
        for _ in 0..polish_iters {
            let grad = eval_f_partials(self.model, state, &x)?.grad_x;
            let dir = self.gauge.p_inv() * grad;
            let dir_v = self.gauge.v_cc(&dir);
            if dir_v <= 0.0 {
                break;
            }
            let scale = (level / dir_v).sqrt();
            let cand = rescale_to_level(
                self.gauge,
                &(x + dir_sign * step * scale * dir),
                level,
            );
            match eval_f(self.model, state, &cand) {
                Ok(fc) if better(fc, f) => {
                    x = cand;
                    f = fc;
                    step = (step * 1.4).min(1.0);
                }
                _ => {
                    step *= 0.5;
                    if step < 1e-14 {
                        break;
                    }
                }
            }
        }

        let lambda = self.lambda_estimate(state, &x);
        Ok(ExtremalPoint {
            x,
            lambda,
            f_value: f,
        })
    }

    /// Least-squares multiplier for a point assumed stationary:
    /// `lambda = (G' P x) / (G' G)`.
    fn lambda_estimate(&self, state: PllState, x: &Vector4<f64>) -> f64 {
        let g_vec = self.grad_numerator(state, x);
        let px = self.gauge.p() * x;
        let denom = g_vec.dot(&g_vec);
        if denom > 0.0 {
            g_vec.dot(&px) / denom
        } else {
            0.0
        }
    }

    fn grad_numerator(&self, state: PllState, x: &Vector4<f64>) -> Vector4<f64> {
        let s = self.model.gradient_sign().signum();
        s * b_vector(self.model, state) + skew_coupling(self.model, state.domega) * x
    }

    fn newton(
        &self,
        state: PllState,
        level: f64,
        sense: Sense,
        seed: &ExtremalPoint,
    ) -> Result<ExtremalPoint> {
        let p = self.gauge.p();
        let s = self.model.gradient_sign().signum();
        let b = b_vector(self.model, state);
        let h_skew = skew_coupling(self.model, state.domega);

        // Start on the constraint surface; a warm start from a neighbouring
        // level is rescaled rather than trusted.
        let mut x = rescale_to_level(self.gauge, &seed.x, level);
        let mut lambda = if seed.lambda != 0.0 {
            seed.lambda
        } else {
            self.lambda_estimate(state, &x)
        };

        let residual = |x: &Vector4<f64>, lambda: f64| -> (SVector<f64, 5>, Vector4<f64>) {
            let g_vec = s * b + h_skew * x;
            let px = p * x;
            let stat = px - lambda * g_vec;
            let mut r = SVector::<f64, 5>::zeros();
            r.fixed_rows_mut::<4>(0).copy_from(&stat);
            r[4] = px.dot(x) - level;
            (r, g_vec)
        };

        let scaled_norm = |r: &SVector<f64, 5>, x: &Vector4<f64>, lambda: f64, g: &Vector4<f64>| {
            let stat_scale = (p * x).norm().max(lambda.abs() * g.norm()).max(1e-300);
            let stat = r.fixed_rows::<4>(0).norm() / stat_scale;
            let con = r[4].abs() / level;
            stat.max(con)
        };

        let (mut r, mut g_vec) = residual(&x, lambda);
        let mut rn = scaled_norm(&r, &x, lambda, &g_vec);
        for iter in 0..KKT_MAX_ITER {
            if rn <= KKT_TOL {
                let f_value = eval_f(self.model, state, &x)?;
                let branch_ok = match sense {
                    Sense::Max => lambda > 0.0,
                    Sense::Min => lambda < 0.0,
                };
                if !branch_ok {
                    return Err(Error::WrongBranch {
                        sense: sense.label(),
                        lambda,
                    });
                }
                return Ok(ExtremalPoint { x, lambda, f_value });
            }

            let mut jac = SMatrix::<f64, 5, 5>::zeros();
            jac.fixed_view_mut::<4, 4>(0, 0)
                .copy_from(&(p - lambda * h_skew));
            jac.fixed_view_mut::<4, 1>(0, 4).copy_from(&(-g_vec));
            jac.fixed_view_mut::<1, 4>(4, 0)
                .copy_from(&(2.0 * (p * x)).transpose());

            let delta = jac.lu().solve(&(-r)).ok_or(Error::NoConvergence {
                what: "stationarity solve (singular Jacobian)",
                iterations: iter,
                residual: rn,
            })?;

            // Damped update: halve until the scaled residual stops growing.
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..8 {
                let x_new = x + alpha * delta.fixed_rows::<4>(0);
                let l_new = lambda + alpha * delta[4];
                let (r_new, g_new) = residual(&x_new, l_new);
                let rn_new = scaled_norm(&r_new, &x_new, l_new, &g_new);
                if rn_new.is_finite() && (rn_new < rn || alpha < 0.2) {
                    x = x_new;
                    lambda = l_new;
                    r = r_new;
                    g_vec = g_new;
                    rn = rn_new;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::NoConvergence {
                    what: "stationarity solve",
                    iterations: iter,
                    residual: rn,
                });
            }
        }
        Err(Error::NoConvergence {
            what: "stationarity solve",
            iterations: KKT_MAX_ITER,
            residual: rn,
        })
    }
}

/// Rescale a nonzero point radially onto `{v_cc = level}`.
fn rescale_to_level(gauge: &Gauge, x: &Vector4<f64>, level: f64) -> Vector4<f64> {
    let v = gauge.v_cc(x);
    if v > 0.0 {
        x * (level / v).sqrt()
    } else {
        // Degenerate seed: fall back to an arbitrary boundary direction.
        gauge.boundary_point(&Vector4::new(1.0, 0.0, 0.0, 0.0), level)
    }
}

/// Verify the defining residuals of an extremal point; used by tests and
/// by the algebraic-consistency checks of the comparison integrator.
pub fn stationarity_residual(
    m: &dyn CascadeModel,
    gauge: &Gauge,
    state: PllState,
    level: f64,
    point: &ExtremalPoint,
) -> (f64, f64) {
    let s = m.gradient_sign().signum();
    let g_vec = s * b_vector(m, state) + skew_coupling(m, state.domega) * point.x;
    let px = gauge.p() * point.x;
    let stat = (px - point.lambda * g_vec).norm()
        / px.norm().max(point.lambda.abs() * g_vec.norm()).max(1e-300);
    let con = (gauge.v_cc(&point.x) - level).abs() / level.max(1e-300);
    (stat, con)
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout obvious.
    loop {
        let u1: f64 = rng.random::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}
