//! The comparison system: loop dynamics driven by the worst `f` over a
//! frozen block ellipsoid.
//!
//! For a fixed ellipsoid level `V`, the comparison dynamics replace the
//! actual block state by the extremum of `f` over `{v_cc <= V}` that pushes
//! the loop outward: the minimum while `domega >= 0`, the maximum while
//! `domega < 0`. Both extremal branches are carried as algebraic variables
//! (their stationarity systems are the algebraic equations), so a branch
//! switch at a `domega = 0` crossing needs no re-initialization.
//!
//! In variational mode six further differential states transport the 2x2
//! state-transition matrix and the level-sensitivity column along the
//! trajectory. Their right-hand side uses the envelope property of the
//! constrained extremum: since the constraint does not move with the loop
//! state, the partials of the extremal value are the plain partials of `f`
//! frozen at the extremal point, and its level derivative is
//! `1 / (2 lambda den^2)` in terms of the absorbed multiplier.

use nalgebra::{DVector, Matrix2, Vector2, Vector4};

use crate::dae::SemiExplicitDae;
use crate::extremal::{ExtremalPoint, Extremizer, Sense};
use crate::gauge::Gauge;
use crate::model::{
    b_vector, denominator, eval_f, eval_f_partials, skew_coupling, CascadeModel, PllState,
};
use crate::ode::Direction;
use crate::{Error, Result};

/// Escape guard: trajectories wandering this far in `dtheta` are treated as
/// runaway (the closed orbit search gives up on them).
pub const ESCAPE_DTHETA: f64 = std::f64::consts::PI + 0.5;

/// Index of the `domega = 0` crossing event.
pub const EVENT_SWITCH: usize = 0;
/// Index of the runaway guard event.
pub const EVENT_ESCAPE: usize = 1;

/// Offsets of the two branches inside the algebraic vector.
const MIN_OFF: usize = 0;
const MAX_OFF: usize = 5;
pub const N_ALG: usize = 10;

/// Comparison dynamics at one frozen ellipsoid level.
pub struct ComparisonSystem<'a> {
    model: &'a dyn CascadeModel,
    gauge: &'a Gauge,
    level: f64,
    active: Sense,
    variational: bool,
}

impl<'a> ComparisonSystem<'a> {
    pub fn new(
        model: &'a dyn CascadeModel,
        gauge: &'a Gauge,
        level: f64,
        active: Sense,
        variational: bool,
    ) -> Self {
        Self {
            model,
            gauge,
            level,
            active,
            variational,
        }
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn active(&self) -> Sense {
        self.active
    }

    pub fn set_active(&mut self, sense: Sense) {
        self.active = sense;
    }

    pub fn branch_x(z: &DVector<f64>, sense: Sense) -> Vector4<f64> {
        let off = Self::offset(sense);
        Vector4::new(z[off], z[off + 1], z[off + 2], z[off + 3])
    }

    pub fn branch_lambda(z: &DVector<f64>, sense: Sense) -> f64 {
        z[Self::offset(sense) + 4]
    }

    fn offset(sense: Sense) -> usize {
        match sense {
            Sense::Min => MIN_OFF,
            Sense::Max => MAX_OFF,
        }
    }

    /// `f` evaluated on a branch's extremal point.
    pub fn branch_f(&self, state: PllState, z: &DVector<f64>, sense: Sense) -> Result<f64> {
        eval_f(self.model, state, &Self::branch_x(z, sense))
    }

    /// Loop vector field `(dtheta_dot, domega_dot)` for a given branch.
    pub fn plane_field(&self, state: PllState, z: &DVector<f64>, sense: Sense) -> Result<Vector2<f64>> {
        let f = self.branch_f(state, z, sense)?;
        Ok(Vector2::new(
            -self.model.k_p() * f + state.domega,
            -self.model.k_i() * f,
        ))
    }

    /// Pack both solved branches into the algebraic vector.
    pub fn pack_alg(min: &ExtremalPoint, max: &ExtremalPoint) -> DVector<f64> {
        let mut z = DVector::zeros(N_ALG);
        for i in 0..4 {
            z[MIN_OFF + i] = min.x[i];
            z[MAX_OFF + i] = max.x[i];
        }
        z[MIN_OFF + 4] = min.lambda;
        z[MAX_OFF + 4] = max.lambda;
        z
    }

    /// Solve both branches from scratch and pack them.
    pub fn initial_alg(ex: &Extremizer<'_>, state: PllState, level: f64) -> Result<DVector<f64>> {
        let min = ex.extremize(state, level, Sense::Min, None)?;
        let max = ex.extremize(state, level, Sense::Max, None)?;
        Ok(Self::pack_alg(&min, &max))
    }

    /// Jump map of the variational states across a branch switch at
    /// `domega = 0`. The loop field is parallel to `(-k_p, -k_i)` on both
    /// sides there, but its magnitude jumps with `f`, so perturbations
    /// transverse to the switching line are rescaled:
    ///
    /// ```text
    ///   S = [ 1   (k_p/k_i) (f_new - f_old) / f_old ]
    ///       [ 0              f_new / f_old          ]
    /// ```
    pub fn saltation(
        &self,
        state: PllState,
        z: &DVector<f64>,
        old: Sense,
        new: Sense,
    ) -> Result<Matrix2<f64>> {
        let f_old = self.branch_f(state, z, old)?;
        let f_new = self.branch_f(state, z, new)?;
        if f_old.abs() < 1e-300 {
            return Err(Error::NoCycle {
                level: self.level,
                reason: "grazing switch: loop field vanishes on the switching line".into(),
            });
        }
        let df = f_new - f_old;
        Ok(Matrix2::new(
            1.0,
            self.model.k_p() / self.model.k_i() * df / f_old,
            0.0,
            f_new / f_old,
        ))
    }
}

impl SemiExplicitDae for ComparisonSystem<'_> {
    fn n_diff(&self) -> usize {
        if self.variational {
            8
        } else {
            2
        }
    }

    fn n_alg(&self) -> usize {
        N_ALG
    }

    fn rhs(
        &self,
        _t: f64,
        y: &DVector<f64>,
        z: &DVector<f64>,
        out: &mut DVector<f64>,
    ) -> Result<()> {
        let state = PllState::new(y[0], y[1]);
        let x = Self::branch_x(z, self.active);
        let k_p = self.model.k_p();
        let k_i = self.model.k_i();

        if !self.variational {
            let f = eval_f(self.model, state, &x)?;
            out[0] = -k_p * f + state.domega;
            out[1] = -k_i * f;
            return Ok(());
        }

        let parts = eval_f_partials(self.model, state, &x)?;
        let f = eval_f(self.model, state, &x)?;
        out[0] = -k_p * f + state.domega;
        out[1] = -k_i * f;

        // Loop Jacobian with the extremal point frozen (envelope property).
        let jac = Matrix2::new(
            -k_p * parts.f_dtheta,
            1.0 - k_p * parts.f_domega,
            -k_i * parts.f_dtheta,
            -k_i * parts.f_domega,
        );
        // Columns of the state-transition matrix.
        let m1 = jac * Vector2::new(y[2], y[3]);
        let m2 = jac * Vector2::new(y[4], y[5]);
        out[2] = m1[0];
        out[3] = m1[1];
        out[4] = m2[0];
        out[5] = m2[1];

        // Level sensitivity of the extremal value via the absorbed
        // multiplier: d f* / d level = 1 / (2 lambda den^2).
        let lambda = Self::branch_lambda(z, self.active);
        let den = denominator(self.model, &x)?;
        let dfdv = 1.0 / (2.0 * lambda * den * den);
        let wdot = jac * Vector2::new(y[6], y[7]) + Vector2::new(-k_p, -k_i) * dfdv;
        out[6] = wdot[0];
        out[7] = wdot[1];
        Ok(())
    }

    fn residual(
        &self,
        _t: f64,
        y: &DVector<f64>,
        z: &DVector<f64>,
        out: &mut DVector<f64>,
    ) -> Result<()> {
        let state = PllState::new(y[0], y[1]);
        let s = self.model.gradient_sign().signum();
        let b = b_vector(self.model, state);
        let h_skew = skew_coupling(self.model, state.domega);
        let p = self.gauge.p();
        for sense in [Sense::Min, Sense::Max] {
            let off = Self::offset(sense);
            let x = Self::branch_x(z, sense);
            let lambda = z[off + 4];
            let n_vec = s * b + h_skew * x;
            let px = p * x;
            let stat = px - lambda * n_vec;
            for i in 0..4 {
                out[off + i] = stat[i];
            }
            out[off + 4] = px.dot(&x) - self.level;
        }
        Ok(())
    }

    fn residual_scales(&self, _y: &DVector<f64>, z: &DVector<f64>, out: &mut DVector<f64>) {
        let p = self.gauge.p();
        for sense in [Sense::Min, Sense::Max] {
            let off = Self::offset(sense);
            let x = Self::branch_x(z, sense);
            let scale = (p * x).norm().max(1e-300);
            for i in 0..4 {
                out[off + i] = scale;
            }
            out[off + 4] = self.level.max(1e-300);
        }
    }

    fn n_events(&self) -> usize {
        2
    }

    fn event(&self, index: usize, _t: f64, y: &DVector<f64>, _z: &DVector<f64>) -> f64 {
        match index {
            EVENT_SWITCH => y[1],
            _ => y[0].abs() - ESCAPE_DTHETA,
        }
    }

    fn event_direction(&self, index: usize) -> Direction {
        match index {
            EVENT_SWITCH => Direction::Any,
            _ => Direction::Rising,
        }
    }

    fn validate(&self, t: f64, _y: &DVector<f64>, z: &DVector<f64>) -> Result<()> {
        let l_min = Self::branch_lambda(z, Sense::Min);
        let l_max = Self::branch_lambda(z, Sense::Max);
        if !(l_min < 0.0) {
            return Err(Error::WrongBranch {
                sense: "min",
                lambda: l_min,
            });
        }
        if !(l_max > 0.0) {
            return Err(Error::WrongBranch {
                sense: "max",
                lambda: l_max,
            });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::IndexViolation {
                t,
                detail: "non-finite algebraic state".into(),
            });
        }
        Ok(())
    }
}
