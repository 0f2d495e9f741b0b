//! Cascade model of a grid-following inverter near its locked equilibrium.
//!
//! The plant is the error dynamics of a PI current controller feeding a
//! synchronous-reference-frame PLL:
//!
//! ```text
//!   x'      = A x                                   (current-control block)
//!   dtheta' = -k_p f(dtheta, domega, x) + domega    (phase error)
//!   domega' = -k_i f(dtheta, domega, x)             (frequency-integrator error)
//!
//!   f = (g(dtheta, domega) - h(domega)' x) / (mu - nu' x)
//! ```
//!
//! with `A` Hurwitz, `g(0, 0) = 0` and `mu != 0`, so the origin is the locked
//! equilibrium. `f` is the negated q-axis voltage seen by the PLL, whose
//! rational form comes from the algebraic loop between the measured voltage
//! and the frequency estimate that multiplies it (see `docs/model.md` for the
//! complete derivation of the default model). Everything downstream of this
//! module only touches the abstract quantities of [`CascadeModel`], so other
//! plants with the same structure plug in directly.
//!
//! The gradient of `f` with respect to `x` is
//!
//! ```text
//!   grad_x f = (s*b + H x) / (mu - nu' x)^2,   b = mu*h - g*nu,
//!                                              H = h nu' - nu h'   (skew)
//! ```
//!
//! where the sign `s` of the `b` term is deliberately left as a switch: the
//! hand derivation gives `s = -1`, but both candidates are implemented and a
//! central-finite-difference gate ([`resolve_gradient_sign`]) picks the one
//! that matches, hard-failing if neither does. The default model runs the
//! gate once at construction.

use nalgebra::{Complex, Matrix2, Matrix4, Vector2, Vector4};

use crate::{Error, Result};

/// Relative floor on the synchronization denominator: evaluations with
/// `|mu - nu'x| < DENOM_FLOOR_REL * |mu|` are refused rather than returned
/// as garbage.
pub const DENOM_FLOOR_REL: f64 = 1e-9;

/// Relative tolerance the finite-difference gate demands of the winning
/// gradient candidate.
pub const GRADIENT_GATE_TOL: f64 = 1e-6;

/// Phase-lock block state: phase error (rad) and frequency-integrator error
/// (rad/s) relative to the locked equilibrium.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PllState {
    pub dtheta: f64,
    pub domega: f64,
}

impl PllState {
    pub fn new(dtheta: f64, domega: f64) -> Self {
        Self { dtheta, domega }
    }

    /// Euclidean norm of the (dtheta, domega) pair.
    pub fn norm(&self) -> f64 {
        self.dtheta.hypot(self.domega)
    }
}

/// Sign applied to the `b` vector in the gradient numerator `s*b + H x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientSign {
    /// `grad_x f = (-b + H x) / den^2` — the hand-derived quotient rule.
    MinusB,
    /// `grad_x f = (+b + H x) / den^2` — the opposite candidate.
    PlusB,
}

impl GradientSign {
    pub fn signum(self) -> f64 {
        match self {
            GradientSign::MinusB => -1.0,
            GradientSign::PlusB => 1.0,
        }
    }
}

/// Abstract cascade: a linear block `x' = Ax` disturbing a two-state PLL
/// through the rational coupling `f`.
///
/// Implementations must guarantee `g(0,0) = 0` (exactly, so the origin is an
/// equilibrium in floating point too) and `mu != 0`.
pub trait CascadeModel: Send + Sync {
    /// System matrix of the current-control error block (must be Hurwitz).
    fn a_matrix(&self) -> &Matrix4<f64>;

    /// PLL proportional gain.
    fn k_p(&self) -> f64;

    /// PLL integral gain.
    fn k_i(&self) -> f64;

    /// Constant part of the coupling denominator.
    fn mu(&self) -> f64;

    /// State-dependent part of the coupling denominator.
    fn nu(&self) -> &Vector4<f64>;

    /// Disturbance-free coupling numerator; `g(0,0) = 0`.
    fn g(&self, dtheta: f64, domega: f64) -> f64;

    /// Partial of `g` in `dtheta`.
    fn g_dtheta(&self, dtheta: f64, domega: f64) -> f64;

    /// Partial of `g` in `domega`.
    fn g_domega(&self, dtheta: f64, domega: f64) -> f64;

    /// Coupling vector of the current-control state into the numerator.
    fn h(&self, domega: f64) -> Vector4<f64>;

    /// Derivative of `h` with respect to `domega`.
    fn h_prime(&self, domega: f64) -> Vector4<f64>;

    /// Resolved sign of the `b` term in the gradient numerator.
    ///
    /// Constructors are expected to run [`resolve_gradient_sign`] once and
    /// cache the outcome.
    fn gradient_sign(&self) -> GradientSign;
}

/// Partials of `f` at a single evaluation point.
#[derive(Clone, Copy, Debug)]
pub struct FPartials {
    pub f_dtheta: f64,
    pub f_domega: f64,
    pub grad_x: Vector4<f64>,
}

/// Denominator `mu - nu'x`, refused near the singular hyperplane.
pub fn denominator(m: &dyn CascadeModel, x: &Vector4<f64>) -> Result<f64> {
    let den = m.mu() - m.nu().dot(x);
    let floor = DENOM_FLOOR_REL * m.mu().abs();
    if den.abs() < floor {
        return Err(Error::SingularDenominator {
            x: [x[0], x[1], x[2], x[3]],
            value: den.abs(),
            floor,
        });
    }
    Ok(den)
}

/// Synchronization signal `f(dtheta, domega, x)`.
pub fn eval_f(m: &dyn CascadeModel, state: PllState, x: &Vector4<f64>) -> Result<f64> {
    let den = denominator(m, x)?;
    let num = m.g(state.dtheta, state.domega) - m.h(state.domega).dot(x);
    Ok(num / den)
}

/// `b = mu*h(domega) - g(dtheta, domega)*nu`.
pub fn b_vector(m: &dyn CascadeModel, state: PllState) -> Vector4<f64> {
    m.mu() * m.h(state.domega) - m.g(state.dtheta, state.domega) * m.nu()
}

/// Partial of `b` in `dtheta`: `-g_dtheta * nu`.
pub fn b_vector_dtheta(m: &dyn CascadeModel, state: PllState) -> Vector4<f64> {
    -m.g_dtheta(state.dtheta, state.domega) * m.nu()
}

/// Partial of `b` in `domega`: `mu*h' - g_domega * nu`.
pub fn b_vector_domega(m: &dyn CascadeModel, state: PllState) -> Vector4<f64> {
    m.mu() * m.h_prime(state.domega) - m.g_domega(state.dtheta, state.domega) * m.nu()
}

/// `H = h nu' - nu h'`; exactly skew-symmetric by construction.
pub fn skew_coupling(m: &dyn CascadeModel, domega: f64) -> Matrix4<f64> {
    let h = m.h(domega);
    let nu = m.nu();
    h * nu.transpose() - nu * h.transpose()
}

/// Numerator of `grad_x f` with the model's resolved sign: `s*b + H x`.
pub fn grad_numerator(m: &dyn CascadeModel, state: PllState, x: &Vector4<f64>) -> Vector4<f64> {
    grad_numerator_with(m, state, x, m.gradient_sign())
}

/// Numerator of `grad_x f` for an explicit sign candidate.
pub fn grad_numerator_with(
    m: &dyn CascadeModel,
    state: PllState,
    x: &Vector4<f64>,
    sign: GradientSign,
) -> Vector4<f64> {
    sign.signum() * b_vector(m, state) + skew_coupling(m, state.domega) * x
}

/// All first partials of `f` at `(state, x)`, using the model's resolved
/// gradient sign.
pub fn eval_f_partials(m: &dyn CascadeModel, state: PllState, x: &Vector4<f64>) -> Result<FPartials> {
    let den = denominator(m, x)?;
    let f_dtheta = m.g_dtheta(state.dtheta, state.domega) / den;
    let f_domega = (m.g_domega(state.dtheta, state.domega) - m.h_prime(state.domega).dot(x)) / den;
    let grad_x = grad_numerator(m, state, x) / (den * den);
    Ok(FPartials {
        f_dtheta,
        f_domega,
        grad_x,
    })
}

/// Right-hand side of the full six-state cascade: returns
/// `((dtheta', domega'), x')`.
pub fn eval_rhs_full(
    m: &dyn CascadeModel,
    state: PllState,
    x: &Vector4<f64>,
) -> Result<(Vector2<f64>, Vector4<f64>)> {
    let f = eval_f(m, state, x)?;
    let pll = Vector2::new(-m.k_p() * f + state.domega, -m.k_i() * f);
    Ok((pll, m.a_matrix() * x))
}

/// Decide the gradient sign by central finite differences of `eval_f`.
///
/// Trial points are deterministic: a fixed stencil of PLL states and
/// current-error vectors scaled to the model's own magnitudes. The winning
/// candidate must match to [`GRADIENT_GATE_TOL`] relative error; if neither
/// candidate does, construction must abort rather than continue with an
/// unverified gradient.
pub fn resolve_gradient_sign(m: &dyn CascadeModel) -> Result<GradientSign> {
    let x_scale = probe_scale(m);
    let probes = [
        (PllState::new(0.3, 0.05), Vector4::new(0.4, -0.2, 0.1, 0.3)),
        (PllState::new(-0.7, -0.01), Vector4::new(-0.3, 0.5, -0.4, 0.2)),
        (PllState::new(1.1, 0.02), Vector4::new(0.2, 0.1, 0.6, -0.5)),
        (PllState::new(0.0, 0.0), Vector4::new(-0.6, -0.1, 0.2, 0.4)),
        (PllState::new(2.0, -0.08), Vector4::new(0.1, 0.7, -0.2, -0.3)),
    ];

    let mut worst = [0.0f64; 2]; // [MinusB, PlusB]
    for (state, dir) in &probes {
        let x = dir * x_scale;
        let fd = fd_gradient(m, *state, &x)?;
        let den = denominator(m, &x)?;
        let scale = fd.norm().max(1e-12);
        for (k, sign) in [GradientSign::MinusB, GradientSign::PlusB].into_iter().enumerate() {
            let analytic = grad_numerator_with(m, *state, &x, sign) / (den * den);
            let rel = (analytic - fd).norm() / scale;
            worst[k] = worst[k].max(rel);
        }
    }

    match (worst[0] <= GRADIENT_GATE_TOL, worst[1] <= GRADIENT_GATE_TOL) {
        (true, false) => Ok(GradientSign::MinusB),
        (false, true) => Ok(GradientSign::PlusB),
        // Both passing can only happen when b is (numerically) zero and the
        // sign is immaterial; keep the hand-derived convention.
        (true, true) => Ok(GradientSign::MinusB),
        (false, false) => Err(Error::GradientGateFailed {
            mismatch_neg: worst[0],
            mismatch_pos: worst[1],
        }),
    }
}

/// A current-error magnitude at which `f` stays well conditioned for
/// finite differencing: the disturbance term `h'x` is kept comparable to
/// the phase term, and the denominator far from singular.
pub fn probe_scale(m: &dyn CascadeModel) -> f64 {
    let h_norm = m.h(0.0).norm();
    let g_scale = m.g_dtheta(0.0, 0.0).abs().max(1e-6);
    let mut scale = if h_norm > 0.0 { g_scale / (10.0 * h_norm) } else { 1.0 };
    let nu_norm = m.nu().norm();
    if nu_norm > 0.0 {
        scale = scale.min(0.05 * m.mu().abs() / nu_norm);
    }
    scale
}

/// Central finite-difference gradient of `f` in `x` (step per component
/// scaled to the component magnitude).
pub fn fd_gradient(m: &dyn CascadeModel, state: PllState, x: &Vector4<f64>) -> Result<Vector4<f64>> {
    let mut grad = Vector4::zeros();
    for k in 0..4 {
        let step = 1e-6 * (1.0 + x[k].abs());
        let mut xp = *x;
        let mut xm = *x;
        xp[k] += step;
        xm[k] -= step;
        grad[k] = (eval_f(m, state, &xp)? - eval_f(m, state, &xm)?) / (2.0 * step);
    }
    Ok(grad)
}

/// Linearization report of the disturbance-free PLL at the origin.
#[derive(Clone, Debug)]
pub struct OscillationReport {
    pub jacobian: Matrix2<f64>,
    pub eigenvalues: [Complex<f64>; 2],
    /// True iff the eigenvalues are strictly complex with negative real part.
    pub pass: bool,
}

/// Check that the locked equilibrium is an oscillatory sink: the PLL block
/// linearized at the origin (with `x = 0`) must have a complex-conjugate
/// eigenvalue pair in the open left half plane. Real eigenvalues mean the
/// lock is overdamped and the limit-cycle construction does not apply.
pub fn check_oscillatory(m: &dyn CascadeModel) -> Result<OscillationReport> {
    let origin = Vector4::zeros();
    let p = eval_f_partials(m, PllState::new(0.0, 0.0), &origin)?;
    let j = Matrix2::new(
        -m.k_p() * p.f_dtheta,
        1.0 - m.k_p() * p.f_domega,
        -m.k_i() * p.f_dtheta,
        -m.k_i() * p.f_domega,
    );
    let (eigenvalues, pass) = classify_jacobian(&j);
    Ok(OscillationReport {
        jacobian: j,
        eigenvalues,
        pass,
    })
}

/// Eigenvalues of a 2x2 Jacobian and whether they form an oscillatory sink
/// (strictly complex, strictly stable).
pub fn classify_jacobian(j: &Matrix2<f64>) -> ([Complex<f64>; 2], bool) {
    let tr = j.trace();
    let det = j.determinant();
    let disc = tr * tr - 4.0 * det;
    if disc < 0.0 {
        let re = 0.5 * tr;
        let im = 0.5 * (-disc).sqrt();
        ([Complex::new(re, im), Complex::new(re, -im)], re < 0.0)
    } else {
        let s = disc.sqrt();
        (
            [
                Complex::new(0.5 * (tr + s), 0.0),
                Complex::new(0.5 * (tr - s), 0.0),
            ],
            false,
        )
    }
}

/// Physical and control parameters of the default grid-following inverter.
///
/// All impedances, gains, the grid frequency and the voltage magnitude must
/// be strictly positive; the current setpoint is unrestricted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverterParams {
    /// Current-control proportional gain (V/A).
    pub kappa_p: f64,
    /// Current-control integral gain (V/(A s)).
    pub kappa_i: f64,
    /// PLL proportional gain ((rad/s)/V).
    pub k_p: f64,
    /// PLL integral gain ((rad/s^2)/V).
    pub k_i: f64,
    /// Converter-side filter inductance (H).
    pub l_f: f64,
    /// Converter-side filter resistance (Ohm).
    pub r_f: f64,
    /// Grid-side inductance (H).
    pub l_g: f64,
    /// Grid-side resistance (Ohm).
    pub r_g: f64,
    /// Grid angular frequency (rad/s).
    pub omega_g: f64,
    /// Grid voltage magnitude (V).
    pub v_g: f64,
    /// Current setpoint in the controller frame, (d, q) components (A).
    pub i_ref: [f64; 2],
}

impl InverterParams {
    /// Slow PLL tuning (proportional 3e-4, integral 1e-4).
    pub fn version_i() -> Self {
        Self {
            kappa_p: 1e-2,
            kappa_i: 1.0,
            k_p: 3e-4,
            k_i: 1e-4,
            l_f: 1e-3,
            r_f: 4e-4,
            l_g: 2e-3,
            r_g: 6e-4,
            omega_g: 100.0 * std::f64::consts::PI,
            v_g: 325.0,
            i_ref: [10.0, 0.0],
        }
    }

    /// Fast PLL tuning (proportional 3e-3, integral 1e-2); identical plant.
    pub fn version_ii() -> Self {
        Self {
            k_p: 3e-3,
            k_i: 1e-2,
            ..Self::version_i()
        }
    }

    /// Look a preset up by its configuration name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "version-I" => Some(Self::version_i()),
            "version-II" => Some(Self::version_ii()),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let named = [
            ("kappa_p", self.kappa_p),
            ("kappa_i", self.kappa_i),
            ("k_p", self.k_p),
            ("k_i", self.k_i),
            ("l_f", self.l_f),
            ("r_f", self.r_f),
            ("l_g", self.l_g),
            ("r_g", self.r_g),
            ("omega_g", self.omega_g),
            ("v_g", self.v_g),
        ];
        for (name, value) in named {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::ModelInvalid(format!(
                    "parameter {name} must be positive and finite, got {value}"
                )));
            }
        }
        if !self.i_ref.iter().all(|v| v.is_finite()) {
            return Err(Error::ModelInvalid("current setpoint must be finite".into()));
        }
        Ok(())
    }
}

/// Default inverter cascade; see `docs/model.md` for the derivation and
/// the accessor methods for every intermediate quantity.
#[derive(Clone, Debug)]
pub struct InverterModel {
    params: InverterParams,
    a: Matrix4<f64>,
    mu: f64,
    nu: Vector4<f64>,
    /// h(domega) = h0 + domega * h_slope.
    h0: Vector4<f64>,
    h_slope: Vector4<f64>,
    sin_delta: f64,
    cos_delta: f64,
    sign: GradientSign,
}

/// Build the default model: derive the locked equilibrium, assemble the
/// cascade quantities, verify the structural contract (`A` Hurwitz,
/// `mu != 0`, equilibrium feasible) and resolve the gradient sign.
pub fn default_inverter_model(params: InverterParams) -> Result<InverterModel> {
    params.validate()?;
    let p = &params;
    let l_t = p.l_f + p.l_g;
    let r_t = p.r_f + p.r_g;

    // Locked equilibrium: the PLL regulates the q-axis voltage at the
    // coupling point to zero, which sits at angle delta ahead of the grid
    // source because of the grid-side impedance drop.
    let sin_delta = (p.r_g * p.i_ref[1] + p.omega_g * p.l_g * p.i_ref[0]) / p.v_g;
    if !(sin_delta.abs() < 1.0) {
        return Err(Error::ModelInvalid(format!(
            "no locked equilibrium: required q-axis drop {:.3e} exceeds the grid voltage",
            sin_delta * p.v_g
        )));
    }
    let cos_delta = (1.0 - sin_delta * sin_delta).sqrt();

    let mu = 1.0 - p.k_p * p.l_g * p.i_ref[0];
    if mu.abs() < 1e-12 {
        return Err(Error::ModelInvalid(
            "denominator constant mu is zero: PLL gain times grid reactance drop hits unity".into(),
        ));
    }

    // Current-control error block, (e_d, e_q, xi_d, xi_q) ordering.
    let alpha = (p.kappa_p + r_t) / l_t;
    let beta = p.kappa_i / l_t;
    #[rustfmt::skip]
    let a = Matrix4::new(
        -alpha, 0.0, -beta, 0.0,
        0.0, -alpha, 0.0, -beta,
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    );
    let abscissa = spectral_abscissa(&a);
    if abscissa >= 0.0 {
        return Err(Error::ModelInvalid(format!(
            "current-control block is not Hurwitz (spectral abscissa {abscissa:.3e})"
        )));
    }

    let rho = (p.r_g * p.l_f - p.r_f * p.l_g) / l_t;
    let h0 = Vector4::new(
        -p.omega_g * p.l_g,
        (p.l_g / l_t) * p.kappa_p - rho,
        0.0,
        (p.l_g / l_t) * p.kappa_i,
    );
    let h_slope = Vector4::new(-p.l_g, 0.0, 0.0, 0.0);
    let nu = Vector4::new(-p.k_p * p.l_g, 0.0, 0.0, 0.0);

    let mut model = InverterModel {
        params,
        a,
        mu,
        nu,
        h0,
        h_slope,
        sin_delta,
        cos_delta,
        sign: GradientSign::MinusB,
    };
    model.sign = resolve_gradient_sign(&model)?;
    Ok(model)
}

/// Largest real part over the eigenvalues of a real 4x4 matrix.
pub fn spectral_abscissa(a: &Matrix4<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

impl InverterModel {
    pub fn params(&self) -> &InverterParams {
        &self.params
    }

    /// Combined inductance seen by the current loop (H).
    pub fn l_total(&self) -> f64 {
        self.params.l_f + self.params.l_g
    }

    /// Combined resistance seen by the current loop (Ohm).
    pub fn r_total(&self) -> f64 {
        self.params.r_f + self.params.r_g
    }

    /// Impedance-asymmetry coefficient `(r_g l_f - r_f l_g) / (l_f + l_g)`.
    pub fn rho(&self) -> f64 {
        (self.params.r_g * self.params.l_f - self.params.r_f * self.params.l_g) / self.l_total()
    }

    /// Sine of the equilibrium lock angle.
    pub fn sin_delta(&self) -> f64 {
        self.sin_delta
    }

    /// Cosine of the equilibrium lock angle.
    pub fn cos_delta(&self) -> f64 {
        self.cos_delta
    }

    /// Equilibrium lock angle between the measured voltage and the grid
    /// source (rad).
    pub fn equilibrium_angle(&self) -> f64 {
        self.sin_delta.atan2(self.cos_delta)
    }

    /// Equilibrium value of the current-control integrator, (d, q) (V s).
    pub fn xi_equilibrium(&self) -> Vector2<f64> {
        Vector2::new(
            self.r_total() * self.params.i_ref[0] / self.params.kappa_i,
            self.r_total() * self.params.i_ref[1] / self.params.kappa_i,
        )
    }
}

impl CascadeModel for InverterModel {
    fn a_matrix(&self) -> &Matrix4<f64> {
        &self.a
    }

    fn k_p(&self) -> f64 {
        self.params.k_p
    }

    fn k_i(&self) -> f64 {
        self.params.k_i
    }

    fn mu(&self) -> f64 {
        self.mu
    }

    fn nu(&self) -> &Vector4<f64> {
        &self.nu
    }

    /// `g = v_g [sin(dtheta) cos(delta) + (cos(dtheta) - 1) sin(delta)]
    ///      - domega l_g i_ref_d`; the grouped form keeps `g(0,0)` an exact
    /// floating-point zero.
    fn g(&self, dtheta: f64, domega: f64) -> f64 {
        let (s, c) = dtheta.sin_cos();
        self.params.v_g * (s * self.cos_delta + (c - 1.0) * self.sin_delta)
            - domega * self.params.l_g * self.params.i_ref[0]
    }

    fn g_dtheta(&self, dtheta: f64, _domega: f64) -> f64 {
        let (s, c) = dtheta.sin_cos();
        self.params.v_g * (c * self.cos_delta - s * self.sin_delta)
    }

    fn g_domega(&self, _dtheta: f64, _domega: f64) -> f64 {
        -self.params.l_g * self.params.i_ref[0]
    }

    fn h(&self, domega: f64) -> Vector4<f64> {
        self.h0 + domega * self.h_slope
    }

    fn h_prime(&self, _domega: f64) -> Vector4<f64> {
        self.h_slope
    }

    fn gradient_sign(&self) -> GradientSign {
        self.sign
    }
}
