//! Quadratic gauge for the current-control error block.
//!
//! For a Hurwitz `A`, the builder picks a decay rate `gamma` at a configured
//! fraction of the spectral abscissa and solves the shifted Lyapunov equation
//!
//! ```text
//!   (A + gamma/2 I)' P + P (A + gamma/2 I) = -I
//! ```
//!
//! so that `V_cc(x) = x' P x` obeys `dV_cc/dt <= -gamma V_cc` along
//! `x' = Ax` — by construction `A'P + PA + gamma P = -I`. Sub-level sets of
//! `V_cc` are the ellipsoids over which the synchronization disturbance is
//! extremized downstream, and `gamma` is the contraction rate that the
//! final budget ODE divides by.

use nalgebra::{Cholesky, Matrix4, SMatrix, SVector, Vector4};

use crate::model::{spectral_abscissa, CascadeModel};
use crate::{Error, Result};

/// Quadratic gauge `V_cc(x) = x' P x` with certified decay rate `gamma`.
#[derive(Clone, Debug)]
pub struct Gauge {
    p: Matrix4<f64>,
    p_inv: Matrix4<f64>,
    /// Lower Cholesky factor, `P = L L'`.
    chol_l: Matrix4<f64>,
    gamma: f64,
}

impl Gauge {
    pub fn p(&self) -> &Matrix4<f64> {
        &self.p
    }

    pub fn p_inv(&self) -> &Matrix4<f64> {
        &self.p_inv
    }

    /// Lower-triangular `L` with `P = L L'`; maps the unit ball onto the
    /// unit sub-level set via `x = L^{-T} u`.
    pub fn cholesky_l(&self) -> &Matrix4<f64> {
        &self.chol_l
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Gauge value `x' P x`.
    pub fn v_cc(&self, x: &Vector4<f64>) -> f64 {
        (self.p * x).dot(x)
    }

    /// Map a unit-sphere direction onto the boundary of `{v_cc <= level}`.
    pub fn boundary_point(&self, unit: &Vector4<f64>, level: f64) -> Vector4<f64> {
        let y = level.sqrt() * unit;
        self.chol_l
            .transpose()
            .solve_upper_triangular(&y)
            .expect("Cholesky factor is nonsingular")
    }

    /// Largest value of `w' x` over `{v_cc(x) <= level}`:
    /// `sqrt(level * w' P^-1 w)`.
    pub fn max_linear_on_level(&self, w: &Vector4<f64>, level: f64) -> f64 {
        (level * (self.p_inv * w).dot(w)).max(0.0).sqrt()
    }
}

/// Build the gauge for a Hurwitz matrix.
///
/// `margin` in (0, 1) is the fraction of the spectral abscissa *not* claimed
/// as decay rate: `gamma = 2 (1 - margin) |max Re eig(A)|`. Larger margins
/// give slacker rates but better conditioned `P`.
pub fn build_gauge(a: &Matrix4<f64>, margin: f64) -> Result<Gauge> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "gauge margin must lie strictly between 0 and 1, got {margin}"
        )));
    }
    let abscissa = spectral_abscissa(a);
    if abscissa >= 0.0 {
        return Err(Error::NotHurwitz { abscissa });
    }
    let gamma = 2.0 * (1.0 - margin) * abscissa.abs();
    let shifted = a + Matrix4::identity() * (0.5 * gamma);

    let p = solve_lyapunov_identity(&shifted)?;
    // Symmetrize: the linear solve leaves O(eps) asymmetry.
    let p = 0.5 * (p + p.transpose());

    let chol = Cholesky::new(p).ok_or_else(|| {
        Error::GaugeInfeasible("Lyapunov solution is not positive definite".into())
    })?;
    let p_inv = chol.inverse();

    // Certificate: A'P + PA + gamma P must be negative definite. The
    // construction makes it -I, so this only guards against a badly
    // conditioned solve.
    let m = a.transpose() * p + p * a + gamma * p;
    let worst = nalgebra::SymmetricEigen::new(0.5 * (m + m.transpose()))
        .eigenvalues
        .max();
    if worst >= 0.0 {
        return Err(Error::GaugeInfeasible(format!(
            "decay certificate failed: max eigenvalue {worst:.3e}"
        )));
    }

    Ok(Gauge {
        p,
        p_inv,
        chol_l: chol.l(),
        gamma,
    })
}

/// Solve `M' P + P M = -I` for symmetric `P` by Kronecker vectorization
/// (the state space is only 4-dimensional, so the dense 16x16 solve is
/// exact and cheap).
fn solve_lyapunov_identity(m: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let eye = Matrix4::<f64>::identity();
    let mt = m.transpose();
    let k: SMatrix<f64, 16, 16> = eye.kronecker(&mt) + mt.kronecker(&eye);
    let rhs = SVector::<f64, 16>::from_column_slice((-eye).as_slice());
    let lu = k.lu();
    let vec_p = lu
        .solve(&rhs)
        .ok_or_else(|| Error::GaugeInfeasible("singular Lyapunov operator".into()))?;
    Ok(Matrix4::from_column_slice(vec_p.as_slice()))
}

/// Largest safe sub-level: the ellipsoid `{v_cc <= level}` keeps the
/// synchronization denominator at least `eps_margin` away (relatively) from
/// zero for every `level` below the returned clearance. A model with
/// `nu = 0` is never singular and gets `+inf`.
pub fn singularity_clearance(gauge: &Gauge, m: &dyn CascadeModel, eps_margin: f64) -> Result<f64> {
    if !(eps_margin > 0.0 && eps_margin < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "eps_margin must lie strictly between 0 and 1, got {eps_margin}"
        )));
    }
    let nu = m.nu();
    let quad = (gauge.p_inv * nu).dot(nu);
    if quad <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let reach = (1.0 - eps_margin) * m.mu();
    Ok(reach * reach / quad)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_inverter_model, InverterParams};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_case_reproduces_the_identity_gauge() {
        let g = build_gauge(&(-Matrix4::identity()), 0.5).unwrap();
        assert_relative_eq!(g.gamma(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(*g.p(), Matrix4::identity(), max_relative = 1e-12);
    }

    #[test]
    fn diagonal_case_matches_the_closed_form() {
        let a = Matrix4::from_diagonal(&Vector4::new(-1.0, -2.0, -3.0, -4.0));
        let g = build_gauge(&a, 0.5).unwrap();
        assert_relative_eq!(g.gamma(), 1.0, max_relative = 1e-14);
        for (k, ak) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            assert_relative_eq!(g.p()[(k, k)], 1.0 / (2.0 * ak - 1.0), max_relative = 1e-12);
        }
    }

    #[test]
    fn rejects_non_hurwitz_input() {
        let a = Matrix4::from_diagonal(&Vector4::new(-1.0, -2.0, 0.5, -4.0));
        assert!(matches!(
            build_gauge(&a, 0.5),
            Err(Error::NotHurwitz { .. })
        ));
    }

    #[test]
    fn rejects_bad_margin() {
        let a = -Matrix4::<f64>::identity();
        assert!(matches!(build_gauge(&a, 0.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(build_gauge(&a, 1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn certificate_holds_for_random_hurwitz_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let b = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let shift = spectral_abscissa(&b) + rng.random_range(0.1..2.0);
            let a = b - Matrix4::identity() * shift;
            let g = build_gauge(&a, 0.5).expect("shifted matrix is Hurwitz");

            let m = a.transpose() * g.p() + g.p() * a + g.gamma() * g.p();
            let worst = nalgebra::SymmetricEigen::new(0.5 * (m + m.transpose()))
                .eigenvalues
                .max();
            assert!(worst < 0.0, "certificate violated: {worst:.3e}");
            // By construction the certificate matrix is -I.
            assert_relative_eq!(m, -Matrix4::identity(), epsilon = 1e-8);
        }
    }

    #[test]
    fn gauge_decays_at_rate_gamma_along_trajectories() {
        let m = default_inverter_model(InverterParams::version_i()).unwrap();
        let a = *m.a_matrix();
        let g = build_gauge(&a, 0.5).unwrap();

        // Fixed-step RK4 on x' = Ax, fine enough that time-integration error
        // is far below the decay tolerance.
        let mut x = Vector4::new(3.0, -2.0, 1.5, 4.0);
        let dt = 1e-4;
        let rk4 = |x: &Vector4<f64>| -> Vector4<f64> {
            let k1 = a * x;
            let k2 = a * (x + 0.5 * dt * k1);
            let k3 = a * (x + 0.5 * dt * k2);
            let k4 = a * (x + dt * k3);
            x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        };
        let mut v_prev = g.v_cc(&x);
        let sample_every = 100; // compare over dt*100 windows
        for step in 1..=5000usize {
            x = rk4(&x);
            if step % sample_every == 0 {
                let v = g.v_cc(&x);
                let bound = v_prev * (-g.gamma() * dt * sample_every as f64).exp();
                assert!(
                    v <= bound * (1.0 + 1e-6),
                    "decay bound violated at step {step}: {v:.6e} > {bound:.6e}"
                );
                v_prev = v;
            }
        }
    }

    #[test]
    fn clearance_is_infinite_without_denominator_coupling() {
        // nu = 0 model: wrap version I but zero out nu.
        struct NoNu(crate::model::InverterModel);
        impl CascadeModel for NoNu {
            fn a_matrix(&self) -> &Matrix4<f64> {
                self.0.a_matrix()
            }
            fn k_p(&self) -> f64 {
                self.0.k_p()
            }
            fn k_i(&self) -> f64 {
                self.0.k_i()
            }
            fn mu(&self) -> f64 {
                self.0.mu()
            }
            fn nu(&self) -> &Vector4<f64> {
                static ZERO: Vector4<f64> = Vector4::new(0.0, 0.0, 0.0, 0.0);
                &ZERO
            }
            fn g(&self, t: f64, w: f64) -> f64 {
                self.0.g(t, w)
            }
            fn g_dtheta(&self, t: f64, w: f64) -> f64 {
                self.0.g_dtheta(t, w)
            }
            fn g_domega(&self, t: f64, w: f64) -> f64 {
                self.0.g_domega(t, w)
            }
            fn h(&self, w: f64) -> Vector4<f64> {
                self.0.h(w)
            }
            fn h_prime(&self, w: f64) -> Vector4<f64> {
                self.0.h_prime(w)
            }
            fn gradient_sign(&self) -> crate::model::GradientSign {
                self.0.gradient_sign()
            }
        }
        let inner = default_inverter_model(InverterParams::version_i()).unwrap();
        let g = build_gauge(inner.a_matrix(), 0.5).unwrap();
        let clearance = singularity_clearance(&g, &NoNu(inner), 0.1).unwrap();
        assert!(clearance.is_infinite());
    }

    #[test]
    fn clearance_touches_the_denominator_margin_exactly() {
        let m = default_inverter_model(InverterParams::version_i()).unwrap();
        let g = build_gauge(m.a_matrix(), 0.5).unwrap();
        let eps = 0.1;
        let v_safe = singularity_clearance(&g, &m, eps).unwrap();
        assert!(v_safe.is_finite() && v_safe > 0.0);
        // Worst-case nu'x on the clearance level exactly eats (1-eps)|mu|.
        let worst = g.max_linear_on_level(m.nu(), v_safe);
        assert_relative_eq!(worst, (1.0 - eps) * m.mu().abs(), max_relative = 1e-10);
    }

    #[test]
    fn boundary_point_lands_on_the_level_set() {
        let m = default_inverter_model(InverterParams::version_i()).unwrap();
        let g = build_gauge(m.a_matrix(), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut u = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            u /= u.norm();
            let level = rng.random_range(0.1..50.0);
            let x = g.boundary_point(&u, level);
            assert_relative_eq!(g.v_cc(&x), level, max_relative = 1e-10);
        }
    }
}
