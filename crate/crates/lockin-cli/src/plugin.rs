//! A pluggable cascade model driven entirely by explicit numbers.
//!
//! The default model derives its block matrix and coupling vectors from
//! physical circuit parameters. This plugin instead accepts the matrix and
//! vectors verbatim, which makes it easy to probe the pipeline's structural
//! gates: hand it a non-Hurwitz matrix and `check` must refuse, hand it a
//! damped oscillator and the full estimate runs.
//!
//! Construction deliberately skips the Hurwitz check so the `check` command
//! gets to report the verdict itself; every later stage re-validates what it
//! needs.

use lockin::model::{resolve_gradient_sign, CascadeModel, GradientSign};
use lockin::Result;
use nalgebra::{Matrix4, Vector4};

/// Raw numbers for the plugged-in cascade.
#[derive(Debug, Clone)]
pub struct TestMatrixParams {
    /// Block matrix, row major.
    pub a: [[f64; 4]; 4],
    /// Proportional loop gain.
    pub k_p: f64,
    /// Integral loop gain.
    pub k_i: f64,
    /// Restoring gain: the detector reads `g_gain sin(dtheta) + g_damp domega`.
    pub g_gain: f64,
    /// Direct damping read by the detector.
    pub g_damp: f64,
    /// Constant coupling of the block state into the detector.
    pub h: [f64; 4],
    /// Constant denominator of the synchronization signal.
    pub mu: f64,
}

impl TestMatrixParams {
    /// Damped-oscillator defaults around a caller-supplied block matrix.
    pub fn new(a: [[f64; 4]; 4]) -> Self {
        Self {
            a,
            k_p: 0.2,
            k_i: 1.0,
            g_gain: 1.0,
            g_damp: 0.5,
            h: [0.05, 0.0, 0.0, 0.0],
            mu: 1.0,
        }
    }
}

/// Cascade model built from [`TestMatrixParams`].
#[derive(Debug, Clone)]
pub struct TestMatrixModel {
    params: TestMatrixParams,
    a: Matrix4<f64>,
    h: Vector4<f64>,
    nu: Vector4<f64>,
    sign: GradientSign,
}

impl TestMatrixModel {
    pub fn new(params: TestMatrixParams) -> Result<Self> {
        if params.mu.abs() < 1e-12 {
            return Err(lockin::error::Error::ModelInvalid(
                "test-matrix denominator constant mu is zero".into(),
            ));
        }
        let a = Matrix4::from_fn(|i, j| params.a[i][j]);
        let h = Vector4::from_column_slice(&params.h);
        let mut model = Self {
            params,
            a,
            h,
            nu: Vector4::zeros(),
            sign: GradientSign::MinusB,
        };
        model.sign = resolve_gradient_sign(&model)?;
        Ok(model)
    }

    pub fn params(&self) -> &TestMatrixParams {
        &self.params
    }
}

impl CascadeModel for TestMatrixModel {
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
        self.params.mu
    }

    fn nu(&self) -> &Vector4<f64> {
        &self.nu
    }

    fn g(&self, dtheta: f64, domega: f64) -> f64 {
        self.params.g_gain * dtheta.sin() + self.params.g_damp * domega
    }

    fn g_dtheta(&self, dtheta: f64, _domega: f64) -> f64 {
        self.params.g_gain * dtheta.cos()
    }

    fn g_domega(&self, _dtheta: f64, _domega: f64) -> f64 {
        self.params.g_damp
    }

    fn h(&self, _domega: f64) -> Vector4<f64> {
        self.h
    }

    fn h_prime(&self, _domega: f64) -> Vector4<f64> {
        Vector4::zeros()
    }

    fn gradient_sign(&self) -> GradientSign {
        self.sign
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lockin::model::{check_oscillatory, spectral_abscissa};

    fn stable_a() -> [[f64; 4]; 4] {
        [
            [-1.0, 0.5, 0.0, 0.0],
            [-0.5, -1.0, 0.0, 0.0],
            [0.0, 0.0, -2.0, 0.0],
            [0.0, 0.0, 0.0, -3.0],
        ]
    }

    #[test]
    fn the_default_plugin_is_oscillatory_and_stable() {
        let model = TestMatrixModel::new(TestMatrixParams::new(stable_a())).unwrap();
        assert!(spectral_abscissa(model.a_matrix()) < 0.0);
        let report = check_oscillatory(&model).unwrap();
        assert!(report.pass);
    }

    #[test]
    fn a_non_hurwitz_matrix_still_constructs() {
        let mut a = stable_a();
        a[2][2] = 0.5;
        let model = TestMatrixModel::new(TestMatrixParams::new(a)).unwrap();
        assert!(spectral_abscissa(model.a_matrix()) > 0.0);
    }

    #[test]
    fn the_detector_partials_match_the_closed_form() {
        let model = TestMatrixModel::new(TestMatrixParams::new(stable_a())).unwrap();
        let d = 1e-6;
        let fd = (model.g(0.3 + d, 0.1) - model.g(0.3 - d, 0.1)) / (2.0 * d);
        assert!((fd - model.g_dtheta(0.3, 0.1)).abs() < 1e-8);
        assert_eq!(model.g_domega(0.3, 0.1), 0.5);
    }
}
