//! Worst-case growth surface of the loop level function.
//!
//! For a loop state on the orbit of level `v_pll` and a block state known
//! only to satisfy `v_cc(x) <= v_cc`, the level function changes at rate
//! `dV/dt = grad . (-k_p f + domega, -k_i f) = c f + grad_1 domega` with
//! `c = -(k_p grad_1 + k_i grad_2)`. The rate is affine in `f`, and `f`
//! ranges over the interval `[f_min, f_max]` attained on the ellipsoid, so
//! the worst rate at one orbit point is `c f_max + grad_1 domega` when
//! `c > 0` and `c f_min + grad_1 domega` otherwise; the surface value
//! `F(v_pll, v_cc)` is the maximum of that branch-selected rate over the
//! orbit's stored points.
//!
//! On the diagonal `v_cc = v_pll` the selection provably coincides with the
//! orbit's own driving branch (`c = -k_i domega / det` with the attachment
//! determinant positive on outward-oriented orbits), so `F(v, v) = 0` up to
//! solver tolerances — a sharp end-to-end consistency check.

use crate::extremal::{ExtremalPoint, Extremizer, Sense};
use crate::family::{Cycle, Family};
use crate::model::{eval_f, CascadeModel};
use crate::{Error, Result};
use nalgebra::Vector4;

#[derive(Clone, Copy, Debug)]
pub struct GrowthOptions {
    /// Lowest nonzero block column relative to the frontier level.
    pub vcc_lo_rel: f64,
    /// Highest block column relative to the frontier level. Downstream
    /// budget integration must find its zero inside this span.
    pub vcc_hi_rel: f64,
    /// Number of logarithmic block columns (a zero column is prepended).
    pub vcc_log_count: usize,
    /// Multiplicative pessimism pushed away from zero. Must dominate the
    /// chord under-estimation of the concave-in-`vcc` surface between
    /// logarithmic nodes (about 0.4% at the default node ratio).
    pub safety: f64,
}

impl Default for GrowthOptions {
    fn default() -> Self {
        Self {
            vcc_lo_rel: 1e-2,
            vcc_hi_rel: 1000.0,
            vcc_log_count: 40,
            safety: 1.02,
        }
    }
}

/// Tabulated growth surface on the (loop level, block level) grid.
#[derive(Clone, Debug)]
pub struct GrowthTable {
    /// Row coordinates: 0 followed by the family levels, ascending.
    pub vpll: Vec<f64>,
    /// Column coordinates: 0 followed by a logarithmic sweep.
    pub vcc: Vec<f64>,
    /// `f[i][j] = F(vpll[i], vcc[j])`, safety applied.
    pub f: Vec<Vec<f64>>,
}

/// Worst growth rate of one orbit against block levels up to `vcc`
/// (raw, no safety factor).
pub fn growth_at(
    model: &dyn CascadeModel,
    ex: &Extremizer<'_>,
    cycle: &Cycle,
    vcc: f64,
) -> Result<f64> {
    let k_p = model.k_p();
    let k_i = model.k_i();
    let mut worst = f64::NEG_INFINITY;
    let mut warm_min: Option<ExtremalPoint> = None;
    let mut warm_max: Option<ExtremalPoint> = None;
    for p in &cycle.points {
        let c = -(k_p * p.grad[0] + k_i * p.grad[1]);
        let f_extreme = if vcc == 0.0 {
            eval_f(model, p.state, &Vector4::zeros())?
        } else if c > 0.0 {
            let sol = ex.extremize(p.state, vcc, Sense::Max, warm_max.as_ref())?;
            warm_max = Some(sol);
            sol.f_value
        } else {
            let sol = ex.extremize(p.state, vcc, Sense::Min, warm_min.as_ref())?;
            warm_min = Some(sol);
            sol.f_value
        };
        let rate = c * f_extreme + p.grad[0] * p.state.domega;
        if rate > worst {
            worst = rate;
        }
    }
    if worst.is_finite() {
        Ok(worst)
    } else {
        Err(Error::EmptyFamily("orbit has no stored points".into()))
    }
}

/// Tabulate the growth surface over the family.
///
/// The zero loop row copies the innermost orbit's row: growth scales like
/// the square root of the loop level near the origin, so the copy
/// overestimates (is conservative for) every smaller level. The block
/// columns are capped below the singularity clearance.
pub fn tabulate(
    model: &dyn CascadeModel,
    ex: &Extremizer<'_>,
    family: &Family,
    opts: &GrowthOptions,
) -> Result<GrowthTable> {
    if family.cycles.is_empty() {
        return Err(Error::EmptyFamily("cannot tabulate an empty family".into()));
    }
    if !(opts.safety >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "growth safety factor must be >= 1, got {}",
            opts.safety
        )));
    }
    let v_bar = family.frontier_level();
    let lo = opts.vcc_lo_rel * v_bar;
    let hi = (opts.vcc_hi_rel * v_bar).min(0.9 * ex.clearance());
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidConfig(format!(
            "degenerate block column range [{lo:.3e}, {hi:.3e}]"
        )));
    }
    let n = opts.vcc_log_count.max(2);
    let mut vcc = Vec::with_capacity(n + 1);
    vcc.push(0.0);
    let log_lo = lo.ln();
    let log_hi = hi.ln();
    for k in 0..n {
        let frac = k as f64 / (n - 1) as f64;
        vcc.push((log_lo + frac * (log_hi - log_lo)).exp());
    }

    let mut vpll = Vec::with_capacity(family.cycles.len() + 1);
    vpll.push(0.0);
    vpll.extend(family.levels());

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vpll.len());
    rows.push(Vec::new()); // placeholder for the copied zero row
    for cycle in &family.cycles {
        let mut row = Vec::with_capacity(vcc.len());
        for &col in &vcc {
            let raw = growth_at(model, ex, cycle, col)?;
            row.push(apply_safety(raw, opts.safety));
        }
        rows.push(row);
    }
    rows[0] = rows[1].clone();

    Ok(GrowthTable { vpll, vcc, f: rows })
}

/// Push a raw rate away from zero by the safety factor.
fn apply_safety(raw: f64, safety: f64) -> f64 {
    if raw >= 0.0 {
        raw * safety
    } else {
        raw / safety
    }
}

impl GrowthTable {
    pub fn vcc_max(&self) -> f64 {
        *self.vcc.last().expect("non-empty grid")
    }

    pub fn vpll_max(&self) -> f64 {
        *self.vpll.last().expect("non-empty grid")
    }

    /// Bilinear surface value. The loop coordinate must stay inside the
    /// tabulated rows; block levels beyond the last column are clamped to
    /// it (callers doing certification never leave the grid — the clamp
    /// serves diagnostics).
    pub fn eval(&self, vpll: f64, vcc: f64) -> Result<f64> {
        if !vpll.is_finite() || vpll < 0.0 || vpll > self.vpll_max() {
            return Err(Error::OutOfRange(format!(
                "loop level {vpll:.6e} outside [0, {:.6e}]",
                self.vpll_max()
            )));
        }
        if !vcc.is_finite() || vcc < 0.0 {
            return Err(Error::OutOfRange(format!("block level {vcc:.6e} negative")));
        }
        let vcc = vcc.min(self.vcc_max());
        let (i, ti) = bracket(&self.vpll, vpll);
        let (j, tj) = bracket(&self.vcc, vcc);
        let f00 = self.f[i][j];
        let f01 = self.f[i][j + 1];
        let f10 = self.f[i + 1][j];
        let f11 = self.f[i + 1][j + 1];
        Ok(f00 * (1.0 - ti) * (1.0 - tj)
            + f01 * (1.0 - ti) * tj
            + f10 * ti * (1.0 - tj)
            + f11 * ti * tj)
    }
}

/// Index `i` and fraction `t` with `grid[i] + t (grid[i+1] - grid[i]) = x`.
fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    let last = grid.len() - 1;
    if x >= grid[last] {
        return (last - 1, 1.0);
    }
    let mut lo = 0usize;
    let mut hi = last;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if grid[mid] <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let span = grid[hi] - grid[lo];
    let t = if span > 0.0 { (x - grid[lo]) / span } else { 0.0 };
    (lo, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{continue_family, FamilyOptions};
    use crate::gauge::build_gauge;
    use crate::model::{default_inverter_model, InverterParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        model: crate::model::InverterModel,
        gauge: crate::gauge::Gauge,
        family: Family,
    }

    fn fixture() -> Fixture {
        let model = default_inverter_model(InverterParams::version_i()).unwrap();
        let gauge = build_gauge(model.a_matrix(), 0.5).unwrap();
        let family = {
            let ex = Extremizer::new(&model, &gauge, 0.1).unwrap();
            let opts = FamilyOptions {
                max_members: 3,
                growth: 1.6,
                samples_per_cycle: 128,
                ..FamilyOptions::default()
            };
            continue_family(&model, &gauge, &ex, &opts).unwrap()
        };
        Fixture {
            model,
            gauge,
            family,
        }
    }

    #[test]
    fn diagonal_rates_vanish() {
        let fx = fixture();
        let ex = Extremizer::new(&fx.model, &fx.gauge, 0.1).unwrap();
        for cycle in &fx.family.cycles {
            let raw = growth_at(&fx.model, &ex, cycle, cycle.level).unwrap();
            // Scale of the individual contributions being cancelled.
            let scale = cycle
                .points
                .iter()
                .map(|p| {
                    let c = -(fx.model.k_p() * p.grad[0] + fx.model.k_i() * p.grad[1]);
                    (c * p.f_star).abs().max((p.grad[0] * p.state.domega).abs())
                })
                .fold(0.0f64, f64::max);
            assert!(
                raw.abs() <= 1e-6 * scale.max(1e-300),
                "level {:.3e}: diagonal rate {raw:.3e} vs scale {scale:.3e}",
                cycle.level
            );
        }
    }

    #[test]
    fn unforced_rates_never_grow_and_contract_off_the_switch_line() {
        // The dot of the gradient with the unforced field vanishes exactly
        // where the orbit crosses domega = 0 (there the gradient is
        // perpendicular to (k_p, k_i), which both fields are parallel to),
        // so the worst unforced rate is zero, attained on the line, and
        // strictly negative elsewhere.
        let fx = fixture();
        let ex = Extremizer::new(&fx.model, &fx.gauge, 0.1).unwrap();
        for cycle in &fx.family.cycles {
            let raw = growth_at(&fx.model, &ex, cycle, 0.0).unwrap();
            let scale = cycle
                .points
                .iter()
                .map(|p| {
                    let c = -(fx.model.k_p() * p.grad[0] + fx.model.k_i() * p.grad[1]);
                    (c * p.f_star).abs().max((p.grad[0] * p.state.domega).abs())
                })
                .fold(0.0f64, f64::max);
            assert!(
                raw <= 1e-9 * scale.max(1e-300),
                "level {:.3e}: F(v, 0) = {raw:.3e}",
                cycle.level
            );

            let top = cycle
                .points
                .iter()
                .max_by(|a, b| {
                    a.state
                        .domega
                        .abs()
                        .partial_cmp(&b.state.domega.abs())
                        .unwrap()
                })
                .unwrap();
            let c = -(fx.model.k_p() * top.grad[0] + fx.model.k_i() * top.grad[1]);
            let f0 = eval_f(&fx.model, top.state, &Vector4::zeros()).unwrap();
            let rate = c * f0 + top.grad[0] * top.state.domega;
            assert!(
                rate < 0.0,
                "level {:.3e}: off-line unforced rate {rate:.3e} not contracting",
                cycle.level
            );
        }
    }

    #[test]
    fn rates_increase_with_the_block_level() {
        let fx = fixture();
        let ex = Extremizer::new(&fx.model, &fx.gauge, 0.1).unwrap();
        let cycle = &fx.family.cycles[1];
        let levels = [0.0, 0.3 * cycle.level, cycle.level, 3.0 * cycle.level];
        let mut prev = f64::NEG_INFINITY;
        for &lvl in &levels {
            let raw = growth_at(&fx.model, &ex, cycle, lvl).unwrap();
            assert!(
                raw >= prev - 1e-12,
                "F not monotone: {raw:.6e} after {prev:.6e} at vcc {lvl:.3e}"
            );
            prev = raw;
        }
    }

    #[test]
    fn brute_force_rates_never_exceed_the_surface() {
        let fx = fixture();
        let ex = Extremizer::new(&fx.model, &fx.gauge, 0.1).unwrap();
        let cycle = &fx.family.cycles[2];
        let vcc = 2.0 * cycle.level;
        let bound = growth_at(&fx.model, &ex, cycle, vcc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..400 {
            let p = &cycle.points[rng.random_range(0..cycle.points.len())];
            let mut u = Vector4::from_fn(|_, _| rng.random_range(-1.0f64..1.0));
            u /= u.norm();
            let x = fx
                .gauge
                .boundary_point(&u, vcc * rng.random_range(0.0..1.0f64));
            let f = eval_f(&fx.model, p.state, &x).unwrap();
            let c = -(fx.model.k_p() * p.grad[0] + fx.model.k_i() * p.grad[1]);
            let rate = c * f + p.grad[0] * p.state.domega;
            assert!(
                rate <= bound + 1e-9 * bound.abs().max(1.0),
                "sampled rate {rate:.6e} beats the bound {bound:.6e}"
            );
        }
    }

    #[test]
    fn tabulation_grid_and_safety_behave() {
        let fx = fixture();
        let ex = Extremizer::new(&fx.model, &fx.gauge, 0.1).unwrap();
        let opts = GrowthOptions {
            vcc_log_count: 9,
            ..GrowthOptions::default()
        };
        let table = tabulate(&fx.model, &ex, &fx.family, &opts).unwrap();
        assert_eq!(table.vpll.len(), fx.family.cycles.len() + 1);
        assert_eq!(table.vcc.len(), 10);
        assert_eq!(table.vpll[0], 0.0);
        assert_eq!(table.vcc[0], 0.0);
        assert_eq!(table.f[0], table.f[1], "zero row copies the innermost row");

        // Safety pushes away from zero.
        let cycle = &fx.family.cycles[0];
        let raw = growth_at(&fx.model, &ex, cycle, table.vcc[3]).unwrap();
        let stored = table.f[1][3];
        assert!(stored.abs() >= raw.abs() - 1e-15);
        assert_eq!(stored.signum(), raw.signum());

        // Bilinear evaluation reproduces the nodes.
        for (i, &vp) in table.vpll.iter().enumerate() {
            for (j, &vc) in table.vcc.iter().enumerate() {
                let e = table.eval(vp, vc).unwrap();
                assert!(
                    (e - table.f[i][j]).abs() <= 1e-12 * table.f[i][j].abs().max(1e-300),
                    "node ({i}, {j})"
                );
            }
        }

        // Interpolation stays between the bracketing nodes.
        let mid = table.eval(
            0.5 * (table.vpll[1] + table.vpll[2]),
            0.5 * (table.vcc[4] + table.vcc[5]),
        )
        .unwrap();
        let corners = [
            table.f[1][4],
            table.f[1][5],
            table.f[2][4],
            table.f[2][5],
        ];
        let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mid >= lo && mid <= hi);

        // Out-of-range loop levels are refused; high block levels clamp.
        assert!(table.eval(table.vpll_max() * 1.01, 1.0).is_err());
        let clamped = table.eval(table.vpll[1], table.vcc_max() * 10.0).unwrap();
        assert_eq!(clamped, table.eval(table.vpll[1], table.vcc_max()).unwrap());
    }
}
