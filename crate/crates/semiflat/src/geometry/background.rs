//! Analytic pieces of the background metrics.
//!
//! Near each pole, in the canonical coordinate `w` (where the differential
//! is exactly `dw^3/w`), the singular background is `|log|w|^2| |dw|^2` and
//! the flat comparison background is `|dw|^2`. Away from the poles both are
//! the round sphere `4/(1+|z|^2)^2 |dz|^2`. The two regimes are joined on
//! the annulus `r_b <= |w| <= 2 r_b` by blending the logarithms of the
//! conformal factors with a C-infinity bump step, which keeps the result
//! positive by construction.

/// C-infinity step: 0 for `t <= 0`, 1 for `t >= 1`, strictly increasing
/// between, flat to all orders at both ends.
pub fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let b = (-1.0 / t).exp();
    let c = (-1.0 / (1.0 - t)).exp();
    b / (b + c)
}

/// Conformal factor of the singular model in the log chart
/// `zeta = rho + i theta`, `w = e^zeta`: `lambda = |2 rho| e^{2 rho}`
/// (valid for `rho < 0`).
pub fn lam_model_log(rho: f64) -> f64 {
    -2.0 * rho * (2.0 * rho).exp()
}

/// Gauss curvature of the singular model in the collar,
/// `kappa = -1 / (4 rho^3 e^{2 rho})`.
pub fn kappa_model(rho: f64) -> f64 {
    -1.0 / (4.0 * rho.powi(3) * (2.0 * rho).exp())
}

/// Squared background norm of the canonical differential `dw^3/w` against
/// the singular model: `e^{-2 rho} / |2 rho|^3` (chart-independent).
pub fn uh2_model(rho: f64) -> f64 {
    (-2.0 * rho).exp() / (-2.0 * rho).powi(3)
}

/// Round-sphere conformal factor in an affine frame coordinate
/// (`z` or `s = 1/z`; the form is inversion-symmetric).
pub fn lam_round(frame: num_complex::Complex64) -> f64 {
    let q = 1.0 + frame.norm_sqr();
    4.0 / (q * q)
}

/// Squared background norm of a differential with chart coefficient `u`
/// against a metric with chart conformal factor `lam` (cubic weight).
pub fn uh2_from(u_abs2: f64, lam: f64) -> f64 {
    u_abs2 / (lam * lam * lam)
}

/// Blended conformal factor in the `w` chart at radius `r = |w|`:
/// the singular (`log`) or flat model inside `r_b`, `lam_round_w` outside
/// `2 r_b`, log-blended between.
pub fn lam_blend_w(r: f64, r_b: f64, flat_model: bool, lam_round_w: f64) -> f64 {
    let model = if flat_model { 1.0 } else { -2.0 * r.ln() };
    if r <= r_b {
        return model;
    }
    if r >= 2.0 * r_b {
        return lam_round_w;
    }
    let chi = smooth_step(r / r_b - 1.0);
    ((1.0 - chi) * model.ln() + chi * lam_round_w.ln()).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_monotone_and_clamped() {
        assert_eq!(smooth_step(-1.0), 0.0);
        assert_eq!(smooth_step(2.0), 1.0);
        let mut prev = 0.0;
        for k in 0..=100 {
            let v = smooth_step(k as f64 / 100.0);
            assert!(v >= prev);
            prev = v;
        }
        assert!((smooth_step(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn model_values_at_reference_radii() {
        // lambda in the w chart at |w| = e^-5 is |log|w|^2| = 10.
        let rho = -5.0;
        assert!((lam_model_log(rho) / (2.0 * rho).exp() - 10.0).abs() < 1e-12);
        // kappa and the cubic norm at |w| = e^-1.
        let e2 = std::f64::consts::E.powi(2);
        assert!((kappa_model(-1.0) - e2 / 4.0).abs() < 1e-12);
        assert!((uh2_model(-1.0) - e2 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn model_balances_curvature_exactly() {
        // 4 ||U||^2 = 2 kappa for the singular model, at any depth.
        for &rho in &[-0.5, -1.0, -3.0, -7.5, -20.0] {
            let lhs = 4.0 * uh2_model(rho);
            let rhs = 2.0 * kappa_model(rho);
            assert!(
                ((lhs - rhs) / rhs.abs()).abs() < 1e-13,
                "imbalance at rho={rho}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn blend_is_positive_and_matches_ends() {
        let r_b = 0.06;
        let round = 3.7;
        assert!((lam_blend_w(0.01, r_b, false, round) - (-2.0 * 0.01f64.ln())).abs() < 1e-12);
        assert!((lam_blend_w(0.2, r_b, false, round) - round).abs() < 1e-12);
        for k in 1..100 {
            let r = r_b * (1.0 + k as f64 / 100.0);
            assert!(lam_blend_w(r, r_b, false, round) > 0.0);
            assert!(lam_blend_w(r, r_b, true, round) > 0.0);
        }
    }
}
