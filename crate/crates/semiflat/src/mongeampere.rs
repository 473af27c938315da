//! Verifies the unimodular-Hessian property of the developed potential.
//! The development realizes the surface as a graph `(alpha, phi(alpha))`
//! over the affine plane; `alpha` is read off the transported position and
//! `beta = grad phi` off the transported derivative frame. The potential of
//! a semi-flat metric satisfies `det Hess_alpha(phi) = 1`; we measure the
//! Hessian as `J_beta J_alpha^{-1}` with centered differences on a comb of
//! short transported offsets around a circle.

use crate::holonomy::HolonomyError;
use crate::transport::{
    circle_path, init_frame, transport, transport_sampled, Frame, SurfaceData, TransportError,
};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MongeAmpereError {
    #[error("affine coordinates fold at z = {z} (area jacobian {jac:.4e})")]
    FoldDetected { z: Complex64, jac: f64 },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Holonomy(#[from] HolonomyError),
}

/// Gradient coordinates from one frame: solves the 2x2 system
/// `d f_3 = beta . d alpha` in the `x` and `y` directions.
pub fn gradient_coords(frame: &Frame, z: Complex64) -> Result<[f64; 2], MongeAmpereError> {
    let a1x = 2.0 * frame.fz[0].re;
    let a2x = 2.0 * frame.fz[1].re;
    let a1y = -2.0 * frame.fz[0].im;
    let a2y = -2.0 * frame.fz[1].im;
    let rx = 2.0 * frame.fz[2].re;
    let ry = -2.0 * frame.fz[2].im;
    let det = a1x * a2y - a2x * a1y;
    let scale = (a1x * a1x + a2x * a2x + a1y * a1y + a2y * a2y).max(1e-300);
    if det <= 1e-12 * scale {
        return Err(MongeAmpereError::FoldDetected { z, jac: det });
    }
    Ok([(rx * a2y - a2x * ry) / det, (a1x * ry - rx * a1y) / det])
}

#[derive(Clone, Debug)]
pub struct HessianSample {
    pub z: Complex64,
    pub det: f64,
    /// Antisymmetry of the measured Hessian, scaled by its norm.
    pub asymmetry: f64,
    /// Smallest eigenvalue of the symmetrized Hessian (convexity margin).
    pub min_eig: f64,
}

fn straight_path(from: Complex64, to: Complex64) -> impl Fn(f64) -> (Complex64, Complex64) {
    move |t| (from + (to - from) * t, to - from)
}

/// `(alpha, beta)` at a short offset from a tooth frame, transported within
/// the same development.
fn probe_offset<S: SurfaceData>(
    surface: &S,
    base: &Frame,
    from: Complex64,
    to: Complex64,
) -> Result<([f64; 2], [f64; 2]), MongeAmpereError> {
    let res = transport(surface, straight_path(from, to), base)?;
    let alpha = [res.frame.f[0], res.frame.f[1]];
    let beta = gradient_coords(&res.frame, to)?;
    Ok((alpha, beta))
}

/// Samples `det Hess(phi)` at `teeth` points of the circle `|z| = radius`
/// around `center`; offsets are `rel_h * radius` long.
pub fn hessian_on_circle<S: SurfaceData>(
    surface: &S,
    center: Complex64,
    radius: f64,
    teeth: usize,
    rel_h: f64,
) -> Result<Vec<HessianSample>, MongeAmpereError> {
    assert!(teeth >= 4 && rel_h > 0.0 && rel_h < 0.2);
    let z0 = center + Complex64::new(radius, 0.0);
    let seed = init_frame(surface, z0, 0.0)?;
    let (_, frames) = transport_sampled(surface, circle_path(center, radius, 0.0), &seed, teeth)?;
    let h = rel_h * radius;
    let mut out = Vec::with_capacity(teeth);
    for (k, fr) in frames.iter().take(teeth).enumerate() {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / teeth as f64;
        let zk = center + Complex64::from_polar(radius, theta);
        let (a_px, b_px) = probe_offset(surface, fr, zk, zk + h)?;
        let (a_mx, b_mx) = probe_offset(surface, fr, zk, zk - h)?;
        let (a_py, b_py) = probe_offset(surface, fr, zk, zk + Complex64::i() * h)?;
        let (a_my, b_my) = probe_offset(surface, fr, zk, zk - Complex64::i() * h)?;
        let ja = [
            [(a_px[0] - a_mx[0]) / (2.0 * h), (a_py[0] - a_my[0]) / (2.0 * h)],
            [(a_px[1] - a_mx[1]) / (2.0 * h), (a_py[1] - a_my[1]) / (2.0 * h)],
        ];
        let jb = [
            [(b_px[0] - b_mx[0]) / (2.0 * h), (b_py[0] - b_my[0]) / (2.0 * h)],
            [(b_px[1] - b_mx[1]) / (2.0 * h), (b_py[1] - b_my[1]) / (2.0 * h)],
        ];
        let det_a = ja[0][0] * ja[1][1] - ja[0][1] * ja[1][0];
        let norm_a = ja[0][0].abs() + ja[0][1].abs() + ja[1][0].abs() + ja[1][1].abs();
        if det_a <= 1e-10 * norm_a * norm_a {
            return Err(MongeAmpereError::FoldDetected { z: zk, jac: det_a });
        }
        let inv_a = [
            [ja[1][1] / det_a, -ja[0][1] / det_a],
            [-ja[1][0] / det_a, ja[0][0] / det_a],
        ];
        let hess = [
            [
                jb[0][0] * inv_a[0][0] + jb[0][1] * inv_a[1][0],
                jb[0][0] * inv_a[0][1] + jb[0][1] * inv_a[1][1],
            ],
            [
                jb[1][0] * inv_a[0][0] + jb[1][1] * inv_a[1][0],
                jb[1][0] * inv_a[0][1] + jb[1][1] * inv_a[1][1],
            ],
        ];
        let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
        let hnorm = hess[0][0].abs() + hess[0][1].abs() + hess[1][0].abs() + hess[1][1].abs();
        let asymmetry = (hess[0][1] - hess[1][0]).abs() / hnorm.max(1e-300);
        let sym_off = 0.5 * (hess[0][1] + hess[1][0]);
        let mean = 0.5 * (hess[0][0] + hess[1][1]);
        let rad = (0.25 * (hess[0][0] - hess[1][1]).powi(2) + sym_off * sym_off).sqrt();
        out.push(HessianSample {
            z: zk,
            det,
            asymmetry,
            min_eig: mean - rad,
        });
    }
    Ok(out)
}

/// Largest deviation of the Hessian determinant from one over the samples.
pub fn max_unimodularity_defect(samples: &[HessianSample]) -> f64 {
    samples
        .iter()
        .map(|s| (s.det - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::ModelData;

    #[test]
    fn gradient_solve_rejects_folded_frames() {
        let fr = Frame {
            f: [0.0; 3],
            fz: [
                Complex64::new(1.0, 0.0),
                Complex64::new(2.0, 0.0), // parallel to fz[0]
                Complex64::new(0.3, 0.1),
            ],
        };
        assert!(matches!(
            gradient_coords(&fr, Complex64::ZERO),
            Err(MongeAmpereError::FoldDetected { .. })
        ));
    }

    #[test]
    fn gradient_solve_recovers_known_linear_data() {
        // alpha = (x, y), phi = (x^2 + y^2) / 2: beta = (x, y), so at the
        // point z the frame has fz = (1/2, -i/2, z-bar/2-ish): construct
        // directly from alpha_z = (1/2, -i/2) and phi_z = beta . alpha_z.
        let z = Complex64::new(0.7, -0.2);
        let beta = [z.re, z.im];
        let fz0 = Complex64::new(0.5, 0.0);
        let fz1 = Complex64::new(0.0, -0.5);
        let fz2 = fz0 * beta[0] + fz1 * beta[1];
        let fr = Frame {
            f: [z.re, z.im, 0.5 * (z.re * z.re + z.im * z.im)],
            fz: [fz0, fz1, fz2],
        };
        let got = gradient_coords(&fr, z).unwrap();
        assert!((got[0] - beta[0]).abs() < 1e-14);
        assert!((got[1] - beta[1]).abs() < 1e-14);
    }

    #[test]
    fn model_hessian_is_unimodular_and_convex() {
        let samples =
            hessian_on_circle(&ModelData, Complex64::ZERO, (-5.0f64).exp(), 12, 0.02).unwrap();
        assert_eq!(samples.len(), 12);
        let defect = max_unimodularity_defect(&samples);
        assert!(defect < 1e-3, "max |det - 1| = {defect}");
        for s in &samples {
            assert!(s.min_eig > 0.0, "not convex at {}", s.z);
            assert!(s.asymmetry < 1e-3, "asymmetric at {}: {}", s.z, s.asymmetry);
        }
    }
}
