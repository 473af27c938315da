//! Parallel transport of the developing frame. A metric `e^psi |dz|^2`
//! satisfying the structure equation together with the cubic form `U dz^3`
//! induces a graph immersion `f : domain -> R^3` with constant transverse
//! vector `xi = e_3`:
//!
//! ```text
//!   f_z z    = psi_z f_z + U e^{-psi} conj(f_z)
//!   f_z zbar = (e^psi / 2) xi
//! ```
//!
//! whose integrability condition is exactly `4 psi_{z zbar} =
//! -4 |U|^2 e^{-2 psi}`, the equation the solver enforces. Transporting
//! `(f, f_z)` around loops produces the affine holonomy studied in the
//! `holonomy` module. `det(f_z, conj f_z, xi) = (i/2) e^psi` is a first
//! integral and serves as the step-level accuracy monitor.

use crate::cubic::CanonicalChart;
use crate::geometry::{ChartAtlas, Patch, PatchKind};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("metric degenerate at seed point: e^psi = {epsi:.4e}")]
    DegenerateSeed { epsi: f64 },
    #[error("step control wants {needed} steps (cap {cap}); coefficients too stiff")]
    StepUnderflow { needed: usize, cap: usize },
    #[error("non-finite frame component after step {step}")]
    NonFinite { step: usize },
    #[error("point (rho, theta) = ({rho:.3}, {theta:.3}) outside the interpolation stencil")]
    OutsideCollar { rho: f64, theta: f64 },
}

/// Metric and cubic data sampled along transport paths, in one fixed chart.
pub trait SurfaceData {
    fn psi(&self, z: Complex64) -> f64;
    /// `d psi / dz` (holomorphic derivative of the real field).
    fn dpsi(&self, z: Complex64) -> Complex64;
    fn cubic(&self, z: Complex64) -> Complex64;
}

/// Everything-zero data: `psi = 0`, `U = 0`. Loops are exactly trivial.
pub struct FlatData;

impl SurfaceData for FlatData {
    fn psi(&self, _z: Complex64) -> f64 {
        0.0
    }
    fn dpsi(&self, _z: Complex64) -> Complex64 {
        Complex64::ZERO
    }
    fn cubic(&self, _z: Complex64) -> Complex64 {
        Complex64::ZERO
    }
}

/// The exact puncture model on `0 < |z| < 1`: `e^psi = -log|z|^2`,
/// `U = 1/z`.
pub struct ModelData;

impl SurfaceData for ModelData {
    fn psi(&self, z: Complex64) -> f64 {
        (-z.norm_sqr().ln()).ln()
    }
    fn dpsi(&self, z: Complex64) -> Complex64 {
        // psi = log(-L), L = log|z|^2: psi_z = (1/z) / L.
        let l = z.norm_sqr().ln();
        1.0 / (z * l)
    }
    fn cubic(&self, z: Complex64) -> Complex64 {
        1.0 / z
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub f: [f64; 3],
    pub fz: [Complex64; 3],
}

impl Frame {
    /// `det(f_z, conj f_z, e_3)`, purely imaginary for any real immersion.
    pub fn transverse_det(&self) -> Complex64 {
        self.fz[0] * self.fz[1].conj() - self.fz[1] * self.fz[0].conj()
    }
}

/// Initial frame at `z0` with the gauge `f = 0`,
/// `f_z = a (1, -i, 0) / sqrt(2)`, `|a|^2 = e^psi / 2`; `phase` rotates `a`.
pub fn init_frame<S: SurfaceData>(
    surface: &S,
    z0: Complex64,
    phase: f64,
) -> Result<Frame, TransportError> {
    let epsi = surface.psi(z0).exp();
    if !(epsi > 0.0) || !epsi.is_finite() {
        return Err(TransportError::DegenerateSeed { epsi });
    }
    let a = Complex64::from_polar((epsi / 2.0).sqrt(), phase);
    let s = a / 2.0f64.sqrt();
    Ok(Frame {
        f: [0.0; 3],
        fz: [s, -Complex64::i() * s, Complex64::ZERO],
    })
}

pub struct TransportResult {
    pub frame: Frame,
    /// Max relative drift of the first integral over all accepted steps.
    pub det_drift: f64,
    pub steps: usize,
}

const MAX_STEPS: usize = 4_000_000;

struct State {
    f: [f64; 3],
    fz: [Complex64; 3],
}

fn deriv<S: SurfaceData>(surface: &S, z: Complex64, zdot: Complex64, st: &State) -> State {
    let psi = surface.psi(z);
    let coef_conj = surface.cubic(z) * (-psi).exp();
    let dpsi = surface.dpsi(z);
    let half_epsi = 0.5 * psi.exp();
    let mut dfz = [Complex64::ZERO; 3];
    for k in 0..3 {
        dfz[k] = zdot * (dpsi * st.fz[k] + coef_conj * st.fz[k].conj());
    }
    // The transverse term only feeds the third component.
    dfz[2] += zdot.conj() * half_epsi;
    let mut df = [0.0; 3];
    for k in 0..3 {
        df[k] = 2.0 * (zdot * st.fz[k]).re;
    }
    State { f: df, fz: dfz }
}

fn axpy(s: &State, h: f64, d: &State) -> State {
    State {
        f: [s.f[0] + h * d.f[0], s.f[1] + h * d.f[1], s.f[2] + h * d.f[2]],
        fz: [
            s.fz[0] + h * d.fz[0],
            s.fz[1] + h * d.fz[1],
            s.fz[2] + h * d.fz[2],
        ],
    }
}

/// Transports a frame along `t -> path(t)` for `t` in `[0, 1]` with classic
/// fourth-order Runge–Kutta; `path` returns `(z, dz/dt)`. The step count is
/// set from the sampled coefficient magnitude, `h <= min(0.01, 0.1 / |A|)`.
pub fn transport<S, P>(surface: &S, path: P, frame: &Frame) -> Result<TransportResult, TransportError>
where
    S: SurfaceData,
    P: Fn(f64) -> (Complex64, Complex64),
{
    transport_sampled(surface, path, frame, 1).map(|(res, _)| res)
}

/// Like [`transport`], but additionally returns the frame at `m + 1` equally
/// spaced parameter values including both endpoints.
pub fn transport_sampled<S, P>(
    surface: &S,
    path: P,
    frame: &Frame,
    m: usize,
) -> Result<(TransportResult, Vec<Frame>), TransportError>
where
    S: SurfaceData,
    P: Fn(f64) -> (Complex64, Complex64),
{
    assert!(m >= 1);
    let mut amax = 0.0f64;
    for s in 0..64 {
        let (z, zdot) = path(s as f64 / 64.0);
        let psi = surface.psi(z);
        let a = zdot.norm()
            * (surface.dpsi(z).norm() + surface.cubic(z).norm() * (-psi).exp() + 0.5 * psi.exp() + 1.0);
        amax = amax.max(a);
    }
    let h_target = (0.1 / amax).min(0.01);
    let needed = (1.0 / h_target).ceil() as usize;
    if needed > MAX_STEPS {
        return Err(TransportError::StepUnderflow {
            needed,
            cap: MAX_STEPS,
        });
    }
    // Round up to a multiple of the sample count so samples land on steps.
    let n = needed.max(8).div_ceil(m) * m;
    let h = 1.0 / n as f64;
    let per_sample = n / m;

    let mut st = State {
        f: frame.f,
        fz: frame.fz,
    };
    let mut drift = 0.0f64;
    let mut samples = Vec::with_capacity(m + 1);
    samples.push(frame.clone());
    for step in 0..n {
        let t = step as f64 * h;
        let (z1, zd1) = path(t);
        let k1 = deriv(surface, z1, zd1, &st);
        let (z2, zd2) = path(t + 0.5 * h);
        let k2 = deriv(surface, z2, zd2, &axpy(&st, 0.5 * h, &k1));
        let k3 = deriv(surface, z2, zd2, &axpy(&st, 0.5 * h, &k2));
        let (z4, zd4) = path(t + h);
        let k4 = deriv(surface, z4, zd4, &axpy(&st, h, &k3));
        for i in 0..3 {
            st.f[i] += h / 6.0 * (k1.f[i] + 2.0 * k2.f[i] + 2.0 * k3.f[i] + k4.f[i]);
            st.fz[i] += h / 6.0 * (k1.fz[i] + 2.0 * k2.fz[i] + 2.0 * k3.fz[i] + k4.fz[i]);
        }
        if st.fz.iter().any(|c| !c.is_finite()) || st.f.iter().any(|x| !x.is_finite()) {
            return Err(TransportError::NonFinite { step });
        }
        let fr = Frame { f: st.f, fz: st.fz };
        let want = 0.5 * surface.psi(z4).exp();
        let got = fr.transverse_det();
        drift = drift.max((got - Complex64::i() * want).norm() / want);
        if (step + 1) % per_sample == 0 {
            samples.push(fr);
        }
    }
    let result = TransportResult {
        frame: Frame { f: st.f, fz: st.fz },
        det_drift: drift,
        steps: n,
    };
    Ok((result, samples))
}

/// Counterclockwise circle `center + r e^{i (theta0 + 2 pi t)}`.
pub fn circle_path(
    center: Complex64,
    radius: f64,
    theta0: f64,
) -> impl Fn(f64) -> (Complex64, Complex64) {
    move |t| {
        let w = Complex64::from_polar(radius, theta0 + 2.0 * std::f64::consts::PI * t);
        (
            center + w,
            Complex64::i() * 2.0 * std::f64::consts::PI * w,
        )
    }
}

// ---------------------------------------------------------------------------
// Sampling a solved metric near one puncture
// ---------------------------------------------------------------------------

/// Catmull–Rom interpolation of a nodal collar field in `(rho, theta)`,
/// periodic in `theta`; returns value and first derivatives.
pub(crate) struct CollarSpline<'a> {
    patch: &'a Patch,
    u: &'a [f64],
}

fn cr_weights(s: f64) -> ([f64; 4], [f64; 4]) {
    let s2 = s * s;
    let s3 = s2 * s;
    let w = [
        -0.5 * s + s2 - 0.5 * s3,
        1.0 - 2.5 * s2 + 1.5 * s3,
        0.5 * s + 2.0 * s2 - 1.5 * s3,
        -0.5 * s2 + 0.5 * s3,
    ];
    let dw = [
        -0.5 + 2.0 * s - 1.5 * s2,
        -5.0 * s + 4.5 * s2,
        0.5 + 4.0 * s - 4.5 * s2,
        -s + 1.5 * s2,
    ];
    (w, dw)
}

impl<'a> CollarSpline<'a> {
    pub(crate) fn new(patch: &'a Patch, u: &'a [f64]) -> Self {
        CollarSpline { patch, u }
    }

    /// `(u, u_rho, u_theta)` at an off-grid point.
    pub(crate) fn eval(&self, rho: f64, theta: f64) -> Result<(f64, f64, f64), TransportError> {
        let p = self.patch;
        let two_pi = 2.0 * std::f64::consts::PI;
        let th = (theta - p.y0).rem_euclid(two_pi);
        let xi = (rho - p.x0) / p.hx;
        let i1 = xi.floor() as i64;
        if i1 < 1 || i1 + 2 >= p.nx as i64 {
            return Err(TransportError::OutsideCollar { rho, theta });
        }
        let i1 = i1 as usize;
        let sx = xi - i1 as f64;
        let eta = th / p.hy;
        let j1 = (eta.floor() as usize).min(p.ny - 1);
        let sy = eta - j1 as f64;
        let (wy, dwy) = cr_weights(sy);
        let (wx, dwx) = cr_weights(sx);
        let mut q = [0.0; 4];
        let mut dq = [0.0; 4];
        for (m, (qm, dqm)) in q.iter_mut().zip(dq.iter_mut()).enumerate() {
            let i = i1 - 1 + m;
            for (c, (&w, &dw)) in wy.iter().zip(&dwy).enumerate() {
                let j = (j1 + p.ny + c - 1) % p.ny;
                let v = self.u[p.idx(i, j)];
                *qm += w * v;
                *dqm += dw * v;
            }
        }
        let mut val = 0.0;
        let mut d_rho = 0.0;
        let mut d_theta = 0.0;
        for m in 0..4 {
            val += wx[m] * q[m];
            d_rho += dwx[m] * q[m];
            d_theta += wx[m] * dq[m];
        }
        Ok((val, d_rho / p.hx, d_theta / p.hy))
    }
}

/// A solved conformal factor restricted to one puncture collar, exposed in
/// that puncture's canonical coordinate `w` (valid for `|w| < r_b`, where
/// the background is exactly the puncture model):
/// `e^psi = e^u (-log|w|^2)`.
pub struct SolvedData<'a> {
    atlas: &'a ChartAtlas,
    u: &'a [Vec<f64>],
    site: usize,
}

impl<'a> SolvedData<'a> {
    pub fn new(atlas: &'a ChartAtlas, u: &'a [Vec<f64>], site: usize) -> Self {
        assert!(site < atlas.sites.len());
        SolvedData { atlas, u, site }
    }

    pub fn chart(&self) -> &CanonicalChart {
        &self.atlas.sites[self.site].chart
    }

    fn sample(&self, w: Complex64) -> (f64, f64, f64) {
        let p = &self.atlas.patches[self.site];
        let spline = CollarSpline::new(p, &self.u[self.site]);
        let rho = w.norm().ln();
        debug_assert!(w.norm() < self.atlas.sites[self.site].r_b);
        spline
            .eval(rho, w.arg())
            .unwrap_or_else(|e| panic!("transport circle left the collar: {e}"))
    }
}

impl SurfaceData for SolvedData<'_> {
    fn psi(&self, w: Complex64) -> f64 {
        let (u, _, _) = self.sample(w);
        u + (-w.norm_sqr().ln()).ln()
    }
    fn dpsi(&self, w: Complex64) -> Complex64 {
        let (_, du_rho, du_th) = self.sample(w);
        // d/dw = e^{-(rho + i theta)} (d_rho - i d_theta) / 2.
        let u_w = Complex64::new(du_rho, -du_th) / (2.0 * w);
        let l = w.norm_sqr().ln();
        u_w + 1.0 / (w * l)
    }
    fn cubic(&self, w: Complex64) -> Complex64 {
        // The canonical coordinate puts the differential in the normal form
        // dw^3 / w on the whole collar; this is the same normalization the
        // solver's background uses, and the chart construction certifies it
        // against the rational expression at build time.
        1.0 / w
    }
}

/// Collar field sampler for probing `u` itself (used by diagnostics).
pub fn sample_collar_field(
    atlas: &ChartAtlas,
    field: &[Vec<f64>],
    site: usize,
    w: Complex64,
) -> Result<f64, TransportError> {
    let p = &atlas.patches[site];
    debug_assert!(matches!(p.kind, PatchKind::Collar { .. }));
    let spline = CollarSpline::new(p, &field[site]);
    let (v, _, _) = spline.eval(w.norm().ln(), w.arg())?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NodeRole;

    #[test]
    fn seed_frame_has_exact_first_integral() {
        let z0 = Complex64::new(0.01, 0.0);
        let fr = init_frame(&ModelData, z0, 0.3).unwrap();
        let want = 0.5 * ModelData.psi(z0).exp();
        let det = fr.transverse_det();
        assert!((det.im - want).abs() < 1e-13 * want);
        assert!(det.re.abs() < 1e-13 * want);
    }

    #[test]
    fn degenerate_seed_is_rejected() {
        // e^psi = -log|z|^2 vanishes on the unit circle.
        assert!(matches!(
            init_frame(&ModelData, Complex64::new(1.0, 0.0), 0.0),
            Err(TransportError::DegenerateSeed { .. })
        ));
    }

    #[test]
    fn model_circle_conserves_determinant() {
        let r = (-6.0f64).exp();
        let fr = init_frame(&ModelData, Complex64::new(r, 0.0), 0.0).unwrap();
        let out = transport(&ModelData, circle_path(Complex64::ZERO, r, 0.0), &fr).unwrap();
        assert!(out.det_drift < 1e-9, "drift {}", out.det_drift);
        assert!(out.steps >= 100);
    }

    #[test]
    fn flat_loop_restores_the_frame() {
        let fr = init_frame(&FlatData, Complex64::ZERO, 0.0).unwrap();
        let out = transport(
            &FlatData,
            circle_path(Complex64::new(0.3, -0.2), 1.0, 0.7),
            &fr,
        )
        .unwrap();
        // The integrand is oscillatory; at the capped step the global RK4
        // error sits near 1e-9.
        for k in 0..3 {
            assert!((out.frame.fz[k] - fr.fz[k]).norm() < 1e-7);
            assert!((out.frame.f[k] - fr.f[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn stiff_coefficients_underflow_the_step() {
        struct Huge;
        impl SurfaceData for Huge {
            fn psi(&self, _z: Complex64) -> f64 {
                60.0
            }
            fn dpsi(&self, _z: Complex64) -> Complex64 {
                Complex64::ZERO
            }
            fn cubic(&self, _z: Complex64) -> Complex64 {
                Complex64::ZERO
            }
        }
        let fr = Frame {
            f: [0.0; 3],
            fz: [Complex64::ZERO; 3],
        };
        assert!(matches!(
            transport(&Huge, circle_path(Complex64::ZERO, 1.0, 0.0), &fr),
            Err(TransportError::StepUnderflow { .. })
        ));
    }

    #[test]
    fn spline_reproduces_smooth_fields() {
        // Quadratics are reproduced exactly by Catmull-Rom (centered slopes
        // are exact for them); the periodic direction converges at O(h^2)
        // in the derivative, so it needs a denser grid.
        let nx = 40;
        let ny = 512;
        let hy = 2.0 * std::f64::consts::PI / ny as f64;
        let p = Patch {
            kind: PatchKind::North,
            nx,
            ny,
            x0: -4.0,
            y0: 0.0,
            hx: 0.05,
            hy,
            periodic_y: true,
            roles: vec![NodeRole::Interior; nx * ny],
            ties: vec![None; nx * ny],
            frame: vec![Complex64::ZERO; nx * ny],
            frame_deriv: vec![Complex64::ZERO; nx * ny],
            mark: vec![None; nx * ny],
        };
        let f = |rho: f64, th: f64| 0.3 * rho * rho + th.sin();
        let mut vals = vec![0.0; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let (rho, th) = p.coords(i, j);
                vals[p.idx(i, j)] = f(rho, th);
            }
        }
        let spline = CollarSpline::new(&p, &vals);
        let (v, dr, dt) = spline.eval(-3.777, 1.234).unwrap();
        assert!((v - f(-3.777, 1.234)).abs() < 1e-5);
        assert!((dr - 0.6 * -3.777).abs() < 1e-10);
        assert!((dt - 1.234f64.cos()).abs() < 1e-4);
        assert!(matches!(
            spline.eval(-4.0, 0.0),
            Err(TransportError::OutsideCollar { .. })
        ));
    }
}
