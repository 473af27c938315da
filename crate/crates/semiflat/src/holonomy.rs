//! Affine holonomy of the developing map. Transporting the frame once
//! around a puncture gives a 3x3 matrix `P = E_1 E_0^{-1}` fixing `e_3`
//! (columns of `E` are `f_x`, `f_y`, `e_3`); its upper-left block plus the
//! offset of the base point is an area-preserving affine map of the plane.
//! Around a simple pole this map is parabolic — unipotent linear part with
//! a fixed point — approaching the identity like `2 pi / |log r|` as the
//! loop tightens.

use crate::transport::{
    circle_path, init_frame, transport, transport_sampled, Frame, SurfaceData, TransportError,
};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HolonomyError {
    #[error("holonomy not unipotent: trace - 2 = {trace_dev:.4e}, det - 1 = {det_dev:.4e}")]
    NotUnipotent { trace_dev: f64, det_dev: f64 },
    #[error("frame matrix nearly singular (det {det:.4e})")]
    IllConditioned { det: f64 },
    #[error("ray limit did not converge (contraction ratio {ratio:.4})")]
    NoConvergence { ratio: f64 },
    #[error("developed loop crosses the axis tangentially near sample {index}")]
    TangentialCrossing { index: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

// Small fixed-size helpers; nothing here warrants a matrix library.

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, out) in row.iter_mut().enumerate() {
            *out = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn mat3_det(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn mat3_inv(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = mat3_det(m);
    if det.abs() < 1e-300 {
        return None;
    }
    let c = |r: usize, s: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (s1, s2) = ((s + 1) % 3, (s + 2) % 3);
        m[r1][s1] * m[r2][s2] - m[r1][s2] * m[r2][s1]
    };
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, out) in row.iter_mut().enumerate() {
            *out = c(j, i) / det; // adjugate transpose
        }
    }
    Some(inv)
}

fn mat3_apply(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..3).map(|k| m[i][k] * v[k]).sum();
    }
    out
}

fn frame_matrix(fr: &Frame) -> [[f64; 3]; 3] {
    let mut e = [[0.0; 3]; 3];
    for r in 0..3 {
        e[r][0] = 2.0 * fr.fz[r].re;
        e[r][1] = -2.0 * fr.fz[r].im;
        e[r][2] = if r == 2 { 1.0 } else { 0.0 };
    }
    e
}

/// Area-preserving affine map of the developing plane.
#[derive(Clone, Debug)]
pub struct AffineMap2 {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl AffineMap2 {
    pub fn identity() -> Self {
        AffineMap2 {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    pub fn apply(&self, x: [f64; 2]) -> [f64; 2] {
        [
            self.linear[0][0] * x[0] + self.linear[0][1] * x[1] + self.translation[0],
            self.linear[1][0] * x[0] + self.linear[1][1] * x[1] + self.translation[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.linear[0][0] * self.linear[1][1] - self.linear[0][1] * self.linear[1][0]
    }

    pub fn trace(&self) -> f64 {
        self.linear[0][0] + self.linear[1][1]
    }

    pub fn eigenvalues(&self) -> (Complex64, Complex64) {
        let half_tr = 0.5 * self.trace();
        let disc = Complex64::new(half_tr * half_tr - self.det(), 0.0).sqrt();
        (half_tr + disc, half_tr - disc)
    }

    /// Largest singular value of `linear - I`: how far from the identity.
    pub fn deviation(&self) -> f64 {
        let m = [
            [self.linear[0][0] - 1.0, self.linear[0][1]],
            [self.linear[1][0], self.linear[1][1] - 1.0],
        ];
        sigma1(&m)
    }

    /// Minimal-norm least-squares solution of `(linear - I) x = -t` and its
    /// residual: the fixed point, when the residual is small.
    pub fn fixed_point(&self) -> ([f64; 2], f64) {
        let a = [
            [self.linear[0][0] - 1.0, self.linear[0][1]],
            [self.linear[1][0], self.linear[1][1] - 1.0],
        ];
        let t = self.translation;
        // Tikhonov-regularized normal equations; the linear part is within
        // rounding of singular for parabolic maps.
        let g = [
            [
                a[0][0] * a[0][0] + a[1][0] * a[1][0],
                a[0][0] * a[0][1] + a[1][0] * a[1][1],
            ],
            [
                a[0][1] * a[0][0] + a[1][1] * a[1][0],
                a[0][1] * a[0][1] + a[1][1] * a[1][1],
            ],
        ];
        let scale = g[0][0].max(g[1][1]).max(1e-300);
        let delta = 1e-12 * scale;
        let rhs = [
            -(a[0][0] * t[0] + a[1][0] * t[1]),
            -(a[0][1] * t[0] + a[1][1] * t[1]),
        ];
        let det = (g[0][0] + delta) * (g[1][1] + delta) - g[0][1] * g[1][0];
        let x = [
            ((g[1][1] + delta) * rhs[0] - g[0][1] * rhs[1]) / det,
            (-g[1][0] * rhs[0] + (g[0][0] + delta) * rhs[1]) / det,
        ];
        let r = [
            a[0][0] * x[0] + a[0][1] * x[1] + t[0],
            a[1][0] * x[0] + a[1][1] * x[1] + t[1],
        ];
        (x, (r[0] * r[0] + r[1] * r[1]).sqrt())
    }
}

fn sigma1(m: &[[f64; 2]; 2]) -> f64 {
    let g11 = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let g22 = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let g12 = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let mean = 0.5 * (g11 + g22);
    let rad = (0.25 * (g11 - g22) * (g11 - g22) + g12 * g12).sqrt();
    (mean + rad).max(0.0).sqrt()
}

pub struct LoopHolonomy {
    pub map: AffineMap2,
    /// Full 3x3 transport matrix, including the potential row.
    pub p3: [[f64; 3]; 3],
    /// Max relative drift of the transport first integral along the loop.
    pub det_drift: f64,
}

/// Holonomy of the counterclockwise circle `center + r e^{i theta}`,
/// starting and ending at `theta0`.
pub fn loop_holonomy<S: SurfaceData>(
    surface: &S,
    center: Complex64,
    radius: f64,
    theta0: f64,
) -> Result<LoopHolonomy, HolonomyError> {
    let z0 = center + Complex64::from_polar(radius, theta0);
    let seed = init_frame(surface, z0, 0.0)?;
    let out = transport(surface, circle_path(center, radius, theta0), &seed)?;
    holonomy_between(&seed, &out.frame, out.det_drift)
}

/// Affine map sending the development at one frame to the development at
/// another frame over the same point.
pub fn holonomy_between(
    start: &Frame,
    end: &Frame,
    det_drift: f64,
) -> Result<LoopHolonomy, HolonomyError> {
    let e0 = frame_matrix(start);
    let e1 = frame_matrix(end);
    let inv0 = mat3_inv(&e0).ok_or(HolonomyError::IllConditioned {
        det: mat3_det(&e0),
    })?;
    let p3 = mat3_mul(&e1, &inv0);
    let pf0 = mat3_apply(&p3, &start.f);
    let map = AffineMap2 {
        linear: [[p3[0][0], p3[0][1]], [p3[1][0], p3[1][1]]],
        translation: [end.f[0] - pf0[0], end.f[1] - pf0[1]],
    };
    Ok(LoopHolonomy {
        map,
        p3,
        det_drift,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Classification {
    Identity,
    /// Unipotent linear part, no fixed point in the plane.
    Translation { t: [f64; 2] },
    /// Unipotent linear part with a fixed point: the puncture class.
    ParabolicWithFixedPoint { fixed_point: [f64; 2] },
}

pub fn classify(map: &AffineMap2, tol: f64) -> Result<Classification, HolonomyError> {
    let trace_dev = map.trace() - 2.0;
    let det_dev = map.det() - 1.0;
    if trace_dev.abs() > tol || det_dev.abs() > tol {
        return Err(HolonomyError::NotUnipotent { trace_dev, det_dev });
    }
    let tnorm = (map.translation[0].powi(2) + map.translation[1].powi(2)).sqrt();
    if map.deviation() <= tol && tnorm <= tol {
        return Ok(Classification::Identity);
    }
    let (x, res) = map.fixed_point();
    if res <= tol * (1.0 + tnorm) {
        Ok(Classification::ParabolicWithFixedPoint { fixed_point: x })
    } else {
        Ok(Classification::Translation {
            t: map.translation,
        })
    }
}

pub struct RayLimit {
    /// Extrapolated image of the puncture in the developing plane.
    pub point: [f64; 2],
    /// Per-unit-depth contraction ratio of consecutive increments.
    pub ratio: f64,
    /// Relative residual of the point in the deepest loop's fixed-point
    /// equation `(L - I) x = -t`.
    pub cross_check: f64,
}

fn ray_path(
    center: Complex64,
    theta0: f64,
    a: f64,
    b: f64,
) -> impl Fn(f64) -> (Complex64, Complex64) {
    move |t: f64| {
        let depth = a + (b - a) * t;
        let w = Complex64::from_polar((-depth).exp(), theta0);
        (center + w, -(b - a) * w)
    }
}

/// Geometric-sequence limit of three consecutive plane positions.
fn geometric_limit(
    f0: [f64; 2],
    f1: [f64; 2],
    f2: [f64; 2],
) -> Result<([f64; 2], f64), HolonomyError> {
    let d1 = ((f1[0] - f0[0]).powi(2) + (f1[1] - f0[1]).powi(2)).sqrt();
    let d2 = ((f2[0] - f1[0]).powi(2) + (f2[1] - f1[1]).powi(2)).sqrt();
    if d1 <= 0.0 {
        return Err(HolonomyError::NoConvergence { ratio: f64::NAN });
    }
    let q = d2 / d1;
    if !(q < 0.95) {
        return Err(HolonomyError::NoConvergence { ratio: q });
    }
    Ok((
        [
            f2[0] + (f2[0] - f1[0]) * q / (1.0 - q),
            f2[1] + (f2[1] - f1[1]) * q / (1.0 - q),
        ],
        q,
    ))
}

/// Extends a development inward along the ray `theta = theta0` from depth
/// `y` through `y + 2 dy` and extrapolates the puncture image, verifying it
/// against the fixed-point equation of the deepest circle in the same
/// developed picture.
fn ray_limit_from<S: SurfaceData>(
    surface: &S,
    seed: &Frame,
    center: Complex64,
    theta0: f64,
    y: f64,
    dy: f64,
) -> Result<RayLimit, HolonomyError> {
    let leg1 = transport(surface, ray_path(center, theta0, y, y + dy), seed)?;
    let leg2 = transport(
        surface,
        ray_path(center, theta0, y + dy, y + 2.0 * dy),
        &leg1.frame,
    )?;
    let (point, ratio) = geometric_limit(
        [seed.f[0], seed.f[1]],
        [leg1.frame.f[0], leg1.frame.f[1]],
        [leg2.frame.f[0], leg2.frame.f[1]],
    )?;
    let circle = transport(
        surface,
        circle_path(center, (-(y + 2.0 * dy)).exp(), theta0),
        &leg2.frame,
    )?;
    let hol = holonomy_between(&leg2.frame, &circle.frame, circle.det_drift)?;
    let a = [
        [hol.map.linear[0][0] - 1.0, hol.map.linear[0][1]],
        [hol.map.linear[1][0], hol.map.linear[1][1] - 1.0],
    ];
    let t = hol.map.translation;
    let r = [
        a[0][0] * point[0] + a[0][1] * point[1] + t[0],
        a[1][0] * point[0] + a[1][1] * point[1] + t[1],
    ];
    let tnorm = (t[0] * t[0] + t[1] * t[1]).sqrt();
    let cross_check = (r[0] * r[0] + r[1] * r[1]).sqrt() / (1.0 + tnorm);
    Ok(RayLimit {
        point,
        ratio,
        cross_check,
    })
}

/// Develops the ray `theta = theta0` inward through depths `y`, `y + dy`,
/// `y + 2 dy` (`|z| = e^{-y}`) from a fresh seed at depth `y`.
pub fn dev_infinity<S: SurfaceData>(
    surface: &S,
    theta0: f64,
    y: f64,
    dy: f64,
) -> Result<RayLimit, HolonomyError> {
    let seed = init_frame(surface, Complex64::from_polar((-y).exp(), theta0), 0.0)?;
    ray_limit_from(surface, &seed, Complex64::ZERO, theta0, y, dy)
}

pub struct DecayFit {
    /// Least-squares slope of `log distance-to-limit` against depth `y`.
    pub slope: f64,
    pub residual: f64,
    pub samples: usize,
}

/// Fits the exponential approach rate of the developed canonical-phase ray
/// toward its limit over depths `[y_lo, y_hi]`.
pub fn decay_rate<S: SurfaceData>(
    surface: &S,
    y_lo: f64,
    y_hi: f64,
    n: usize,
) -> Result<DecayFit, HolonomyError> {
    assert!(n >= 4 && y_hi > y_lo);
    let seed = init_frame(surface, Complex64::new((-y_lo).exp(), 0.0), 0.0)?;
    let (res, samples) =
        transport_sampled(surface, ray_path(Complex64::ZERO, 0.0, y_lo, y_hi), &seed, n - 1)?;
    // Limit from extending the same development past the deepest sample.
    let limit = ray_limit_from(surface, &res.frame, Complex64::ZERO, 0.0, y_hi, 1.0)?;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for (k, fr) in samples.iter().enumerate() {
        let y = y_lo + (y_hi - y_lo) * k as f64 / (n - 1) as f64;
        let d = ((fr.f[0] - limit.point[0]).powi(2) + (fr.f[1] - limit.point[1]).powi(2)).sqrt();
        if d > 0.0 {
            xs.push(y);
            ys.push(d.ln());
        }
    }
    let m = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let intercept = (sy - slope * sx) / m;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - slope * x - intercept).abs())
        .fold(0.0f64, f64::max);
    Ok(DecayFit {
        slope,
        residual,
        samples: xs.len(),
    })
}

/// Degree of the developed loop around the puncture image, computed in a
/// positively oriented frame adapted to the nilpotent part `N = L - I`
/// (which de-skews the very eccentric raw curve). The puncture image is
/// located by the inward-ray extrapolation in the same development. The
/// angle is accumulated sample to sample; the curve must stay clearly away
/// from the center and cross the second axis transversally.
pub fn winding_number<S: SurfaceData>(
    surface: &S,
    center: Complex64,
    radius: f64,
    theta0: f64,
    samples: usize,
) -> Result<i32, HolonomyError> {
    assert!(samples >= 16);
    let z0 = center + Complex64::from_polar(radius, theta0);
    let seed = init_frame(surface, z0, 0.0)?;
    let (res, frames) =
        transport_sampled(surface, circle_path(center, radius, theta0), &seed, samples)?;
    let hol = holonomy_between(&seed, &res.frame, res.det_drift)?;
    let trace_dev = hol.map.trace() - 2.0;
    let det_dev = hol.map.det() - 1.0;
    if trace_dev.abs() > 1e-3 || det_dev.abs() > 1e-3 {
        return Err(HolonomyError::NotUnipotent { trace_dev, det_dev });
    }
    let limit = ray_limit_from(surface, &seed, center, theta0, -radius.ln(), 1.0)?;
    let fp = limit.point;

    // Orthonormal nilpotent-adapted basis: n1 spans the image of N (which
    // equals its kernel), n2 completes it with positive orientation.
    let a = [
        [hol.map.linear[0][0] - 1.0, hol.map.linear[0][1]],
        [hol.map.linear[1][0], hol.map.linear[1][1] - 1.0],
    ];
    let c0 = (a[0][0] * a[0][0] + a[1][0] * a[1][0]).sqrt();
    let c1 = (a[0][1] * a[0][1] + a[1][1] * a[1][1]).sqrt();
    let n1 = if c0 >= c1 {
        [a[0][0] / c0, a[1][0] / c0]
    } else {
        [a[0][1] / c1, a[1][1] / c1]
    };
    let mut n2 = [-n1[1], n1[0]]; // rotate +90: det [n1 n2] = +1
    if n1[0] * n2[1] - n1[1] * n2[0] < 0.0 {
        n2 = [-n2[0], -n2[1]];
    }

    let mut alpha: Vec<(f64, f64)> = frames
        .iter()
        .map(|fr| {
            let g = [fr.f[0] - fp[0], fr.f[1] - fp[1]];
            (g[0] * n1[0] + g[1] * n1[1], g[0] * n2[0] + g[1] * n2[1])
        })
        .collect();
    // The developed circle is an open arc: its endpoint is the holonomy
    // image of its start, displaced along n1 by an O(1/depth) fraction of
    // the curve scale. Close the polyline with the chord back to the start
    // so the accumulated angle is an exact multiple of 2 pi up to the
    // center-location error.
    alpha.push(alpha[0]);
    let scale = alpha
        .iter()
        .map(|&(x, y)| (x * x + y * y).sqrt())
        .fold(0.0f64, f64::max);
    // The loop is traversed once; demand a transversal second-axis crossing
    // to anchor the count (rules out degenerate, collapsed curves).
    let mut anchored = false;
    for (k, pair) in alpha.windows(2).enumerate() {
        let (_, y0) = pair[0];
        let (_, y1) = pair[1];
        if y0.signum() != y1.signum() {
            if (y1 - y0).abs() < 1e-9 * scale {
                return Err(HolonomyError::TangentialCrossing { index: k });
            }
            anchored = true;
        }
    }
    if !anchored {
        return Err(HolonomyError::TangentialCrossing { index: 0 });
    }
    let mut total = 0.0f64;
    for (k, pair) in alpha.windows(2).enumerate() {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        let r0 = (x0 * x0 + y0 * y0).sqrt();
        let r1 = (x1 * x1 + y1 * y1).sqrt();
        if r0 < 1e-8 * scale || r1 < 1e-8 * scale {
            return Err(HolonomyError::TangentialCrossing { index: k });
        }
        let cross = x0 * y1 - y0 * x1;
        let dot = x0 * x1 + y0 * y1;
        total += cross.atan2(dot);
    }
    let turns = total / (2.0 * std::f64::consts::PI);
    let w = turns.round();
    if (turns - w).abs() > 0.05 {
        return Err(HolonomyError::TangentialCrossing {
            index: samples,
        });
    }
    Ok(w as i32)
}
