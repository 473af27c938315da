//! Exact affine-sphere geometry from holomorphic data.
//!
//! Near a simple pole the geometry is encoded by two log-holomorphic
//! primitives `F`, `G`: the base coordinates, their Legendre duals, the
//! metric factor and the cubic coefficient are all algebraic in the pair
//! and its derivatives. Admissible pairs come from free data `(j, k)`
//! subject to the volume normalization `-16 pi = (1 + z k') j^2`; this
//! module builds them by termwise integration, recovers the pair back from
//! immersion samples, and applies the Legendre, mirror and gauge
//! symmetries. Everything is series arithmetic — no discretization — so it
//! serves as ground truth for the PDE solver and for the transported
//! developments.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::Series;
use crate::transport::SurfaceData;

#[derive(Debug, Error)]
pub enum BlaschkeError {
    #[error("volume normalization violated: residual {residual:.3e}")]
    ConstraintViolated { residual: f64 },
    #[error("metric degenerate at z = {z}: {value:.3e}")]
    MetricDegenerate { z: Complex64, value: f64 },
    #[error("Cauchy-Riemann residual {residual:.3e} exceeds tolerance")]
    NotHolomorphic { residual: f64 },
    #[error("Hessian not positive definite at sample {index}: min eigenvalue {min_eig:.3e}")]
    ConvexityFailure { index: usize, min_eig: f64 },
    #[error("bad encoding: {detail}")]
    Encoding { detail: String },
}

const VOLUME: f64 = -16.0 * PI;

// ---------------------------------------------------------------------------
// Log-holomorphic series
// ---------------------------------------------------------------------------

/// `a(z) + b(z) log z`. Multivalued through the log: evaluation takes a
/// sheet index, with `log z = Log z + 2 pi i * sheet` on the principal
/// branch `Log` (cut along the negative real axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSeries {
    pub a: Series,
    pub b: Series,
}

fn log_branch(z: Complex64, sheet: i32) -> Complex64 {
    z.ln() + Complex64::new(0.0, 2.0 * PI * sheet as f64)
}

impl LogSeries {
    /// A single-valued series, `b = 0`.
    pub fn plain(a: Series) -> Self {
        let b = Series::zero(a.order());
        LogSeries { a, b }
    }

    pub fn eval(&self, z: Complex64, sheet: i32) -> Complex64 {
        self.eval_with(z, log_branch(z, sheet))
    }

    fn eval_with(&self, z: Complex64, lg: Complex64) -> Complex64 {
        let bz = self.b.eval(z);
        if bz == Complex64::ZERO {
            return self.a.eval(z);
        }
        self.a.eval(z) + bz * lg
    }

    /// Termwise derivative. The log coefficient of a primitive built here
    /// vanishes at 0, so the `b/z` contribution stays a power series.
    pub fn derivative(&self) -> LogSeries {
        assert!(
            self.b.coeff(0).norm() < 1e-14,
            "derivative would introduce a pole: b(0) = {}",
            self.b.coeff(0)
        );
        let shifted = if self.b.order() == 0 {
            Series::zero(0)
        } else {
            Series::new(self.b.coeffs()[1..].to_vec())
        };
        LogSeries {
            a: self.a.derivative().add(&shifted),
            b: self.b.derivative(),
        }
    }
}

/// Pointwise evaluator for the derivative of a [`LogSeries`] whose log
/// coefficient does not vanish at the origin — the derivative then carries
/// the simple pole `b(z)/z` and leaves the series ring.
struct PoleDeriv {
    ad: Series,
    bd: Series,
    b: Series,
}

impl PoleDeriv {
    fn new(p: &LogSeries) -> Self {
        PoleDeriv {
            ad: p.a.derivative(),
            bd: p.b.derivative(),
            b: p.b.clone(),
        }
    }

    fn eval_with(&self, z: Complex64, lg: Complex64) -> Complex64 {
        self.ad.eval(z) + self.bd.eval(z) * lg + self.b.eval(z) / z
    }
}

// ---------------------------------------------------------------------------
// The pair (F, G) and its generating data (j, k)
// ---------------------------------------------------------------------------

/// The primitive pair `(F, G)`; all geometry is algebraic in it. Built
/// pairs are normalized so both vanish along radial paths into the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct HoloPair {
    pub f: LogSeries,
    pub g: LogSeries,
}

impl HoloPair {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "branch": "principal-log",
            "f": self.f,
            "g": self.g,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<HoloPair, BlaschkeError> {
        let branch = v.get("branch").and_then(|b| b.as_str()).unwrap_or("");
        if branch != "principal-log" {
            return Err(BlaschkeError::Encoding {
                detail: format!("unsupported branch tag {branch:?}"),
            });
        }
        let field = |name: &str| -> Result<LogSeries, BlaschkeError> {
            let raw = v.get(name).ok_or_else(|| BlaschkeError::Encoding {
                detail: format!("missing field {name:?}"),
            })?;
            serde_json::from_value(raw.clone()).map_err(|e| BlaschkeError::Encoding {
                detail: e.to_string(),
            })
        };
        Ok(HoloPair {
            f: field("f")?,
            g: field("g")?,
        })
    }
}

/// Free generating data: a unit `j` with `j(0)^2 = -16 pi` and the
/// integrated compatibility series `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelData {
    pub j: Series,
    pub k: Series,
}

impl ModelData {
    /// Solve `k' = (-16 pi / j^2 - 1)/z` termwise; the `1/z` obstruction
    /// cancels exactly when `j(0)^2 = -16 pi`.
    pub fn from_j(j: Series, k0: Complex64) -> Result<ModelData, BlaschkeError> {
        let head = j.coeff(0) * j.coeff(0) - Complex64::new(VOLUME, 0.0);
        if head.norm() > 1e-10 * VOLUME.abs() {
            return Err(BlaschkeError::ConstraintViolated {
                residual: head.norm(),
            });
        }
        let order = j.order();
        let s = Series::constant(Complex64::new(VOLUME, 0.0), order)
            .div(&j.mul(&j))
            .sub(&Series::constant(Complex64::ONE, order));
        // Drop the (vanishing) constant term: k'(z) = s(z)/z.
        let kp = if order == 0 {
            Series::zero(0)
        } else {
            Series::new(s.coeffs()[1..].to_vec())
        };
        Ok(ModelData {
            j,
            k: kp.integral(k0).truncate(order),
        })
    }

    /// The constant solution: `j = 4 i sqrt(pi)`, `k = 0`.
    pub fn standard(order: usize) -> ModelData {
        let j0 = Complex64::new(0.0, 4.0 * PI.sqrt());
        ModelData {
            j: Series::constant(j0, order),
            k: Series::zero(order),
        }
    }

    /// Largest coefficient of `(1 + z k') j^2 + 16 pi` through the common
    /// truncation order.
    pub fn constraint_residual(&self) -> f64 {
        let order = self.j.order().min(self.k.order());
        let kp = self.k.derivative().truncate(order);
        let zkp = {
            let mut c = vec![Complex64::ZERO; order + 1];
            for m in 1..=order {
                c[m] = kp.coeff(m - 1);
            }
            Series::new(c)
        };
        let lhs = Series::constant(Complex64::ONE, order)
            .add(&zkp)
            .mul(&self.j)
            .mul(&self.j);
        let target = Series::constant(Complex64::new(VOLUME, 0.0), order);
        lhs.sub(&target)
            .coeffs()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "j": self.j, "k": self.k })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<ModelData, BlaschkeError> {
        serde_json::from_value(v.clone()).map_err(|e| BlaschkeError::Encoding {
            detail: e.to_string(),
        })
    }
}

/// Antiderivative of `a + b log z` vanishing at the origin, using the
/// primitive `int z^m log z = z^{m+1} log z / (m+1) - z^{m+1}/(m+1)^2`.
fn integrate_log(p: &LogSeries) -> LogSeries {
    let bi = p.b.integral(Complex64::ZERO);
    let mut corr = vec![Complex64::ZERO; p.b.order() + 2];
    for (m, c) in corr.iter_mut().enumerate().skip(1) {
        *c = -p.b.coeff(m - 1) / (m as f64 * m as f64);
    }
    LogSeries {
        a: p.a.integral(Complex64::ZERO).add(&Series::new(corr)),
        b: bi,
    }
}

/// Build the pair from generating data:
/// `G' = -(j / 4 pi)(log z + k)`, `F' = G' - j`, then integrate termwise.
pub fn model_fg(data: &ModelData) -> Result<HoloPair, BlaschkeError> {
    let residual = data.constraint_residual();
    if residual > 1e-12 * VOLUME.abs() {
        return Err(BlaschkeError::ConstraintViolated { residual });
    }
    let scale = Complex64::new(-1.0 / (4.0 * PI), 0.0);
    let gp = LogSeries {
        a: data.j.mul(&data.k).scale(scale),
        b: data.j.scale(scale),
    };
    let fp = LogSeries {
        a: gp.a.sub(&data.j),
        b: gp.b.clone(),
    };
    Ok(HoloPair {
        f: integrate_log(&fp),
        g: integrate_log(&gp),
    })
}

// ---------------------------------------------------------------------------
// Geometry of a pair
// ---------------------------------------------------------------------------

/// Metric factor `e^psi = (|G'|^2 - |F'|^2) / 4`. Branch-independent: a
/// sheet change shifts both derivatives by the same multiple of `j`, which
/// drops out of the difference of squares.
pub fn metric_from_fg(pair: &HoloPair, z: Complex64) -> Result<f64, BlaschkeError> {
    let gp = pair.g.derivative().eval(z, 0);
    let fp = pair.f.derivative().eval(z, 0);
    let value = 0.25 * (gp.norm_sqr() - fp.norm_sqr());
    if value <= 0.0 || !value.is_finite() {
        return Err(BlaschkeError::MetricDegenerate { z, value });
    }
    Ok(value)
}

/// Cubic coefficient `U = (G' F'' - F' G'') / 4`. The log terms cancel
/// identically, so any consistent branch gives the same value; for pairs
/// built by [`model_fg`] this equals `1/z` through the truncation order.
pub fn cubic_from_fg(pair: &HoloPair, z: Complex64) -> Complex64 {
    let fp = pair.f.derivative();
    let gp = pair.g.derivative();
    let fpp = PoleDeriv::new(&fp);
    let gpp = PoleDeriv::new(&gp);
    let lg = log_branch(z, 0);
    0.25
        * (gp.eval_with(z, lg) * fpp.eval_with(z, lg)
            - fp.eval_with(z, lg) * gpp.eval_with(z, lg))
}

/// Point sampler over a pair: caches the derivative series once and serves
/// the immersion coordinates, their duals, and the [`SurfaceData`] fields
/// used by the transport integrator.
pub struct PairSampler {
    pair: HoloPair,
    fp: LogSeries,
    gp: LogSeries,
    fpp: PoleDeriv,
    gpp: PoleDeriv,
}

impl PairSampler {
    pub fn new(pair: HoloPair) -> Self {
        let fp = pair.f.derivative();
        let gp = pair.g.derivative();
        let fpp = PoleDeriv::new(&fp);
        let gpp = PoleDeriv::new(&gp);
        PairSampler {
            pair,
            fp,
            gp,
            fpp,
            gpp,
        }
    }

    pub fn pair(&self) -> &HoloPair {
        &self.pair
    }

    /// Base coordinates `alpha = (Re(G+F)/2, Im(G-F)/2)`.
    pub fn alpha(&self, z: Complex64, sheet: i32) -> [f64; 2] {
        let lg = log_branch(z, sheet);
        let fv = self.pair.f.eval_with(z, lg);
        let gv = self.pair.g.eval_with(z, lg);
        [0.5 * (gv + fv).re, 0.5 * (gv - fv).im]
    }

    /// Dual (gradient) coordinates `beta = (Re(G-F)/2, Im(G+F)/2)`.
    pub fn beta(&self, z: Complex64, sheet: i32) -> [f64; 2] {
        let lg = log_branch(z, sheet);
        let fv = self.pair.f.eval_with(z, lg);
        let gv = self.pair.g.eval_with(z, lg);
        [0.5 * (gv - fv).re, 0.5 * (gv + fv).im]
    }

    fn metric(&self, z: Complex64) -> f64 {
        let lg = log_branch(z, 0);
        0.25 * (self.gp.eval_with(z, lg).norm_sqr() - self.fp.eval_with(z, lg).norm_sqr())
    }
}

impl SurfaceData for PairSampler {
    /// `ln` of a degenerate metric is NaN; the transport integrator turns
    /// that into its own non-finite-step error, which is the right failure.
    fn psi(&self, z: Complex64) -> f64 {
        self.metric(z).ln()
    }

    fn dpsi(&self, z: Complex64) -> Complex64 {
        let lg = log_branch(z, 0);
        let gp = self.gp.eval_with(z, lg);
        let fp = self.fp.eval_with(z, lg);
        let num =
            0.25 * (self.gpp.eval_with(z, lg) * gp.conj() - self.fpp.eval_with(z, lg) * fp.conj());
        num / (0.25 * (gp.norm_sqr() - fp.norm_sqr()))
    }

    fn cubic(&self, z: Complex64) -> Complex64 {
        let lg = log_branch(z, 0);
        0.25
            * (self.gp.eval_with(z, lg) * self.fpp.eval_with(z, lg)
                - self.fp.eval_with(z, lg) * self.gpp.eval_with(z, lg))
    }
}

/// Measured growth constants: `(inf, sup)` of `e^psi / |log|z|^2|` over an
/// `n x n` sample of the annulus `r_lo <= |z| <= r_hi`.
pub fn growth_constants(
    sampler: &PairSampler,
    r_lo: f64,
    r_hi: f64,
    n: usize,
) -> Result<(f64, f64), BlaschkeError> {
    assert!(n >= 2 && 0.0 < r_lo && r_lo < r_hi && r_hi < 1.0);
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for a in 0..n {
        let r = r_lo * (r_hi / r_lo).powf(a as f64 / (n - 1) as f64);
        for b in 0..n {
            let th = 2.0 * PI * b as f64 / n as f64;
            let z = Complex64::from_polar(r, th);
            let met = sampler.metric(z);
            if met <= 0.0 || !met.is_finite() {
                return Err(BlaschkeError::MetricDegenerate { z, value: met });
            }
            let ratio = met / z.norm_sqr().ln().abs();
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
    }
    Ok((lo, hi))
}

/// Largest defect of the continuation law across one positive turn,
/// `alpha1 -> alpha1 + alpha2`, `alpha2 -> alpha2`, over the given points
/// and sheets, relative to the local scale.
pub fn monodromy_defect(sampler: &PairSampler, points: &[Complex64], sheets: &[i32]) -> f64 {
    let mut worst = 0.0f64;
    for &z in points {
        for &s in sheets {
            let before = sampler.alpha(z, s);
            let after = sampler.alpha(z, s + 1);
            let scale = 1.0 + before[0].abs() + before[1].abs();
            let d1 = (after[0] - before[0] - before[1]).abs();
            let d2 = (after[1] - before[1]).abs();
            worst = worst.max(d1.max(d2) / scale);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Immersion samples -> pair values
// ---------------------------------------------------------------------------

/// Recover `G = (a1 + b1) + i (a2 + b2)` and `F = (a1 - b1) + i (b2 - a2)`
/// on an axis-aligned grid of the conformal parameter (`z[j][i] = z0 +
/// i*hx + j*i*hy`), then test both for holomorphy by centered differences.
/// Also rejects grids where the recovered metric `(|G_z|^2 - |F_z|^2)/4`
/// is not positive — which is how non-convex input shows up.
pub fn fg_from_immersion(
    hx: f64,
    hy: f64,
    alpha: &[Vec<[f64; 2]>],
    beta: &[Vec<[f64; 2]>],
    tol: f64,
) -> Result<(Vec<Vec<Complex64>>, Vec<Vec<Complex64>>), BlaschkeError> {
    let rows = alpha.len();
    assert!(rows >= 3 && alpha[0].len() >= 3, "need at least a 3x3 grid");
    assert_eq!(rows, beta.len());
    let cols = alpha[0].len();

    let mut f = vec![vec![Complex64::ZERO; cols]; rows];
    let mut g = vec![vec![Complex64::ZERO; cols]; rows];
    for j in 0..rows {
        assert_eq!(alpha[j].len(), cols);
        assert_eq!(beta[j].len(), cols);
        for i in 0..cols {
            let a = alpha[j][i];
            let b = beta[j][i];
            g[j][i] = Complex64::new(a[0] + b[0], a[1] + b[1]);
            f[j][i] = Complex64::new(a[0] - b[0], b[1] - a[1]);
        }
    }

    let mut worst_cr = 0.0f64;
    for j in 1..rows - 1 {
        for i in 1..cols - 1 {
            for grid in [&f, &g] {
                let dx = (grid[j][i + 1] - grid[j][i - 1]) / (2.0 * hx);
                let dy = (grid[j + 1][i] - grid[j - 1][i]) / (2.0 * hy);
                let dzbar = 0.5 * (dx + Complex64::I * dy);
                let dz = 0.5 * (dx - Complex64::I * dy);
                worst_cr = worst_cr.max(dzbar.norm() / (1.0 + dz.norm()));
            }
            let gz = {
                let dx = (g[j][i + 1] - g[j][i - 1]) / (2.0 * hx);
                let dy = (g[j + 1][i] - g[j - 1][i]) / (2.0 * hy);
                0.5 * (dx - Complex64::I * dy)
            };
            let fz = {
                let dx = (f[j][i + 1] - f[j][i - 1]) / (2.0 * hx);
                let dy = (f[j + 1][i] - f[j - 1][i]) / (2.0 * hy);
                0.5 * (dx - Complex64::I * dy)
            };
            let met = 0.25 * (gz.norm_sqr() - fz.norm_sqr());
            if met <= 0.0 {
                return Err(BlaschkeError::MetricDegenerate {
                    z: Complex64::new(i as f64 * hx, j as f64 * hy),
                    value: met,
                });
            }
        }
    }
    if worst_cr > tol {
        return Err(BlaschkeError::NotHolomorphic { residual: worst_cr });
    }
    Ok((f, g))
}

// ---------------------------------------------------------------------------
// Legendre transform on samples
// ---------------------------------------------------------------------------

/// Dual data on the interior of the sample grid: `beta = grad phi` (solved
/// against the base-coordinate Jacobian) and `chi = beta . alpha - phi`.
/// `dual_det[j][i]` holds `det Hess_beta chi` on the doubly-interior nodes
/// (unimodularity of the dual potential); rows/cols shrink by two at each
/// differentiation layer.
pub struct LegendreData {
    pub beta: Vec<Vec<[f64; 2]>>,
    pub chi: Vec<Vec<f64>>,
    pub dual_det: Vec<Vec<f64>>,
}

fn solve2(m: [[f64; 2]; 2], rhs: [f64; 2]) -> Option<[f64; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let scale = m[0][0].abs() + m[0][1].abs() + m[1][0].abs() + m[1][1].abs();
    if det.abs() <= 1e-12 * scale * scale {
        return None;
    }
    Some([
        (rhs[0] * m[1][1] - rhs[1] * m[0][1]) / det,
        (m[0][0] * rhs[1] - m[1][0] * rhs[0]) / det,
    ])
}

/// Legendre transform of gridded immersion samples (same grid convention
/// as [`fg_from_immersion`]).
pub fn legendre(
    hx: f64,
    hy: f64,
    alpha: &[Vec<[f64; 2]>],
    phi: &[Vec<f64>],
) -> Result<LegendreData, BlaschkeError> {
    let rows = alpha.len();
    assert!(rows >= 5 && alpha[0].len() >= 5, "need at least a 5x5 grid");
    let cols = alpha[0].len();
    assert_eq!(rows, phi.len());

    // Gradient chain: d phi = beta . d alpha in both grid directions.
    let mut beta = vec![vec![[0.0f64; 2]; cols - 2]; rows - 2];
    for j in 1..rows - 1 {
        for i in 1..cols - 1 {
            let ax = [
                (alpha[j][i + 1][0] - alpha[j][i - 1][0]) / (2.0 * hx),
                (alpha[j][i + 1][1] - alpha[j][i - 1][1]) / (2.0 * hx),
            ];
            let ay = [
                (alpha[j + 1][i][0] - alpha[j - 1][i][0]) / (2.0 * hy),
                (alpha[j + 1][i][1] - alpha[j - 1][i][1]) / (2.0 * hy),
            ];
            let px = (phi[j][i + 1] - phi[j][i - 1]) / (2.0 * hx);
            let py = (phi[j + 1][i] - phi[j - 1][i]) / (2.0 * hy);
            let idx = (j - 1) * (cols - 2) + (i - 1);
            beta[j - 1][i - 1] = solve2([ax, ay], [px, py]).ok_or(
                BlaschkeError::ConvexityFailure {
                    index: idx,
                    min_eig: 0.0,
                },
            )?;
        }
    }

    let mut chi = vec![vec![0.0f64; cols - 2]; rows - 2];
    for j in 0..rows - 2 {
        for i in 0..cols - 2 {
            let a = alpha[j + 1][i + 1];
            let b = beta[j][i];
            chi[j][i] = b[0] * a[0] + b[1] * a[1] - phi[j + 1][i + 1];
        }
    }

    // Convexity and dual unimodularity from the doubly-interior Hessian
    // Hess_alpha phi = J_beta J_alpha^{-1}; its inverse is Hess_beta chi.
    let mut dual_det = vec![vec![0.0f64; cols - 4]; rows - 4];
    for j in 1..rows - 3 {
        for i in 1..cols - 3 {
            let ja = [
                [
                    (alpha[j + 1][i + 2][0] - alpha[j + 1][i][0]) / (2.0 * hx),
                    (alpha[j + 2][i + 1][0] - alpha[j][i + 1][0]) / (2.0 * hy),
                ],
                [
                    (alpha[j + 1][i + 2][1] - alpha[j + 1][i][1]) / (2.0 * hx),
                    (alpha[j + 2][i + 1][1] - alpha[j][i + 1][1]) / (2.0 * hy),
                ],
            ];
            let jb = [
                [
                    (beta[j][i + 1][0] - beta[j][i - 1][0]) / (2.0 * hx),
                    (beta[j + 1][i][0] - beta[j - 1][i][0]) / (2.0 * hy),
                ],
                [
                    (beta[j][i + 1][1] - beta[j][i - 1][1]) / (2.0 * hx),
                    (beta[j + 1][i][1] - beta[j - 1][i][1]) / (2.0 * hy),
                ],
            ];
            let det_a = ja[0][0] * ja[1][1] - ja[0][1] * ja[1][0];
            let idx = (j - 1) * dual_det[0].len() + (i - 1);
            if det_a.abs() < 1e-300 {
                return Err(BlaschkeError::ConvexityFailure {
                    index: idx,
                    min_eig: 0.0,
                });
            }
            // Hess = J_beta J_alpha^{-1}
            let inv_a = [
                [ja[1][1] / det_a, -ja[0][1] / det_a],
                [-ja[1][0] / det_a, ja[0][0] / det_a],
            ];
            let mut hess = [[0.0f64; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    hess[r][c] = jb[r][0] * inv_a[0][c] + jb[r][1] * inv_a[1][c];
                }
            }
            let sym = [
                [hess[0][0], 0.5 * (hess[0][1] + hess[1][0])],
                [0.5 * (hess[0][1] + hess[1][0]), hess[1][1]],
            ];
            let tr = sym[0][0] + sym[1][1];
            let det = sym[0][0] * sym[1][1] - sym[0][1] * sym[1][0];
            let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
            let min_eig = 0.5 * tr - disc;
            if min_eig <= 0.0 {
                return Err(BlaschkeError::ConvexityFailure { index: idx, min_eig });
            }
            dual_det[j - 1][i - 1] = 1.0 / det;
        }
    }

    Ok(LegendreData {
        beta,
        chi,
        dual_det,
    })
}

/// Max deviation of the grid duals from the pair's closed form
/// `beta = (Re(G-F)/2, Im(G+F)/2)`; `z00` is the conformal parameter of
/// `beta[0][0]` (one node in from the sample grid corner).
pub fn legendre_pair_residual(
    data: &LegendreData,
    pair: &HoloPair,
    z00: Complex64,
    hx: f64,
    hy: f64,
    sheet: i32,
) -> f64 {
    let sampler = PairSampler::new(pair.clone());
    let mut worst = 0.0f64;
    for (j, row) in data.beta.iter().enumerate() {
        for (i, b) in row.iter().enumerate() {
            let z = z00 + Complex64::new(i as f64 * hx, j as f64 * hy);
            let want = sampler.beta(z, sheet);
            worst = worst.max((b[0] - want[0]).abs().max((b[1] - want[1]).abs()));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Mirror and gauge symmetries
// ---------------------------------------------------------------------------

/// The mirror involution `(F, G) -> (-F, G)`: metric samples are
/// bit-identical (negation is exact), the cubic coefficient flips sign.
pub fn mirror(pair: &HoloPair) -> HoloPair {
    HoloPair {
        f: LogSeries {
            a: pair.f.a.neg(),
            b: pair.f.b.neg(),
        },
        g: pair.g.clone(),
    }
}

/// Affine symmetry `alpha -> A alpha + shift`, `phi -> phi + tilt . alpha
/// + offset`, with `A` unimodular. Gradients transform by
/// `beta -> A^{-T}(beta + tilt)`.
#[derive(Clone, Debug)]
pub struct GaugeElement {
    pub linear: [[f64; 2]; 2],
    pub shift: [f64; 2],
    pub tilt: [f64; 2],
    pub offset: f64,
}

fn inv2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]
}

fn matvec(m: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

impl GaugeElement {
    pub fn new(
        linear: [[f64; 2]; 2],
        shift: [f64; 2],
        tilt: [f64; 2],
        offset: f64,
    ) -> GaugeElement {
        let det = linear[0][0] * linear[1][1] - linear[0][1] * linear[1][0];
        assert!(
            (det - 1.0).abs() < 1e-12,
            "gauge linear part must be unimodular, det = {det}"
        );
        GaugeElement {
            linear,
            shift,
            tilt,
            offset,
        }
    }

    pub fn identity() -> GaugeElement {
        GaugeElement {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            shift: [0.0; 2],
            tilt: [0.0; 2],
            offset: 0.0,
        }
    }

    pub fn apply(&self, alpha: [f64; 2], phi: f64) -> ([f64; 2], f64) {
        let a = matvec(self.linear, alpha);
        (
            [a[0] + self.shift[0], a[1] + self.shift[1]],
            phi + self.tilt[0] * alpha[0] + self.tilt[1] * alpha[1] + self.offset,
        )
    }

    pub fn apply_gradient(&self, beta: [f64; 2]) -> [f64; 2] {
        let ainv = inv2(self.linear);
        let at_inv = [[ainv[0][0], ainv[1][0]], [ainv[0][1], ainv[1][1]]];
        matvec(at_inv, [beta[0] + self.tilt[0], beta[1] + self.tilt[1]])
    }

    /// The induced element on the Legendre-dual data `(beta, chi)`; an
    /// involution together with the transform itself.
    pub fn dual(&self) -> GaugeElement {
        let ainv = inv2(self.linear);
        let at_inv = [[ainv[0][0], ainv[1][0]], [ainv[0][1], ainv[1][1]]];
        let ainv_b = matvec(ainv, self.shift);
        GaugeElement {
            linear: at_inv,
            shift: matvec(at_inv, self.tilt),
            tilt: ainv_b,
            offset: self.tilt[0] * ainv_b[0] + self.tilt[1] * ainv_b[1] - self.offset,
        }
    }
}

/// Apply a gauge element to immersion samples, returning the transformed
/// `(alpha, phi, beta)` triples.
pub fn gauge_action(
    g: &GaugeElement,
    alpha: &[[f64; 2]],
    phi: &[f64],
    beta: &[[f64; 2]],
) -> (Vec<[f64; 2]>, Vec<f64>, Vec<[f64; 2]>) {
    assert_eq!(alpha.len(), phi.len());
    assert_eq!(alpha.len(), beta.len());
    let mut out_a = Vec::with_capacity(alpha.len());
    let mut out_p = Vec::with_capacity(alpha.len());
    let mut out_b = Vec::with_capacity(alpha.len());
    for k in 0..alpha.len() {
        let (a, p) = g.apply(alpha[k], phi[k]);
        out_a.push(a);
        out_p.push(p);
        out_b.push(g.apply_gradient(beta[k]));
    }
    (out_a, out_p, out_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn plain_pair(f: Series, g: Series) -> HoloPair {
        HoloPair {
            f: LogSeries::plain(f),
            g: LogSeries::plain(g),
        }
    }

    /// j with a genuinely varying profile; the constraint fixes k.
    fn wavy_data(order: usize) -> ModelData {
        let j0 = Complex64::new(0.0, 4.0 * PI.sqrt());
        let mut coeffs = vec![Complex64::ZERO; order + 1];
        coeffs[0] = j0;
        coeffs[1] = j0 * c(0.2, 0.1);
        coeffs[2] = j0 * c(-0.05, 0.15);
        coeffs[3] = j0 * c(0.01, -0.02);
        ModelData::from_j(Series::new(coeffs), c(0.3, -0.4)).unwrap()
    }

    #[test]
    fn metric_of_linear_pairs() {
        let z = Series::identity(4);
        let pair = plain_pair(Series::zero(4), z.scale(c(2.0, 0.0)));
        let got = metric_from_fg(&pair, c(0.3, 0.1)).unwrap();
        assert!((got - 1.0).abs() < 1e-14);

        let pair = plain_pair(Series::identity(4), Series::identity(4).scale(c(2.0, 0.0)));
        let got = metric_from_fg(&pair, c(-0.2, 0.4)).unwrap();
        assert!((got - 0.75).abs() < 1e-14);

        let pair = plain_pair(Series::identity(4).scale(c(2.0, 0.0)), Series::identity(4));
        assert!(matches!(
            metric_from_fg(&pair, c(0.3, 0.0)),
            Err(BlaschkeError::MetricDegenerate { .. })
        ));
    }

    #[test]
    fn cubic_of_polynomial_pairs() {
        // F = z^2, G = 2z: U = (2 * 2 - 2z * 0) / 4 = 1.
        let mut f = Series::zero(4);
        let f = {
            let mut cs = f.coeffs().to_vec();
            cs[2] = Complex64::ONE;
            f = Series::new(cs);
            f
        };
        let pair = plain_pair(f, Series::identity(4).scale(c(2.0, 0.0)));
        for z in [c(0.3, 0.2), c(-0.1, 0.05), c(0.0, 0.4)] {
            assert!((cubic_from_fg(&pair, z) - Complex64::ONE).norm() < 1e-13);
        }

        let pair = plain_pair(Series::zero(4), Series::identity(4).scale(c(3.0, 1.0)));
        assert!(cubic_from_fg(&pair, c(0.2, 0.1)).norm() < 1e-14);
    }

    #[test]
    fn standard_data_reproduces_the_shifted_log_metric() {
        let pair = model_fg(&ModelData::standard(12)).unwrap();
        for y in [7.0f64, 9.0, 11.0] {
            for th in [0.0, 1.1, 2.9, -2.0] {
                let z = Complex64::from_polar((-y).exp(), th);
                let want = z.norm_sqr().ln().abs() - 4.0 * PI;
                let got = metric_from_fg(&pair, z).unwrap();
                assert!(
                    (got - want).abs() < 1e-10 * want,
                    "metric mismatch at y={y}, th={th}: {got} vs {want}"
                );
            }
        }
        // Inside |log|z|^2| < 4 pi the closed form is negative.
        let z = Complex64::from_polar((-2.0f64).exp(), 0.5);
        assert!(matches!(
            metric_from_fg(&pair, z),
            Err(BlaschkeError::MetricDegenerate { .. })
        ));
    }

    #[test]
    fn shifted_k_gives_the_pure_log_metric() {
        // k = -2 pi cancels the constant: e^psi = |log|z|^2| exactly.
        let j = Series::constant(c(0.0, 4.0 * PI.sqrt()), 10);
        let data = ModelData::from_j(j, c(-2.0 * PI, 0.0)).unwrap();
        let pair = model_fg(&data).unwrap();
        for y in [3.0f64, 6.0, 10.0] {
            let z = Complex64::from_polar((-y).exp(), 0.7);
            let want = 2.0 * y;
            let got = metric_from_fg(&pair, z).unwrap();
            assert!((got - want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn wrong_normalization_is_rejected() {
        assert!(matches!(
            ModelData::from_j(Series::constant(Complex64::ONE, 6), Complex64::ZERO),
            Err(BlaschkeError::ConstraintViolated { .. })
        ));
        // Hand-built inconsistent data refuses to integrate.
        let bad = ModelData {
            j: Series::constant(Complex64::ONE, 6),
            k: Series::zero(6),
        };
        assert!(matches!(
            model_fg(&bad),
            Err(BlaschkeError::ConstraintViolated { .. })
        ));
    }

    #[test]
    fn varying_data_still_produces_the_simple_pole() {
        let data = wavy_data(12);
        assert!(data.constraint_residual() < 1e-12 * 16.0 * PI);
        let pair = model_fg(&data).unwrap();
        // U = 1/z through the truncation order; at these radii the
        // truncation tail is far below the probe tolerance.
        for z in [
            Complex64::from_polar(0.05, 0.3),
            Complex64::from_polar(0.01, -1.2),
            Complex64::from_polar(1e-3, 2.2),
        ] {
            let got = cubic_from_fg(&pair, z);
            let want = Complex64::ONE / z;
            assert!(
                (got - want).norm() < 1e-10 * want.norm(),
                "cubic mismatch at z = {z}: {got} vs {want}"
            );
        }
        // Radial normalization: both primitives fade into the puncture.
        for r in [1e-2f64, 1e-4, 1e-6] {
            let z = Complex64::from_polar(r, 1.0);
            let fv = pair.f.eval(z, 0).norm();
            let gv = pair.g.eval(z, 0).norm();
            assert!(fv < 40.0 * r * r.ln().abs() && gv < 40.0 * r * r.ln().abs());
        }
    }

    #[test]
    fn growth_constants_bracket_the_shifted_log() {
        let sampler = PairSampler::new(model_fg(&ModelData::standard(12)).unwrap());
        let (lo, hi) = growth_constants(&sampler, (-10.0f64).exp(), (-8.0f64).exp(), 12).unwrap();
        // e^psi / |log|z|^2| = 1 - 4 pi / |log|z|^2| in [1 - 4pi/16, 1).
        assert!(lo > 0.2 && lo < 0.25, "lo = {lo}");
        assert!(hi < 1.0 && hi > 0.3, "hi = {hi}");
    }

    #[test]
    fn monodromy_shears_the_first_coordinate() {
        let sampler = PairSampler::new(model_fg(&wavy_data(12)).unwrap());
        let points = [
            Complex64::from_polar(2e-4, 0.4),
            Complex64::from_polar(5e-5, -2.1),
            Complex64::from_polar(1e-4, 3.0),
        ];
        let defect = monodromy_defect(&sampler, &points, &[-1, 0, 1]);
        assert!(defect < 1e-12, "monodromy defect {defect}");
    }

    #[test]
    fn mirror_is_an_exact_involution() {
        let pair = model_fg(&wavy_data(10)).unwrap();
        let m = mirror(&pair);
        assert_eq!(mirror(&m), pair);
        for z in [Complex64::from_polar(2e-4, 1.0), Complex64::from_polar(1e-3, -0.3)] {
            // Metric samples agree bitwise; cubic flips sign.
            assert_eq!(
                metric_from_fg(&pair, z).unwrap(),
                metric_from_fg(&m, z).unwrap()
            );
            let u = cubic_from_fg(&pair, z);
            let mu = cubic_from_fg(&m, z);
            assert!((u + mu).norm() < 1e-12 * u.norm());
        }
    }

    #[test]
    fn sampler_derivative_matches_finite_differences() {
        let sampler = PairSampler::new(model_fg(&wavy_data(12)).unwrap());
        let z = Complex64::from_polar(2e-4, 0.9);
        let h = 1e-9;
        let dx = (sampler.psi(z + c(h, 0.0)) - sampler.psi(z - c(h, 0.0))) / (2.0 * h);
        let dy = (sampler.psi(z + c(0.0, h)) - sampler.psi(z - c(0.0, h))) / (2.0 * h);
        let want = 0.5 * c(dx, -dy);
        let got = sampler.dpsi(z);
        assert!(
            (got - want).norm() < 1e-4 * (1.0 + want.norm()),
            "dpsi {got} vs FD {want}"
        );
    }

    fn grid<FA, FP>(n: usize, h: f64, fa: FA, fp: FP) -> (Vec<Vec<[f64; 2]>>, Vec<Vec<f64>>)
    where
        FA: Fn(f64, f64) -> [f64; 2],
        FP: Fn(f64, f64) -> f64,
    {
        let mut alpha = vec![vec![[0.0; 2]; n]; n];
        let mut phi = vec![vec![0.0; n]; n];
        for j in 0..n {
            for i in 0..n {
                let (x, y) = (0.4 + i as f64 * h, -0.3 + j as f64 * h);
                alpha[j][i] = fa(x, y);
                phi[j][i] = fp(x, y);
            }
        }
        (alpha, phi)
    }

    #[test]
    fn immersion_recovery_on_the_paraboloid() {
        // phi = |alpha|^2 / 2, alpha = (x, y): G = 2 z, F = 0.
        let n = 7;
        let h = 0.05;
        let (alpha, _) = grid(n, h, |x, y| [x, y], |_, _| 0.0);
        let beta = alpha.clone();
        let (f, g) = fg_from_immersion(h, h, &alpha, &beta, 1e-9).unwrap();
        for j in 0..n {
            for i in 0..n {
                let z = c(0.4 + i as f64 * h, -0.3 + j as f64 * h);
                assert!(f[j][i].norm() < 1e-12);
                assert!((g[j][i] - 2.0 * z).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn immersion_recovery_on_an_anisotropic_quadratic() {
        // Hessian diag(2, 1/2) in conformal gauge: alpha = (x / sqrt 2,
        // sqrt 2 y), beta = (2 a1, a2 / 2); G and F come out linear in z.
        let n = 7;
        let h = 0.04;
        let s = 2.0f64.sqrt();
        let (alpha, _) = grid(n, h, |x, y| [x / s, s * y], |_, _| 0.0);
        let beta: Vec<Vec<[f64; 2]>> = alpha
            .iter()
            .map(|row| row.iter().map(|a| [2.0 * a[0], 0.5 * a[1]]).collect())
            .collect();
        let (f, g) = fg_from_immersion(h, h, &alpha, &beta, 1e-9).unwrap();
        for j in 0..n {
            for i in 0..n {
                let z = c(0.4 + i as f64 * h, -0.3 + j as f64 * h);
                assert!((g[j][i] - 3.0 / s * z).norm() < 1e-12);
                assert!((f[j][i] + z / s).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn non_convex_samples_are_rejected() {
        // phi = (x^2 - y^2)/2: beta = (a1, -a2); G = 2 a1 fails holomorphy.
        let n = 7;
        let h = 0.05;
        let (alpha, _) = grid(n, h, |x, y| [x, y], |_, _| 0.0);
        let beta: Vec<Vec<[f64; 2]>> = alpha
            .iter()
            .map(|row| row.iter().map(|a| [a[0], -a[1]]).collect())
            .collect();
        assert!(matches!(
            fg_from_immersion(h, h, &alpha, &beta, 1e-6),
            Err(BlaschkeError::NotHolomorphic { .. })
                | Err(BlaschkeError::MetricDegenerate { .. })
        ));
    }

    #[test]
    fn legendre_of_the_paraboloid_is_self_dual() {
        let n = 9;
        let h = 0.05;
        let (alpha, phi) = grid(n, h, |x, y| [x, y], |x, y| 0.5 * (x * x + y * y));
        let data = legendre(h, h, &alpha, &phi).unwrap();
        for j in 0..n - 2 {
            for i in 0..n - 2 {
                let a = alpha[j + 1][i + 1];
                let b = data.beta[j][i];
                assert!((b[0] - a[0]).abs() < 1e-10 && (b[1] - a[1]).abs() < 1e-10);
                let want = 0.5 * (b[0] * b[0] + b[1] * b[1]);
                assert!((data.chi[j][i] - want).abs() < 1e-9);
            }
        }
        for row in &data.dual_det {
            for &d in row {
                assert!((d - 1.0).abs() < 1e-8);
            }
        }
        // Against the attached pair (F = 0, G = 2z): beta = (Re G / 2,
        // Im G / 2) = alpha.
        let pair = plain_pair(Series::zero(3), Series::identity(3).scale(c(2.0, 0.0)));
        let res = legendre_pair_residual(&data, &pair, c(0.4 + h, -0.3 + h), h, h, 0);
        assert!(res < 1e-10, "pair residual {res}");
    }

    #[test]
    fn legendre_inverts_the_hessian() {
        // phi with Hessian diag(2, 1/2): chi = beta^T diag(1/2, 2) beta / 2.
        let n = 9;
        let h = 0.05;
        let (alpha, phi) = grid(n, h, |x, y| [x, y], |x, y| x * x + 0.25 * y * y);
        let data = legendre(h, h, &alpha, &phi).unwrap();
        for j in 0..n - 2 {
            for i in 0..n - 2 {
                let b = data.beta[j][i];
                let a = alpha[j + 1][i + 1];
                assert!((b[0] - 2.0 * a[0]).abs() < 1e-10);
                assert!((b[1] - 0.5 * a[1]).abs() < 1e-10);
                let want = 0.25 * b[0] * b[0] + b[1] * b[1];
                assert!((data.chi[j][i] - want).abs() < 1e-9);
            }
        }
        // det Hess phi = 1 is preserved on the dual side.
        for row in &data.dual_det {
            for &d in row {
                assert!((d - 1.0).abs() < 1e-8);
            }
        }
        // A saddle trips the convexity check.
        let (alpha, phi) = grid(n, h, |x, y| [x, y], |x, y| 0.5 * (x * x - y * y));
        assert!(matches!(
            legendre(h, h, &alpha, &phi),
            Err(BlaschkeError::ConvexityFailure { .. })
        ));
    }

    #[test]
    fn gauge_identity_and_shear() {
        let alpha = [[0.3, -0.2], [1.1, 0.4], [-0.5, 0.9]];
        let phi = [0.5 * (0.09 + 0.04), 0.5 * (1.21 + 0.16), 0.5 * (0.25 + 0.81)];
        let beta = alpha;

        let id = GaugeElement::identity();
        let (a2, p2, b2) = gauge_action(&id, &alpha, &phi, &beta);
        assert_eq!(a2, alpha.to_vec());
        assert_eq!(p2, phi.to_vec());
        assert_eq!(b2, beta.to_vec());

        // Pure shear: beta moves by the inverse-transpose.
        let shear = GaugeElement::new([[1.0, 1.0], [0.0, 1.0]], [0.0; 2], [0.0; 2], 0.0);
        let (_, _, bs) = gauge_action(&shear, &alpha, &phi, &beta);
        for (k, b) in bs.iter().enumerate() {
            let want = [beta[k][0], beta[k][1] - beta[k][0]];
            assert!((b[0] - want[0]).abs() < 1e-14 && (b[1] - want[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn gauge_tilt_matches_the_closed_form_legendre() {
        // On the paraboloid phi = |alpha|^2/2, adding tilt . alpha shifts
        // the gradient by exactly the tilt.
        let tilt = [0.7, -0.3];
        let g = GaugeElement::new([[1.0, 0.0], [0.0, 1.0]], [0.0; 2], tilt, 0.0);
        let alpha = [[0.2, 0.5], [-0.4, 0.1]];
        let phi: Vec<f64> = alpha
            .iter()
            .map(|a| 0.5 * (a[0] * a[0] + a[1] * a[1]))
            .collect();
        let beta = alpha;
        let (_, _, bt) = gauge_action(&g, &alpha, &phi, &beta);
        for (k, b) in bt.iter().enumerate() {
            assert!((b[0] - (beta[k][0] + tilt[0])).abs() < 1e-14);
            assert!((b[1] - (beta[k][1] + tilt[1])).abs() < 1e-14);
        }
    }

    #[test]
    fn gauge_dual_is_an_involution() {
        let g = GaugeElement::new(
            [[1.3, 0.4], [0.5, (1.0 + 0.4 * 0.5) / 1.3]],
            [0.2, -0.7],
            [-0.1, 0.9],
            0.35,
        );
        let gg = g.dual().dual();
        for r in 0..2 {
            for c2 in 0..2 {
                assert!((gg.linear[r][c2] - g.linear[r][c2]).abs() < 1e-12);
            }
            assert!((gg.shift[r] - g.shift[r]).abs() < 1e-12);
            assert!((gg.tilt[r] - g.tilt[r]).abs() < 1e-12);
        }
        assert!((gg.offset - g.offset).abs() < 1e-12);
    }

    #[test]
    fn gauge_equivariance_of_the_legendre_transform() {
        // chi-tilde = chi + dual.tilt . beta + dual.offset with
        // beta-tilde = dual linear action; verified on a quadratic.
        let g = GaugeElement::new([[1.0, 0.6], [0.0, 1.0]], [0.3, -0.2], [0.5, 0.1], -0.4);
        let d = g.dual();
        for a in [[0.3, -0.1], [-0.6, 0.8], [0.05, 0.45]] {
            let phi = 0.5 * (a[0] * a[0] + a[1] * a[1]);
            let beta = a;
            let chi = beta[0] * a[0] + beta[1] * a[1] - phi;
            let (at, pt) = g.apply(a, phi);
            let bt = g.apply_gradient(beta);
            // Direct dual potential of the transformed data.
            let chit = bt[0] * at[0] + bt[1] * at[1] - pt;
            // The law applied to the original dual data.
            let (bd, cd) = d.apply(beta, chi);
            assert!((bt[0] - bd[0]).abs() < 1e-12 && (bt[1] - bd[1]).abs() < 1e-12);
            assert!((chit - cd).abs() < 1e-12, "{chit} vs {cd}");
        }
    }

    #[test]
    fn json_round_trips() {
        let data = wavy_data(8);
        let back = ModelData::from_json(&data.to_json()).unwrap();
        assert_eq!(back, data);

        let pair = model_fg(&data).unwrap();
        let back = HoloPair::from_json(&pair.to_json()).unwrap();
        assert_eq!(back, pair);

        let mut tampered = pair.to_json();
        tampered["branch"] = serde_json::json!("naive-log");
        assert!(matches!(
            HoloPair::from_json(&tampered),
            Err(BlaschkeError::Encoding { .. })
        ));
    }
}
