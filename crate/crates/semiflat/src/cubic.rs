//! Rational cubic differentials on the Riemann sphere.
//!
//! A differential is `U(z) dz^3` with `U = N/D` rational. The affine chart
//! carries the coefficient data; the chart at infinity is reached through
//! `z -> 1/z`, under which `dz^3` picks up `-w^{-6} dw^3`. Poles must be
//! simple. Every pole owns a canonical coordinate `w` in which the
//! differential becomes exactly `dw^3 / w`; the rest of the crate leans on
//! that normal form for its grids and asymptotics.

use crate::poly::{cluster_roots, CPoly};
use crate::series::Series;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CubicError {
    #[error("evaluation point is within {dist:.3e} of a pole")]
    PoleEvaluation { dist: f64 },
    #[error("pole of order {order} at {location}; only simple poles are supported")]
    HigherOrderPole { location: String, order: usize },
    #[error("divisor degree mismatch: {pole_count} poles minus {zero_count} zeros must equal 6 ({detail})")]
    DegreeMismatch {
        pole_count: usize,
        zero_count: usize,
        detail: String,
    },
    #[error("canonical coordinate series unreliable at radius {radius:.3e}: {detail}")]
    SeriesDivergence { radius: f64, detail: String },
}

/// Where a divisor point sits on the sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpherePoint {
    Finite(Complex64),
    Infinity,
}

impl std::fmt::Display for SpherePoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpherePoint::Finite(z) => write!(f, "{:.6}{:+.6}i", z.re, z.im),
            SpherePoint::Infinity => write!(f, "infinity"),
        }
    }
}

/// A simple pole together with its chart residue: the coefficient `a` in
/// `U = a/(z - p) + O(1)` (for the pole at infinity, the residue in the
/// `w = 1/z` chart).
#[derive(Clone, Copy, Debug)]
pub struct Pole {
    pub position: SpherePoint,
    pub residue: Complex64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DivisorSummary {
    pub pole_count: usize,
    pub zero_count: usize,
}

impl DivisorSummary {
    /// Enforces the degree rule for cubic differentials on the sphere:
    /// simple poles minus zeros (with multiplicity) must come to six.
    pub fn check(pole_count: usize, zero_count: usize) -> Result<Self, CubicError> {
        if pole_count < zero_count || pole_count - zero_count != 6 {
            return Err(CubicError::DegreeMismatch {
                pole_count,
                zero_count,
                detail: "divisor of a cubic differential on the sphere has degree -6".into(),
            });
        }
        Ok(DivisorSummary {
            pole_count,
            zero_count,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RationalCubicDifferential {
    num: CPoly,
    den: CPoly,
}

impl RationalCubicDifferential {
    pub fn new(num: CPoly, den: CPoly) -> Self {
        assert!(!den.is_zero(), "denominator must be nonzero");
        RationalCubicDifferential { num, den }
    }

    /// Coefficients as `[re, im]` pairs, ascending degree (the config format).
    pub fn from_coeff_pairs(num: &[[f64; 2]], den: &[[f64; 2]]) -> Self {
        let lift = |c: &[[f64; 2]]| {
            CPoly::new(c.iter().map(|p| Complex64::new(p[0], p[1])).collect())
        };
        RationalCubicDifferential::new(lift(num), lift(den))
    }

    pub fn numerator(&self) -> &CPoly {
        &self.num
    }

    pub fn denominator(&self) -> &CPoly {
        &self.den
    }

    /// Order of vanishing at infinity (negative values are pole orders).
    pub fn order_at_infinity(&self) -> i64 {
        if self.num.is_zero() {
            return i64::MAX;
        }
        self.den.degree() as i64 - self.num.degree() as i64 - 6
    }

    /// Evaluates the coefficient `U(z)` in the affine chart.
    pub fn evaluate(&self, z: Complex64) -> Result<Complex64, CubicError> {
        let den = self.den.eval(z);
        // Scale-aware proximity guard: |D(z)| measured against the size of
        // the terms that formed it.
        let scale: f64 = self
            .den
            .coeffs()
            .iter()
            .enumerate()
            .map(|(k, c)| c.norm() * z.norm().powi(k as i32))
            .sum::<f64>()
            .max(f64::MIN_POSITIVE);
        if den.norm() < 1e-12 * scale {
            return Err(CubicError::PoleEvaluation {
                dist: den.norm() / scale,
            });
        }
        Ok(self.num.eval(z) / den)
    }

    /// The differential in the chart `w = 1/z` (so `dz^3 = -w^{-6} dw^3`).
    pub fn inverted(&self) -> RationalCubicDifferential {
        let ntil = self.num.reversed();
        let dtil = self.den.reversed();
        let shift = self.order_at_infinity();
        let minus_ntil = CPoly::new(ntil.coeffs().iter().map(|&c| -c).collect());
        if shift >= 0 {
            let mut c = vec![Complex64::ZERO; shift as usize];
            c.extend_from_slice(minus_ntil.coeffs());
            RationalCubicDifferential::new(CPoly::new(c), dtil)
        } else {
            let mut c = vec![Complex64::ZERO; (-shift) as usize];
            c.extend_from_slice(dtil.coeffs());
            RationalCubicDifferential::new(minus_ntil, CPoly::new(c))
        }
    }

    /// The differential in the chart `z = w + a`.
    pub fn translated(&self, a: Complex64) -> RationalCubicDifferential {
        RationalCubicDifferential::new(self.num.shifted_arg(a), self.den.shifted_arg(a))
    }

    /// The differential in the chart `z = s w` (`s != 0`), which multiplies
    /// the coefficient by `s^3`.
    pub fn scaled(&self, s: Complex64) -> RationalCubicDifferential {
        let num = self.num.scaled_arg(s);
        let s3 = s * s * s;
        RationalCubicDifferential::new(
            CPoly::new(num.coeffs().iter().map(|&c| s3 * c).collect()),
            self.den.scaled_arg(s),
        )
    }

    /// All poles with residues. Fails on any pole of order two or more
    /// (including at infinity) and on numerator/denominator common factors.
    pub fn find_poles(&self) -> Result<Vec<Pole>, CubicError> {
        let mut out = Vec::new();
        if self.den.degree() > 0 {
            let roots = self.den.roots();
            let groups = cluster_roots(&roots, 1e-6);
            for (p, mult) in &groups {
                if *mult > 1 {
                    return Err(CubicError::HigherOrderPole {
                        location: format!("{}", SpherePoint::Finite(*p)),
                        order: *mult,
                    });
                }
                let num_scale: f64 = self
                    .num
                    .coeffs()
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c.norm() * p.norm().powi(k as i32))
                    .sum::<f64>()
                    .max(f64::MIN_POSITIVE);
                let nv = self.num.eval(*p);
                if nv.norm() < 1e-9 * num_scale {
                    return Err(CubicError::DegreeMismatch {
                        pole_count: groups.len(),
                        zero_count: self.num.degree(),
                        detail: format!(
                            "numerator and denominator share a factor near {}",
                            SpherePoint::Finite(*p)
                        ),
                    });
                }
                out.push(Pole {
                    position: SpherePoint::Finite(*p),
                    residue: nv / self.den.derivative().eval(*p),
                });
            }
        }
        match self.order_at_infinity() {
            o if o <= -2 => {
                return Err(CubicError::HigherOrderPole {
                    location: "infinity".into(),
                    order: (-o) as usize,
                })
            }
            -1 => {
                // In w = 1/z the coefficient is -(N~/D~) w^{-1} + O(1).
                out.push(Pole {
                    position: SpherePoint::Infinity,
                    residue: -self.num.leading() / self.den.leading(),
                });
            }
            _ => {}
        }
        Ok(out)
    }

    /// Zeros with multiplicity, including a zero at infinity when present.
    pub fn find_zeros(&self) -> Vec<(SpherePoint, usize)> {
        let mut out = Vec::new();
        if self.num.degree() > 0 {
            for (z, m) in cluster_roots(&self.num.roots(), 1e-6) {
                out.push((SpherePoint::Finite(z), m));
            }
        }
        let o = self.order_at_infinity();
        if o > 0 && o != i64::MAX {
            out.push((SpherePoint::Infinity, o as usize));
        }
        out
    }

    /// Counts the divisor and enforces `poles - zeros = 6`.
    pub fn validate_divisor(&self) -> Result<DivisorSummary, CubicError> {
        let poles = self.find_poles()?;
        let zeros = self.find_zeros();
        let zero_count = zeros.iter().map(|(_, m)| m).sum();
        DivisorSummary::check(poles.len(), zero_count)
    }

    /// Distance from a finite pole to the nearest other divisor point in the
    /// affine chart (used to size canonical-chart validation annuli).
    fn nearest_divisor_distance(&self, p: Complex64) -> f64 {
        let mut best = f64::INFINITY;
        for r in self.den.roots() {
            let d = (r - p).norm();
            if d > 1e-9 && d < best {
                best = d;
            }
        }
        if self.num.degree() > 0 {
            for r in self.num.roots() {
                let d = (r - p).norm();
                if d > 1e-9 && d < best {
                    best = d;
                }
            }
        }
        if best.is_infinite() {
            // Only divisor point in this chart; fall back to a unit scale.
            best = 1.0;
        }
        best
    }

    /// Builds the canonical coordinate at a pole: a conformal `w(z)` fixing
    /// the pole to `w = 0` with `U = dw^3/w` exactly. With
    /// `I(z) = int_0^z U^{1/3}`, the coordinate is `w = ((2/3) I)^{3/2}`;
    /// its linear coefficient lambda satisfies `lambda^2 = residue`.
    pub fn canonical_chart(
        &self,
        pole: &Pole,
        order: usize,
        flip_branch: bool,
    ) -> Result<CanonicalChart, CubicError> {
        match pole.position {
            SpherePoint::Finite(p) => self.canonical_chart_finite(p, order, flip_branch),
            SpherePoint::Infinity => {
                let inv = self.inverted();
                let mut chart =
                    inv.canonical_chart_finite(Complex64::ZERO, order, flip_branch)?;
                chart.at_infinity = true;
                Ok(chart)
            }
        }
    }

    fn canonical_chart_finite(
        &self,
        p: Complex64,
        order: usize,
        flip_branch: bool,
    ) -> Result<CanonicalChart, CubicError> {
        let den_t = self.den.taylor_at(p);
        let den_scale = den_t.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if den_t[0].norm() > 1e-8 * den_scale || den_t.len() < 2 {
            return Err(CubicError::SeriesDivergence {
                radius: 0.0,
                detail: "expansion point is not a root of the denominator".into(),
            });
        }
        let pad = |v: &[Complex64]| {
            let mut c = v.to_vec();
            c.resize(order + 1, Complex64::ZERO);
            Series::new(c)
        };
        let num_s = pad(&self.num.taylor_at(p));
        let env_s = pad(&den_t[1..]); // D(p + t)/t
        let a = num_s.coeff(0) / env_s.coeff(0); // residue
        if a.norm() == 0.0 {
            return Err(CubicError::SeriesDivergence {
                radius: 0.0,
                detail: "vanishing residue".into(),
            });
        }
        // t*U = a*g with g(0)=1; w = sqrt(a) * t * S(t)^{3/2} where
        // S_k = g^{1/3}_k * 2/(3k+2) collects the fractional-power integral.
        let g = num_s.div(&env_s).scale(Complex64::ONE / a);
        let b = g.powf(1.0 / 3.0);
        let s = Series::new(
            b.coeffs()
                .iter()
                .enumerate()
                .map(|(k, &bk)| bk * (2.0 / (3.0 * k as f64 + 2.0)))
                .collect(),
        );
        let t32 = s.powf(1.5);
        let mut lambda = a.powf(0.5);
        if flip_branch {
            lambda = -lambda;
        }
        let mut fwd = vec![Complex64::ZERO; order + 2];
        for (k, &tk) in t32.coeffs().iter().enumerate() {
            if k + 1 <= order + 1 {
                fwd[k + 1] = lambda * tk;
            }
        }
        let forward = Series::new(fwd).truncate(order);
        let inverse = forward.reversion();

        let r_divisor = self.nearest_divisor_distance(p);
        let chart = CanonicalChart {
            pole: p,
            at_infinity: false,
            lambda,
            residue: a,
            forward,
            inverse,
            divisor_distance: r_divisor,
            branch_flipped: flip_branch,
        };

        // Certify the normal form on a circle inside the validation annulus.
        let rho = 0.3 * r_divisor;
        let mut worst = 0.0f64;
        for k in 0..32 {
            let t = Complex64::from_polar(rho, 2.0 * std::f64::consts::PI * k as f64 / 32.0);
            let u = {
                let den = self.den.eval(p + t);
                if den.norm() == 0.0 {
                    return Err(CubicError::SeriesDivergence {
                        radius: rho,
                        detail: "validation circle hits a pole".into(),
                    });
                }
                self.num.eval(p + t) / den
            };
            let w = chart.map(t);
            let dw = chart.map_derivative(t);
            let res = (dw * dw * dw / (w * u) - Complex64::ONE).norm();
            worst = worst.max(res);
        }
        if !worst.is_finite() || worst > 1e-8 {
            return Err(CubicError::SeriesDivergence {
                radius: rho,
                detail: format!("pullback residual {worst:.3e} exceeds 1e-8"),
            });
        }
        Ok(chart)
    }
}

/// Canonical coordinate at a simple pole: `w(zeta)` as a truncated series in
/// the centered chart coordinate `zeta` (for a finite pole `zeta = z - p`;
/// for the pole at infinity `zeta = 1/z`), together with its inverse.
#[derive(Clone, Debug)]
pub struct CanonicalChart {
    pub pole: Complex64,
    pub at_infinity: bool,
    pub lambda: Complex64,
    pub residue: Complex64,
    forward: Series,
    inverse: Series,
    /// Distance to the nearest other divisor point in the expansion chart.
    pub divisor_distance: f64,
    pub branch_flipped: bool,
}

impl CanonicalChart {
    /// Canonical coordinate of a point given by the centered coordinate.
    pub fn map(&self, zeta: Complex64) -> Complex64 {
        self.forward.eval(zeta)
    }

    pub fn map_derivative(&self, zeta: Complex64) -> Complex64 {
        self.forward.derivative().eval(zeta)
    }

    /// Centered chart coordinate of a point given canonically; one Newton
    /// step against the forward series sharpens the reverted-series value.
    pub fn unmap(&self, w: Complex64) -> Complex64 {
        let mut zeta = self.inverse.eval(w);
        for _ in 0..2 {
            let d = self.forward.derivative().eval(zeta);
            if d.norm() == 0.0 {
                break;
            }
            zeta -= (self.forward.eval(zeta) - w) / d;
        }
        zeta
    }

    pub fn unmap_derivative(&self, w: Complex64) -> Complex64 {
        // dz/dw = 1 / (dw/dz) evaluated at zeta(w).
        Complex64::ONE / self.map_derivative(self.unmap(w))
    }

    pub fn forward_series(&self) -> &Series {
        &self.forward
    }

    /// Largest canonical radius this chart should be trusted on, from the
    /// divisor geometry (half the distance, mapped through lambda) capped by
    /// a coefficient-growth estimate of the series' convergence radius.
    pub fn trusted_radius(&self) -> f64 {
        let geom = 0.5 * self.divisor_distance * self.lambda.norm();
        let mut coeff_est = f64::INFINITY;
        let c1 = self.forward.coeff(1).norm();
        for k in (self.forward.order().saturating_sub(6))..=self.forward.order() {
            let ck = self.forward.coeff(k).norm();
            if ck > 0.0 && k > 1 {
                let est = (c1 / ck).powf(1.0 / (k as f64 - 1.0)) * c1;
                coeff_est = coeff_est.min(est);
            }
        }
        geom.min(0.8 * coeff_est)
    }
}
