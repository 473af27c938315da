//! Dense complex polynomials and root finding.
//!
//! Coefficients are stored ascending. Roots come from Durand-Kerner iteration
//! with a Newton polish; clustered roots are grouped afterwards so callers can
//! detect multiplicity (which this crate treats as an input error for pole
//! divisors).

use num_complex::Complex64;

#[derive(Clone, Debug)]
pub struct CPoly {
    c: Vec<Complex64>,
}

impl CPoly {
    /// Builds a polynomial, trimming trailing coefficients that are zero
    /// relative to the largest one (they would otherwise corrupt the degree
    /// bookkeeping at infinity).
    pub fn new(mut c: Vec<Complex64>) -> Self {
        let scale = c.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let cut = scale * 1e-14;
        while c.len() > 1 && c.last().map_or(false, |v| v.norm() <= cut) {
            c.pop();
        }
        if c.is_empty() {
            c.push(Complex64::ZERO);
        }
        CPoly { c }
    }

    pub fn from_re(re: &[f64]) -> Self {
        CPoly::new(re.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    pub fn one() -> Self {
        CPoly::new(vec![Complex64::ONE])
    }

    pub fn is_zero(&self) -> bool {
        self.c.len() == 1 && self.c[0] == Complex64::ZERO
    }

    pub fn degree(&self) -> usize {
        self.c.len() - 1
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.c
    }

    pub fn leading(&self) -> Complex64 {
        *self.c.last().unwrap()
    }

    pub fn eval(&self, z: Complex64) -> Complex64 {
        let mut acc = Complex64::ZERO;
        for &ck in self.c.iter().rev() {
            acc = acc * z + ck;
        }
        acc
    }

    pub fn derivative(&self) -> CPoly {
        if self.c.len() == 1 {
            return CPoly::new(vec![Complex64::ZERO]);
        }
        CPoly::new(
            (1..self.c.len())
                .map(|k| self.c[k] * (k as f64))
                .collect(),
        )
    }

    pub fn mul(&self, rhs: &CPoly) -> CPoly {
        let mut out = vec![Complex64::ZERO; self.c.len() + rhs.c.len() - 1];
        for (i, &a) in self.c.iter().enumerate() {
            for (j, &b) in rhs.c.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        CPoly::new(out)
    }

    /// Taylor coefficients of `p(a + t)` as a polynomial in `t`.
    pub fn taylor_at(&self, a: Complex64) -> Vec<Complex64> {
        let mut c = self.c.clone();
        let n = c.len();
        for i in 0..n {
            for j in (i..n - 1).rev() {
                let cj1 = c[j + 1];
                c[j] += a * cj1;
            }
        }
        c
    }

    /// Coefficients of the reversed polynomial `z^deg * p(1/z)`.
    pub fn reversed(&self) -> CPoly {
        let mut c = self.c.clone();
        c.reverse();
        CPoly::new(c)
    }

    /// Coefficients of `p(s z)` for a complex scale `s`.
    pub fn scaled_arg(&self, s: Complex64) -> CPoly {
        let mut pw = Complex64::ONE;
        CPoly::new(
            self.c
                .iter()
                .map(|&ck| {
                    let v = ck * pw;
                    pw *= s;
                    v
                })
                .collect(),
        )
    }

    /// Coefficients of `p(z + a)`.
    pub fn shifted_arg(&self, a: Complex64) -> CPoly {
        CPoly::new(self.taylor_at(a))
    }

    /// All roots (with repetition for multiple roots, up to clustering noise).
    pub fn roots(&self) -> Vec<Complex64> {
        let n = self.degree();
        if n == 0 {
            return Vec::new();
        }
        let lead = self.leading();
        let monic: Vec<Complex64> = self.c.iter().map(|&v| v / lead).collect();
        // Initial guesses on a circle sized by the coefficient bound, with an
        // irrational-ish phase offset so no guess starts on a symmetry axis.
        let bound = 1.0
            + monic[..n]
                .iter()
                .map(|v| v.norm())
                .fold(0.0, f64::max);
        let r0 = bound.min(1e6).max(1e-3);
        let mut z: Vec<Complex64> = (0..n)
            .map(|k| {
                Complex64::from_polar(
                    r0,
                    2.0 * std::f64::consts::PI * (k as f64) / (n as f64) + 0.437,
                )
            })
            .collect();
        let eval_monic = |x: Complex64| {
            let mut acc = Complex64::ZERO;
            for &ck in monic.iter().rev() {
                acc = acc * x + ck;
            }
            acc
        };
        for _ in 0..400 {
            let mut biggest = 0.0f64;
            for k in 0..n {
                let mut den = Complex64::ONE;
                for j in 0..n {
                    if j != k {
                        den *= z[k] - z[j];
                    }
                }
                if den.norm() == 0.0 {
                    // Coincident iterates; nudge apart.
                    z[k] += Complex64::new(1e-8, 1e-8);
                    continue;
                }
                let step = eval_monic(z[k]) / den;
                z[k] -= step;
                biggest = biggest.max(step.norm() / (1.0 + z[k].norm()));
            }
            if biggest < 1e-14 {
                break;
            }
        }
        // Newton polish against the original polynomial.
        let dp = self.derivative();
        for zk in z.iter_mut() {
            for _ in 0..3 {
                let d = dp.eval(*zk);
                if d.norm() > 0.0 {
                    *zk -= self.eval(*zk) / d;
                }
            }
        }
        z
    }
}

/// Groups roots into clusters of radius `tol * scale`, returning cluster
/// centroids with multiplicities. `scale` is the largest root magnitude
/// (at least one).
pub fn cluster_roots(roots: &[Complex64], tol: f64) -> Vec<(Complex64, usize)> {
    let scale = roots.iter().map(|r| r.norm()).fold(1.0, f64::max);
    let cut = tol * scale;
    let mut groups: Vec<(Complex64, usize)> = Vec::new();
    for &r in roots {
        match groups
            .iter_mut()
            .find(|(ctr, _)| (*ctr - r).norm() < cut)
        {
            Some((ctr, m)) => {
                *ctr = (*ctr * (*m as f64) + r) / ((*m + 1) as f64);
                *m += 1;
            }
            None => groups.push((r, 1)),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_of_unity() {
        let p = CPoly::from_re(&[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]); // z^6 - 1
        let mut roots = p.roots();
        assert_eq!(roots.len(), 6);
        roots.sort_by(|a, b| a.arg().partial_cmp(&b.arg()).unwrap());
        for (k, r) in roots.iter().enumerate() {
            let want =
                Complex64::from_polar(1.0, (k as f64 - 2.0) * std::f64::consts::PI / 3.0);
            assert!(
                (r - want).norm() < 1e-12,
                "root {k}: {r} vs {want}"
            );
        }
    }

    #[test]
    fn double_root_clusters() {
        // (z-1)^2 (z+2) = z^3 - 3z + 2
        let p = CPoly::from_re(&[2.0, -3.0, 0.0, 1.0]);
        let roots = p.roots();
        let groups = cluster_roots(&roots, 1e-5);
        assert_eq!(groups.len(), 2);
        let double = groups.iter().find(|(_, m)| *m == 2).expect("double root");
        assert!((double.0 - Complex64::ONE).norm() < 1e-5);
        let simple = groups.iter().find(|(_, m)| *m == 1).unwrap();
        assert!((simple.0 + 2.0 * Complex64::ONE).norm() < 1e-9);
    }

    #[test]
    fn taylor_shift() {
        // p = z^2 at a = 1: (1 + t)^2 = 1 + 2t + t^2
        let p = CPoly::from_re(&[0.0, 0.0, 1.0]);
        let t = p.taylor_at(Complex64::ONE);
        assert!((t[0] - Complex64::ONE).norm() < 1e-15);
        assert!((t[1] - 2.0 * Complex64::ONE).norm() < 1e-15);
        assert!((t[2] - Complex64::ONE).norm() < 1e-15);
    }

    #[test]
    fn reversal_and_scaling() {
        let p = CPoly::from_re(&[1.0, 2.0, 3.0]);
        let r = p.reversed();
        // z^2 p(1/z) = 3 + 2z + z^2
        assert!((r.coeffs()[0] - 3.0 * Complex64::ONE).norm() < 1e-15);
        let z = Complex64::new(0.3, -0.4);
        let s = Complex64::new(2.0, 1.0);
        assert!((p.scaled_arg(s).eval(z) - p.eval(s * z)).norm() < 1e-13);
        assert!((p.shifted_arg(s).eval(z) - p.eval(z + s)).norm() < 1e-13);
    }
}
