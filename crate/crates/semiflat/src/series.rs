//! Truncated complex power series.
//!
//! A [`Series`] holds coefficients `c[0] + c[1] z + ... + c[n] z^n`. Binary
//! operations truncate to the shorter operand, so a computation carried out at
//! order `n` stays at order `n` throughout. Everything here is plain dense
//! arithmetic; orders in this crate stay well below a hundred.

use num_complex::Complex64;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    c: Vec<Complex64>,
}

impl Series {
    pub fn new(c: Vec<Complex64>) -> Self {
        assert!(!c.is_empty(), "series needs at least a constant term");
        Series { c }
    }

    pub fn zero(order: usize) -> Self {
        Series {
            c: vec![Complex64::ZERO; order + 1],
        }
    }

    pub fn constant(v: Complex64, order: usize) -> Self {
        let mut s = Series::zero(order);
        s.c[0] = v;
        s
    }

    /// The identity series `z`, at the given truncation order.
    pub fn identity(order: usize) -> Self {
        let mut s = Series::zero(order);
        if order >= 1 {
            s.c[1] = Complex64::ONE;
        }
        s
    }

    pub fn order(&self) -> usize {
        self.c.len() - 1
    }

    pub fn coeff(&self, k: usize) -> Complex64 {
        self.c.get(k).copied().unwrap_or(Complex64::ZERO)
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.c
    }

    pub fn truncate(&self, order: usize) -> Series {
        let mut c = self.c.clone();
        c.truncate(order + 1);
        c.resize(order + 1, Complex64::ZERO);
        Series { c }
    }

    pub fn eval(&self, z: Complex64) -> Complex64 {
        let mut acc = Complex64::ZERO;
        for &ck in self.c.iter().rev() {
            acc = acc * z + ck;
        }
        acc
    }

    pub fn add(&self, rhs: &Series) -> Series {
        let n = self.c.len().min(rhs.c.len());
        Series::new((0..n).map(|k| self.c[k] + rhs.c[k]).collect())
    }

    pub fn sub(&self, rhs: &Series) -> Series {
        let n = self.c.len().min(rhs.c.len());
        Series::new((0..n).map(|k| self.c[k] - rhs.c[k]).collect())
    }

    pub fn neg(&self) -> Series {
        Series::new(self.c.iter().map(|&v| -v).collect())
    }

    pub fn scale(&self, a: Complex64) -> Series {
        Series::new(self.c.iter().map(|&v| a * v).collect())
    }

    pub fn mul(&self, rhs: &Series) -> Series {
        let n = self.c.len().min(rhs.c.len());
        let mut out = vec![Complex64::ZERO; n];
        for (i, &a) in self.c.iter().take(n).enumerate() {
            if a == Complex64::ZERO {
                continue;
            }
            for (j, &b) in rhs.c.iter().take(n - i).enumerate() {
                out[i + j] += a * b;
            }
        }
        Series::new(out)
    }

    /// `self / rhs`; requires `rhs(0) != 0`.
    pub fn div(&self, rhs: &Series) -> Series {
        let n = self.c.len().min(rhs.c.len());
        let b0 = rhs.c[0];
        assert!(b0.norm() > 0.0, "division by series with zero constant term");
        let mut q = vec![Complex64::ZERO; n];
        for k in 0..n {
            let mut acc = self.c[k];
            for j in 1..=k {
                acc -= rhs.c[j] * q[k - j];
            }
            q[k] = acc / b0;
        }
        Series::new(q)
    }

    pub fn derivative(&self) -> Series {
        if self.c.len() == 1 {
            return Series::zero(0);
        }
        Series::new(
            (1..self.c.len())
                .map(|k| self.c[k] * (k as f64))
                .collect(),
        )
    }

    /// Termwise antiderivative with constant term `c0`; order grows by one.
    pub fn integral(&self, c0: Complex64) -> Series {
        let mut out = Vec::with_capacity(self.c.len() + 1);
        out.push(c0);
        for (k, &v) in self.c.iter().enumerate() {
            out.push(v / ((k + 1) as f64));
        }
        Series::new(out)
    }

    /// Principal branch of `self^alpha`; requires `self(0) != 0`.
    pub fn powf(&self, alpha: f64) -> Series {
        let s0 = self.c[0];
        assert!(s0.norm() > 0.0, "power of series with zero constant term");
        let n = self.c.len();
        let t: Vec<Complex64> = self.c.iter().map(|&v| v / s0).collect();
        let mut p = vec![Complex64::ZERO; n];
        p[0] = Complex64::ONE;
        for m in 1..n {
            let mut acc = Complex64::ZERO;
            for k in 1..=m {
                let w = (alpha + 1.0) * (k as f64) - (m as f64);
                acc += w * t[k] * p[m - k];
            }
            p[m] = acc / (m as f64);
        }
        let lead = s0.powf(alpha);
        Series::new(p.into_iter().map(|v| lead * v).collect())
    }

    /// `exp(self)`; requires `self(0) == 0` to stay single-valued.
    pub fn exp(&self) -> Series {
        assert!(
            self.c[0].norm() == 0.0,
            "exp of series with nonzero constant term"
        );
        let n = self.c.len();
        let mut e = vec![Complex64::ZERO; n];
        e[0] = Complex64::ONE;
        for m in 1..n {
            let mut acc = Complex64::ZERO;
            for k in 1..=m {
                acc += (k as f64) * self.c[k] * e[m - k];
            }
            e[m] = acc / (m as f64);
        }
        Series::new(e)
    }

    /// Principal `log(self)`; requires `self(0) != 0`.
    pub fn log(&self) -> Series {
        let s0 = self.c[0];
        assert!(s0.norm() > 0.0, "log of series with zero constant term");
        let n = self.c.len();
        let t: Vec<Complex64> = self.c.iter().map(|&v| v / s0).collect();
        let mut l = vec![Complex64::ZERO; n];
        for m in 1..n {
            let mut acc = (m as f64) * t[m];
            for k in 1..m {
                acc -= (k as f64) * l[k] * t[m - k];
            }
            l[m] = acc / (m as f64);
        }
        l[0] = s0.ln();
        Series::new(l)
    }

    /// `self(g(z))`; requires `g(0) == 0`.
    pub fn compose(&self, g: &Series) -> Series {
        assert!(
            g.c[0].norm() == 0.0,
            "composition requires inner constant term zero"
        );
        let order = self.order().min(g.order());
        let mut acc = Series::constant(self.coeff(self.order()), order);
        for k in (0..self.order()).rev() {
            acc = acc.mul(&g.truncate(order));
            acc.c[0] += self.c[k];
        }
        acc
    }

    /// Compositional inverse: for `w = f(z)` with `f(0) = 0`, `f'(0) != 0`,
    /// returns `g` with `f(g(w)) = w` through the common order.
    pub fn reversion(&self) -> Series {
        assert!(self.c[0].norm() == 0.0, "reversion requires f(0) = 0");
        assert!(self.c.len() >= 2 && self.c[1].norm() > 0.0, "f'(0) must be nonzero");
        let n = self.order();
        let fp = self.derivative();
        let mut g = Series::zero(n);
        g.c[1] = Complex64::ONE / self.c[1];
        // Newton in the series ring; each sweep doubles the number of
        // correct coefficients, so iterate ceil(log2) times plus slack.
        let sweeps = (usize::BITS - n.leading_zeros()) as usize + 1;
        let id = Series::identity(n);
        for _ in 0..sweeps {
            let fg = self.compose(&g).sub(&id);
            let fpg = fp.truncate(n).compose(&g);
            g = g.sub(&fg.div(&fpg));
        }
        g
    }
}

// Coefficients travel as [re, im] pairs so the encoding stays readable and
// independent of the complex type's layout.
impl serde::Serialize for Series {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.c.iter().map(|v| [v.re, v.im]))
    }
}

impl<'de> serde::Deserialize<'de> for Series {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(d)?;
        if pairs.is_empty() {
            return Err(serde::de::Error::custom("series needs at least one coefficient"));
        }
        Ok(Series::new(
            pairs.into_iter().map(|[re, im]| Complex64::new(re, im)).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn max_coeff_err(a: &Series, b: &Series) -> f64 {
        (0..=a.order().min(b.order()))
            .map(|k| (a.coeff(k) - b.coeff(k)).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn geometric_division() {
        // 1 / (1 - z) = sum z^k
        let one = Series::constant(Complex64::ONE, 8);
        let mut den = Series::constant(Complex64::ONE, 8);
        den = den.sub(&Series::identity(8));
        let q = one.div(&den);
        for k in 0..=8 {
            assert!((q.coeff(k) - Complex64::ONE).norm() < 1e-14);
        }
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut s = Series::zero(10);
        for k in 1..=10 {
            s.c[k] = c(0.3 / k as f64, -0.1 / (k * k) as f64);
        }
        let back = s.exp().log();
        assert!(max_coeff_err(&back, &s) < 1e-13);
    }

    #[test]
    fn cube_root_cubed() {
        let mut g = Series::constant(Complex64::ONE, 12);
        g.c[1] = c(0.7, 0.2);
        g.c[2] = c(-0.3, 0.05);
        g.c[3] = c(0.11, -0.04);
        let r = g.powf(1.0 / 3.0);
        let cubed = r.mul(&r).mul(&r);
        assert!(max_coeff_err(&cubed, &g) < 1e-13);
    }

    #[test]
    fn powf_matches_pointwise() {
        let mut g = Series::constant(c(2.0, 0.5), 16);
        g.c[1] = c(0.4, -0.2);
        g.c[2] = c(0.1, 0.0);
        let p = g.powf(1.5);
        let z = c(0.05, 0.03);
        let want = g.eval(z).powf(1.5);
        assert!((p.eval(z) - want).norm() < 1e-12);
    }

    #[test]
    fn reversion_inverts() {
        // f = z + z^2 - 0.5 z^3
        let mut f = Series::zero(14);
        f.c[1] = Complex64::ONE;
        f.c[2] = Complex64::ONE;
        f.c[3] = c(-0.5, 0.0);
        let g = f.reversion();
        let comp = f.compose(&g);
        let id = Series::identity(14);
        assert!(max_coeff_err(&comp, &id) < 1e-12);
    }

    #[test]
    fn derivative_integral_roundtrip() {
        let mut s = Series::zero(9);
        for k in 0..=9 {
            s.c[k] = c(k as f64 * 0.2 - 0.5, 0.1 * k as f64);
        }
        let back = s.derivative().integral(s.coeff(0)).truncate(9);
        assert!(max_coeff_err(&back, &s) < 1e-14);
    }
}
