//! Rectangular grid patches.
//!
//! Every chart in the atlas — Cartesian caps and log-polar pole collars —
//! is a uniform rectangular grid in its own conformal coordinate, so the
//! five-point stencil code is shared. For a collar the coordinates are
//! `(x, y) = (rho, theta)` with `w = exp(rho + i theta)` and `y` periodic.

use num_complex::Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    /// PDE unknown with a full five-point stencil.
    Interior,
    /// Unknown tied to an interpolation of donor-chart values.
    Fringe,
    /// Dirichlet node on the inner truncation rim of a collar.
    InnerRim,
    /// Inactive node (cut away under another chart's territory).
    Hole,
}

/// Bilinear interpolation source for a fringe node.
#[derive(Clone, Copy, Debug)]
pub struct FringeTie {
    pub donor_patch: usize,
    pub donor_nodes: [usize; 4],
    pub weights: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    /// Log-polar collar around pole `site`.
    Collar { site: usize },
    /// Cartesian cap in the `z` chart.
    North,
    /// Cartesian cap in the `s = 1/z` chart.
    South,
}

/// One grid patch: geometry, node roles, and chart bookkeeping. Scalar
/// fields over the patch are plain `Vec<f64>` indexed by `idx`.
#[derive(Clone, Debug)]
pub struct Patch {
    pub kind: PatchKind,
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub hx: f64,
    pub hy: f64,
    pub periodic_y: bool,
    pub roles: Vec<NodeRole>,
    pub ties: Vec<Option<FringeTie>>,
    /// Chart coordinate of each node in the patch's frame (`z` for north
    /// and finite-pole collars, `s = 1/z` for south and the infinity collar).
    pub frame: Vec<Complex64>,
    /// Derivative `d(frame)/d(chart coordinate)` at each node: for collars
    /// `dz/dzeta` with `zeta = rho + i theta`; identity on caps.
    pub frame_deriv: Vec<Complex64>,
    /// Pole proximity: `(site, |w|)` when the node lies inside a pole's
    /// canonical disk of interest.
    pub mark: Vec<Option<(usize, f64)>>,
}

impl Patch {
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        (self.x0 + i as f64 * self.hx, self.y0 + j as f64 * self.hy)
    }

    #[inline]
    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    /// Neighbor indices west/east/south/north, honoring y-periodicity.
    /// `None` when a non-periodic edge is crossed.
    pub fn neighbors(&self, i: usize, j: usize) -> [Option<usize>; 4] {
        let w = (i > 0).then(|| self.idx(i - 1, j));
        let e = (i + 1 < self.nx).then(|| self.idx(i + 1, j));
        let s = if j > 0 {
            Some(self.idx(i, j - 1))
        } else if self.periodic_y {
            Some(self.idx(i, self.ny - 1))
        } else {
            None
        };
        let n = if j + 1 < self.ny {
            Some(self.idx(i, j + 1))
        } else if self.periodic_y {
            Some(self.idx(i, 0))
        } else {
            None
        };
        [w, e, s, n]
    }

    /// Flat five-point Laplacian `f_xx + f_yy` at `(i, j)`; `None` when the
    /// stencil would leave the grid.
    pub fn five_point(&self, f: &[f64], i: usize, j: usize) -> Option<f64> {
        let [w, e, s, n] = self.neighbors(i, j);
        let (w, e, s, n) = (w?, e?, s?, n?);
        let c = f[self.idx(i, j)];
        Some((f[w] + f[e] - 2.0 * c) / (self.hx * self.hx)
            + (f[s] + f[n] - 2.0 * c) / (self.hy * self.hy))
    }

    /// Bilinear sample of a nodal field at chart coordinates `(x, y)`.
    /// Returns the four node indices and weights, or `None` when `(x, y)`
    /// falls outside the grid. Periodic y is wrapped.
    pub fn bilinear(&self, x: f64, y: f64) -> Option<([usize; 4], [f64; 4])> {
        let fx = (x - self.x0) / self.hx;
        let eps = 1e-9;
        if fx < -eps || fx > (self.nx - 1) as f64 + eps {
            return None;
        }
        let fx = fx.clamp(0.0, (self.nx - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.nx - 2);
        let tx = fx - i0 as f64;

        let (j0, j1, ty) = if self.periodic_y {
            let span = self.ny as f64;
            let fy = ((y - self.y0) / self.hy).rem_euclid(span);
            let j0 = (fy.floor() as usize).min(self.ny - 1);
            (j0, (j0 + 1) % self.ny, fy - j0 as f64)
        } else {
            let fy = (y - self.y0) / self.hy;
            if fy < -eps || fy > (self.ny - 1) as f64 + eps {
                return None;
            }
            let fy = fy.clamp(0.0, (self.ny - 1) as f64);
            let j0 = (fy.floor() as usize).min(self.ny - 2);
            (j0, j0 + 1, fy - j0 as f64)
        };
        let nodes = [
            self.idx(i0, j0),
            self.idx(i0 + 1, j0),
            self.idx(i0, j1),
            self.idx(i0 + 1, j1),
        ];
        let weights = [
            (1.0 - tx) * (1.0 - ty),
            tx * (1.0 - ty),
            (1.0 - tx) * ty,
            tx * ty,
        ];
        Some((nodes, weights))
    }

    pub fn sample(&self, f: &[f64], x: f64, y: f64) -> Option<f64> {
        let (nodes, wts) = self.bilinear(x, y)?;
        Some(nodes.iter().zip(wts).map(|(&n, w)| f[n] * w).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_patch() -> Patch {
        let nx = 9;
        let ny = 7;
        Patch {
            kind: PatchKind::North,
            nx,
            ny,
            x0: -1.0,
            y0: 0.0,
            hx: 0.25,
            hy: 0.5,
            periodic_y: false,
            roles: vec![NodeRole::Interior; nx * ny],
            ties: vec![None; nx * ny],
            frame: vec![Complex64::ZERO; nx * ny],
            frame_deriv: vec![Complex64::ONE; nx * ny],
            mark: vec![None; nx * ny],
        }
    }

    #[test]
    fn five_point_on_quadratic_is_exact() {
        let p = flat_patch();
        let mut f = vec![0.0; p.n_nodes()];
        for j in 0..p.ny {
            for i in 0..p.nx {
                let (x, y) = p.coords(i, j);
                f[p.idx(i, j)] = 3.0 * x * x - 2.0 * y * y + x * y + 4.0;
            }
        }
        let lap = p.five_point(&f, 4, 3).unwrap();
        assert!((lap - (6.0 - 4.0)).abs() < 1e-12);
        assert!(p.five_point(&f, 0, 3).is_none());
    }

    #[test]
    fn periodic_wrap_in_y() {
        let nx = 5;
        let ny = 64;
        let p = Patch {
            kind: PatchKind::North,
            nx,
            ny,
            x0: 0.0,
            y0: 0.0,
            hx: 0.1,
            hy: 2.0 * std::f64::consts::PI / ny as f64,
            periodic_y: true,
            roles: vec![NodeRole::Interior; nx * ny],
            ties: vec![None; nx * ny],
            frame: vec![Complex64::ZERO; nx * ny],
            frame_deriv: vec![Complex64::ONE; nx * ny],
            mark: vec![None; nx * ny],
        };
        let mut f = vec![0.0; p.n_nodes()];
        for j in 0..p.ny {
            for i in 0..p.nx {
                let (_, y) = p.coords(i, j);
                f[p.idx(i, j)] = y.cos();
            }
        }
        // Stencil at j = 0 wraps to j = ny-1; cos'' at y=0 is -1 + O(h^2).
        let a = p.five_point(&f, 2, 0).unwrap();
        assert!((a + 1.0).abs() < 2e-3, "wrapped laplacian: {a}");
    }

    #[test]
    fn bilinear_reproduces_linear_fields() {
        let p = flat_patch();
        let mut f = vec![0.0; p.n_nodes()];
        for j in 0..p.ny {
            for i in 0..p.nx {
                let (x, y) = p.coords(i, j);
                f[p.idx(i, j)] = 2.0 * x - 0.7 * y + 0.3;
            }
        }
        let v = p.sample(&f, -0.33, 1.71).unwrap();
        assert!((v - (2.0 * -0.33 - 0.7 * 1.71 + 0.3)).abs() < 1e-12);
        assert!(p.sample(&f, 5.0, 0.0).is_none());
    }
}
