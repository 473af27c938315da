//! Composite chart atlas for the punctured sphere.
//!
//! The surface is covered by one log-polar "collar" per pole, built in the
//! pole's canonical coordinate, plus two Cartesian caps: a north cap in the
//! `z` chart and a south cap in `s = 1/z`. Collars carry the singular part
//! of the background metric; caps carry the round part; charts overlap and
//! are stitched by one-layer interpolation fringes (overset style). Each
//! collar is truncated at an inner radius `e^{rho_min}`, whose row of nodes
//! is a Dirichlet rim for the exhaustion solver.
//!
//! Node territory is disjoint by construction (pole collar disks are small
//! compared to pole separation), so integration over "owned" nodes counts
//! every region of the sphere once.

pub mod background;
pub mod grid;

use crate::cubic::{CubicError, Pole, RationalCubicDifferential, SpherePoint};
use background::{lam_blend_w, lam_round, uh2_from};
pub use grid::{FringeTie, NodeRole, Patch, PatchKind};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Cubic(#[from] CubicError),
    #[error("background blend is ill-posed: {0}")]
    BlendFailure(String),
    #[error("composite grid has a coverage gap: {0}")]
    CoverageGap(String),
}

/// Per-pole geometry: canonical chart plus collar radii (in canonical
/// `w` units). `r2` is the collar's outer radius, `r_b` the inner edge of
/// the blend annulus `[r_b, 2 r_b]`.
#[derive(Clone, Debug)]
pub struct PoleSite {
    pub pole: Pole,
    pub chart: crate::cubic::CanonicalChart,
    pub r2: f64,
    pub r_b: f64,
}

impl PoleSite {
    /// Centered chart coordinate of a frame point relative to this site,
    /// with the derivative d(zeta)/d(frame). `frame_is_south` says the
    /// point is given in the `s = 1/z` chart.
    fn zeta_of_frame(
        &self,
        frame: Complex64,
        frame_is_south: bool,
    ) -> Option<(Complex64, Complex64)> {
        match (self.pole.position, frame_is_south) {
            (SpherePoint::Finite(p), false) => Some((frame - p, Complex64::ONE)),
            (SpherePoint::Finite(p), true) => {
                if frame.norm() < 1e-14 {
                    return None;
                }
                let z = 1.0 / frame;
                Some((z - p, -1.0 / (frame * frame)))
            }
            (SpherePoint::Infinity, false) => {
                if frame.norm() < 1e-14 {
                    return None;
                }
                Some((1.0 / frame, -1.0 / (frame * frame)))
            }
            (SpherePoint::Infinity, true) => Some((frame, Complex64::ONE)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AtlasConfig {
    /// Angular nodes on each collar.
    pub n_theta: usize,
    /// Inner truncation depth: collars span `rho` in `[rho_min, ln r2]`.
    pub rho_min: f64,
    /// North cap node count per axis (south uses roughly half).
    pub cap_n: usize,
    /// Truncation order for canonical-coordinate series.
    pub chart_order: usize,
    /// Upper bound for collar outer radius in canonical units.
    pub r2_cap: f64,
    /// `r_b` as a fraction of `r2`.
    pub rb_frac: f64,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            n_theta: 96,
            rho_min: -5.0,
            cap_n: 129,
            chart_order: 40,
            r2_cap: 0.2,
            rb_frac: 0.35,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChartAtlas {
    pub diff: RationalCubicDifferential,
    diff_south: RationalCubicDifferential,
    pub sites: Vec<PoleSite>,
    /// Collar patches first (index = site index), then north, then south.
    pub patches: Vec<Patch>,
    pub north: usize,
    pub south: usize,
    /// Cap ownership split: north owns `|z| <= split_radius`.
    pub split_radius: f64,
    /// Ownership margin in collar rows (collar rows beyond `nx-1-own_rows`
    /// belong to the caps).
    pub own_rows: usize,
    pub cfg: AtlasConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundKind {
    /// `|log|w|^2| |dw|^2` near poles: the singular background `h`.
    Singular,
    /// `|dw|^2` near poles: the flat comparison background `k`.
    Flat,
}

/// Node-wise background data on every patch of an atlas, in each patch's
/// own chart coordinates (`lam` on a collar includes the `e^{2 rho}` factor
/// of the log coordinate). `kap` is the five-point discrete curvature at
/// interior nodes and the analytic classification value elsewhere; only
/// interior values feed the solver. `uh2` is the chart-invariant squared
/// norm of the cubic differential (cubic weight).
#[derive(Clone, Debug)]
pub struct MetricData {
    pub kind: BackgroundKind,
    pub lam: Vec<Vec<f64>>,
    pub kap: Vec<Vec<f64>>,
    pub uh2: Vec<Vec<f64>>,
}

/// Contiguous numbering of every non-hole node across all patches, used to
/// assemble global sparse systems. `index[patch][node]` is `None` for holes;
/// `owners[g]` inverts the map.
pub struct NodeIndex {
    pub index: Vec<Vec<Option<usize>>>,
    pub owners: Vec<(usize, usize)>,
    pub n: usize,
}

impl NodeIndex {
    pub fn over_patches(patches: &[Patch]) -> NodeIndex {
        let mut index = Vec::with_capacity(patches.len());
        let mut owners = Vec::new();
        let mut n = 0usize;
        for (pi, p) in patches.iter().enumerate() {
            let mut col = vec![None; p.n_nodes()];
            for (idx, role) in p.roles.iter().enumerate() {
                if *role != NodeRole::Hole {
                    col[idx] = Some(n);
                    owners.push((pi, idx));
                    n += 1;
                }
            }
            index.push(col);
        }
        NodeIndex { index, owners, n }
    }

    pub fn get(&self, patch: usize, node: usize) -> Option<usize> {
        self.index[patch][node]
    }
}

pub fn build_atlas(
    diff: &RationalCubicDifferential,
    cfg: &AtlasConfig,
) -> Result<ChartAtlas, GeometryError> {
    diff.validate_divisor()?;
    if 2.0 * cfg.rb_frac >= 0.95 {
        return Err(GeometryError::BlendFailure(format!(
            "blend annulus [r_b, 2 r_b] with r_b = {:.3} r2 leaves the collar",
            cfg.rb_frac
        )));
    }
    if cfg.r2_cap >= 0.5 {
        return Err(GeometryError::BlendFailure(
            "collar radius must keep |w| well below 1 so log|w|^2 stays negative".into(),
        ));
    }
    let poles = diff.find_poles()?;
    let mut sites = Vec::with_capacity(poles.len());
    for pole in &poles {
        let chart = diff.canonical_chart(pole, cfg.chart_order, false)?;
        let r2 = cfg.r2_cap.min(0.9 * chart.trusted_radius());
        let r_b = cfg.rb_frac * r2;
        if cfg.rho_min >= r_b.ln() - 0.5 {
            return Err(GeometryError::BlendFailure(format!(
                "rho_min = {} does not reach below the blend annulus (ln r_b = {:.3})",
                cfg.rho_min,
                r_b.ln()
            )));
        }
        // The blend pulls the round metric into the collar; it must be a
        // genuine conformal factor there (nonvanishing chart derivative).
        for k in 0..16 {
            let w = Complex64::from_polar(
                1.5 * r_b,
                2.0 * std::f64::consts::PI * k as f64 / 16.0,
            );
            let zeta = chart.unmap(w);
            let d = chart.map_derivative(zeta);
            if !(d.norm() > 1e-12) {
                return Err(GeometryError::BlendFailure(format!(
                    "degenerate chart derivative on the blend annulus of pole {}",
                    pole.position
                )));
            }
        }
        sites.push(PoleSite {
            pole: *pole,
            chart,
            r2,
            r_b,
        });
    }

    // Cap extents: keep all finite poles well inside the north rectangle.
    let max_abs_pole = sites
        .iter()
        .filter_map(|s| match s.pole.position {
            SpherePoint::Finite(p) => Some(p.norm()),
            SpherePoint::Infinity => None,
        })
        .fold(0.0f64, f64::max);
    let l_north = (1.3 * max_abs_pole + 0.4).max(1.6);
    let l_south = 0.8_f64;
    let split_radius = (l_north / l_south).sqrt();

    // Collar grids. `hx = hy` exactly and rows are anchored at the top
    // (`rho = ln r2`), so deepening `rho_min` extends a grid downward while
    // keeping every shallower row at identical coordinates — the exhaustion
    // stages then share nodes exactly.
    let dtheta = 2.0 * std::f64::consts::PI / cfg.n_theta as f64;
    let mut patches = Vec::new();
    for (si, site) in sites.iter().enumerate() {
        let rho_max = site.r2.ln();
        let span = rho_max - cfg.rho_min;
        let n_rho = (span / dtheta).ceil() as usize + 1;
        let hx = dtheta;
        let n = n_rho * cfg.n_theta;
        let mut patch = Patch {
            kind: PatchKind::Collar { site: si },
            nx: n_rho,
            ny: cfg.n_theta,
            x0: rho_max - (n_rho - 1) as f64 * hx,
            y0: 0.0,
            hx,
            hy: dtheta,
            periodic_y: true,
            roles: vec![NodeRole::Interior; n],
            ties: vec![None; n],
            frame: vec![Complex64::ZERO; n],
            frame_deriv: vec![Complex64::ZERO; n],
            mark: vec![None; n],
        };
        let fwd_deriv = site.chart.forward_series().derivative();
        let p_center = match site.pole.position {
            SpherePoint::Finite(p) => p,
            SpherePoint::Infinity => Complex64::ZERO,
        };
        for j in 0..patch.ny {
            for i in 0..patch.nx {
                let (rho, th) = patch.coords(i, j);
                let idx = patch.idx(i, j);
                let w = Complex64::from_polar(rho.exp(), th);
                let zeta = site.chart.unmap(w);
                let dzeta_dw = Complex64::ONE / fwd_deriv.eval(zeta);
                patch.frame[idx] = p_center + zeta;
                patch.frame_deriv[idx] = dzeta_dw * w; // d(frame)/d(rho+i theta)
                patch.mark[idx] = Some((si, rho.exp()));
                patch.roles[idx] = if i == 0 {
                    NodeRole::InnerRim
                } else if i == patch.nx - 1 {
                    NodeRole::Fringe
                } else {
                    NodeRole::Interior
                };
            }
        }
        patches.push(patch);
    }

    // Cap grids.
    let make_cap = |kind: PatchKind, l: f64, n: usize| -> Patch {
        let h = 2.0 * l / (n - 1) as f64;
        let total = n * n;
        let mut patch = Patch {
            kind,
            nx: n,
            ny: n,
            x0: -l,
            y0: -l,
            hx: h,
            hy: h,
            periodic_y: false,
            roles: vec![NodeRole::Interior; total],
            ties: vec![None; total],
            frame: vec![Complex64::ZERO; total],
            frame_deriv: vec![Complex64::ONE; total],
            mark: vec![None; total],
        };
        for j in 0..n {
            for i in 0..n {
                let (x, y) = patch.coords(i, j);
                let idx = patch.idx(i, j);
                patch.frame[idx] = Complex64::new(x, y);
            }
        }
        patch
    };
    let south_n = {
        let n = cfg.cap_n / 2 + 1;
        if n % 2 == 0 {
            n + 1
        } else {
            n
        }
    };
    let north_idx = patches.len();
    patches.push(make_cap(PatchKind::North, l_north, cfg.cap_n));
    let south_idx = patches.len();
    patches.push(make_cap(PatchKind::South, l_south, south_n));

    // Mark cap nodes against every pole territory.
    for ci in [north_idx, south_idx] {
        let is_south = ci == south_idx;
        let (frames, marks) = {
            let p = &patches[ci];
            (p.frame.clone(), p.mark.len())
        };
        let mut mark = vec![None; marks];
        for (idx, &f) in frames.iter().enumerate() {
            for (si, site) in sites.iter().enumerate() {
                let Some((zeta, _)) = site.zeta_of_frame(f, is_south) else {
                    continue;
                };
                let lam_abs = site.chart.lambda.norm();
                let gate = (1.45 * site.r2 / lam_abs).min(0.75 * site.chart.divisor_distance);
                if zeta.norm() > gate {
                    continue;
                }
                let w = site.chart.map(zeta);
                if w.norm() <= site.r2 {
                    mark[idx] = Some((si, w.norm()));
                    break;
                }
            }
        }
        patches[ci].mark = mark;
    }

    let mut atlas = ChartAtlas {
        diff: diff.clone(),
        diff_south: diff.inverted(),
        sites,
        patches,
        north: north_idx,
        south: south_idx,
        split_radius,
        own_rows: 2,
        cfg: *cfg,
    };

    // Classify cap roles and build ties; widen the collar/cap ownership
    // margin until every fringe interpolates from clean donor nodes.
    let mut last_err = None;
    for own_rows in 2..=8 {
        atlas.own_rows = own_rows;
        atlas.classify_caps();
        match atlas.build_ties() {
            Ok(()) => {
                atlas.validate()?;
                return Ok(atlas);
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        GeometryError::CoverageGap("no ownership margin produced valid donors".into())
    }))
}

impl ChartAtlas {
    /// Ownership radius (in `w` units) of a site's collar: cap nodes closer
    /// than this are cut away.
    fn r_own(&self, si: usize) -> f64 {
        let collar = &self.patches[si];
        self.sites[si].r2 * (-(self.own_rows as f64) * collar.hx).exp()
    }

    /// Largest `|w|` at which the collar may act as an interpolation donor.
    fn r_donor_max(&self, si: usize) -> f64 {
        let collar = &self.patches[si];
        self.sites[si].r2 * (-1.5 * collar.hx).exp()
    }

    fn classify_caps(&mut self) {
        for ci in [self.north, self.south] {
            let r_own: Vec<f64> = (0..self.sites.len()).map(|s| self.r_own(s)).collect();
            let p = &mut self.patches[ci];
            let nx = p.nx;
            let ny = p.ny;
            let cut: Vec<bool> = (0..p.n_nodes())
                .map(|idx| matches!(p.mark[idx], Some((si, r)) if r <= r_own[si]))
                .collect();
            for j in 0..ny {
                for i in 0..nx {
                    let idx = p.idx(i, j);
                    // Cut nodes become the fringe ring where they border
                    // uncut terrain and holes deeper in (even on the cap
                    // boundary, where a pole disk may stick out of the
                    // rectangle). Uncut boundary nodes interpolate from
                    // the other cap.
                    let role = if cut[idx] {
                        let ring = p
                            .neighbors(i, j)
                            .iter()
                            .any(|n| n.map(|n| !cut[n]).unwrap_or(false));
                        if ring {
                            NodeRole::Fringe
                        } else {
                            NodeRole::Hole
                        }
                    } else if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                        NodeRole::Fringe
                    } else {
                        NodeRole::Interior
                    };
                    p.roles[idx] = role;
                    p.ties[idx] = None;
                }
            }
        }
    }

    pub fn global_z_of(&self, patch: usize, idx: usize) -> Complex64 {
        let p = &self.patches[patch];
        let south_frame = matches!(p.kind, PatchKind::South)
            || matches!(p.kind, PatchKind::Collar { site } if self.sites[site].chart.at_infinity);
        if south_frame {
            let f = p.frame[idx];
            if f.norm() < 1e-300 {
                Complex64::new(f64::INFINITY, 0.0)
            } else {
                1.0 / f
            }
        } else {
            p.frame[idx]
        }
    }

    /// Bilinear tie into `donor`, requiring all donor nodes to be clean
    /// (interior in their own patch).
    fn tie_into(
        &self,
        donor: usize,
        x: f64,
        y: f64,
        what: &str,
    ) -> Result<FringeTie, GeometryError> {
        let dp = &self.patches[donor];
        let (donor_nodes, weights) = dp.bilinear(x, y).ok_or_else(|| {
            GeometryError::CoverageGap(format!(
                "{what}: point ({x:.4}, {y:.4}) falls outside donor patch {donor}"
            ))
        })?;
        for &n in &donor_nodes {
            if dp.roles[n] != NodeRole::Interior {
                return Err(GeometryError::CoverageGap(format!(
                    "{what}: donor node {n} in patch {donor} has role {:?}",
                    dp.roles[n]
                )));
            }
        }
        Ok(FringeTie {
            donor_patch: donor,
            donor_nodes,
            weights,
        })
    }

    fn build_ties(&mut self) -> Result<(), GeometryError> {
        let n_sites = self.sites.len();
        let mut all_ties: Vec<Vec<(usize, FringeTie)>> = vec![Vec::new(); self.patches.len()];

        // Collar outer rows tie into a cap, chosen per node by position.
        for si in 0..n_sites {
            let p = &self.patches[si];
            let i = p.nx - 1;
            let mut ties = Vec::new();
            for j in 0..p.ny {
                let idx = p.idx(i, j);
                let z = self.global_z_of(si, idx);
                let (cap, x, y) = if z.norm() <= self.split_radius {
                    (self.north, z.re, z.im)
                } else {
                    let s = 1.0 / z;
                    (self.south, s.re, s.im)
                };
                let tie = self.tie_into(cap, x, y, "collar rim")?;
                ties.push((idx, tie));
            }
            all_ties[si] = ties;
        }

        // Cap fringes: pole-ring nodes tie into the collar; boundary nodes
        // tie into the collar when deep enough, otherwise the other cap.
        for ci in [self.north, self.south] {
            let is_south = ci == self.south;
            let other = if is_south { self.north } else { self.south };
            let p = &self.patches[ci];
            let mut ties = Vec::new();
            for j in 0..p.ny {
                for i in 0..p.nx {
                    let idx = p.idx(i, j);
                    if p.roles[idx] != NodeRole::Fringe {
                        continue;
                    }
                    let boundary = i == 0 || j == 0 || i == p.nx - 1 || j == p.ny - 1;
                    let collar_tie = match p.mark[idx] {
                        Some((si, r_w)) if r_w <= self.r_donor_max(si) => {
                            let site = &self.sites[si];
                            let (zeta, _) = site
                                .zeta_of_frame(p.frame[idx], is_south)
                                .expect("marked node must have chart coordinates");
                            let w = site.chart.map(zeta);
                            Some((si, w.ln().re, w.arg()))
                        }
                        _ => None,
                    };
                    let tie = if let Some((si, rho_q, th_q)) = collar_tie {
                        self.tie_into(si, rho_q, th_q, "cap pole fringe")?
                    } else if boundary {
                        let z = self.global_z_of(ci, idx);
                        let f = if is_south { z } else { 1.0 / z };
                        self.tie_into(other, f.re, f.im, "cap boundary fringe")?
                    } else {
                        return Err(GeometryError::CoverageGap(format!(
                            "interior fringe node {idx} in patch {ci} has no donor"
                        )));
                    };
                    ties.push((idx, tie));
                }
            }
            all_ties[ci] = ties;
        }

        for (pi, ties) in all_ties.into_iter().enumerate() {
            for (idx, tie) in ties {
                self.patches[pi].ties[idx] = Some(tie);
            }
        }
        Ok(())
    }

    /// Structural invariants: interior stencils never touch holes; every
    /// fringe node carries a tie.
    fn validate(&self) -> Result<(), GeometryError> {
        for (pi, p) in self.patches.iter().enumerate() {
            for j in 0..p.ny {
                for i in 0..p.nx {
                    let idx = p.idx(i, j);
                    match p.roles[idx] {
                        NodeRole::Interior => {
                            for n in p.neighbors(i, j) {
                                let n = n.ok_or_else(|| {
                                    GeometryError::CoverageGap(format!(
                                        "interior node {idx} of patch {pi} at the grid edge"
                                    ))
                                })?;
                                if p.roles[n] == NodeRole::Hole {
                                    return Err(GeometryError::CoverageGap(format!(
                                        "interior node {idx} of patch {pi} touches a hole"
                                    )));
                                }
                            }
                        }
                        NodeRole::Fringe => {
                            if p.ties[idx].is_none() {
                                return Err(GeometryError::CoverageGap(format!(
                                    "fringe node {idx} of patch {pi} has no tie"
                                )));
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Does this patch own the node for integration purposes? Ownership
    /// partitions the sphere minus the truncation disks, up to half-cell
    /// slack along chart seams (node-cell quadrature is O(h) there).
    pub fn owned(&self, patch: usize, idx: usize) -> bool {
        let p = &self.patches[patch];
        match p.kind {
            PatchKind::Collar { .. } => {
                let (i, _) = p.ij(idx);
                i + self.own_rows <= p.nx - 1
            }
            PatchKind::North | PatchKind::South => {
                if p.roles[idx] != NodeRole::Interior {
                    return false;
                }
                if let Some((si, r_w)) = p.mark[idx] {
                    // Pad by half a collar cell so cap cells don't reach
                    // into the collar-owned annulus.
                    let pad = (0.5 * self.patches[si].hx).exp();
                    if r_w <= self.r_own(si) * pad {
                        return false;
                    }
                }
                let z = self.global_z_of(patch, idx);
                if matches!(p.kind, PatchKind::North) {
                    z.norm() <= self.split_radius
                } else {
                    !(z.norm() <= self.split_radius)
                }
            }
        }
    }

    /// Global indexing of all non-hole nodes, shared by the sparse solvers.
    pub fn node_index(&self) -> NodeIndex {
        NodeIndex::over_patches(&self.patches)
    }

    /// Sum of `f(patch, node) * cell_area` over owned nodes. With
    /// `f = lam * g` this integrates `g` against the metric area element.
    pub fn integrate(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for (pi, p) in self.patches.iter().enumerate() {
            let cell = p.hx * p.hy;
            for idx in 0..p.n_nodes() {
                if self.owned(pi, idx) {
                    total += f(pi, idx) * cell;
                }
            }
        }
        total
    }

    /// Background fields for the requested kind on every patch.
    pub fn background(&self, kind: BackgroundKind) -> MetricData {
        let flat = kind == BackgroundKind::Flat;
        let mut lam = Vec::with_capacity(self.patches.len());
        let mut uh2 = Vec::with_capacity(self.patches.len());

        for (pi, p) in self.patches.iter().enumerate() {
            let mut lam_p = vec![0.0; p.n_nodes()];
            let mut uh2_p = vec![0.0; p.n_nodes()];
            match p.kind {
                PatchKind::Collar { site } => {
                    let st = &self.sites[site];
                    for j in 0..p.ny {
                        for i in 0..p.nx {
                            let idx = p.idx(i, j);
                            let (rho, _) = p.coords(i, j);
                            let r = rho.exp();
                            // lam in the w chart, then into the log chart.
                            let lam_w = if r < 2.0 * st.r_b {
                                // |d frame/dw|^2 = |frame_deriv / w|^2
                                let dfr_dw = p.frame_deriv[idx] / Complex64::from_polar(r, 0.0);
                                // frame_deriv carries e^{i theta}; norms only.
                                let round_w =
                                    lam_round(p.frame[idx]) * dfr_dw.norm_sqr();
                                lam_blend_w(r, st.r_b, flat, round_w)
                            } else {
                                let dfr_dw_sq = p.frame_deriv[idx].norm_sqr() / (r * r);
                                lam_round(p.frame[idx]) * dfr_dw_sq
                            };
                            lam_p[idx] = lam_w * r * r;
                            uh2_p[idx] = uh2_from((-2.0 * rho).exp(), lam_w);
                        }
                    }
                }
                PatchKind::North | PatchKind::South => {
                    let is_south = pi == self.south;
                    let diff = if is_south { &self.diff_south } else { &self.diff };
                    for idx in 0..p.n_nodes() {
                        if p.roles[idx] == NodeRole::Hole {
                            lam_p[idx] = 1.0;
                            continue;
                        }
                        let f = p.frame[idx];
                        let lam_v = match p.mark[idx] {
                            Some((si, r_w)) if r_w < 2.0 * self.sites[si].r_b => {
                                let site = &self.sites[si];
                                let (zeta, dz_df) = site
                                    .zeta_of_frame(f, is_south)
                                    .expect("marked node has chart coordinates");
                                let dw_df =
                                    site.chart.map_derivative(zeta) * dz_df;
                                let round_w = lam_round(f) / dw_df.norm_sqr();
                                lam_blend_w(r_w, site.r_b, flat, round_w) * dw_df.norm_sqr()
                            }
                            _ => lam_round(f),
                        };
                        lam_p[idx] = lam_v;
                        uh2_p[idx] = diff
                            .evaluate(f)
                            .map(|u| uh2_from(u.norm_sqr(), lam_v))
                            .unwrap_or(0.0);
                    }
                }
            }
            let _ = pi;
            lam.push(lam_p);
            uh2.push(uh2_p);
        }

        // Discrete curvature from the stored conformal factors; analytic
        // classification values where the stencil is unavailable.
        let mut kap = Vec::with_capacity(self.patches.len());
        for (pi, p) in self.patches.iter().enumerate() {
            let log_lam: Vec<f64> = lam[pi].iter().map(|v| v.ln()).collect();
            let mut kap_p = vec![0.0; p.n_nodes()];
            for j in 0..p.ny {
                for i in 0..p.nx {
                    let idx = p.idx(i, j);
                    if p.roles[idx] == NodeRole::Hole {
                        continue;
                    }
                    let stencil_ok = !matches!(p.roles[idx], NodeRole::Hole)
                        && p.neighbors(i, j)
                            .iter()
                            .all(|n| n.map(|n| p.roles[n] != NodeRole::Hole).unwrap_or(false));
                    kap_p[idx] = if stencil_ok {
                        let lap = p.five_point(&log_lam, i, j).expect("checked above");
                        -lap / (2.0 * lam[pi][idx])
                    } else {
                        match p.kind {
                            PatchKind::Collar { .. } => {
                                let (rho, _) = p.coords(i, j);
                                if rho.exp() < self.sites[match p.kind {
                                    PatchKind::Collar { site } => site,
                                    _ => unreachable!(),
                                }]
                                .r_b
                                {
                                    if flat {
                                        0.0
                                    } else {
                                        background::kappa_model(rho)
                                    }
                                } else {
                                    1.0
                                }
                            }
                            _ => 1.0,
                        }
                    };
                }
            }
            kap.push(kap_p);
        }

        MetricData {
            kind,
            lam,
            uh2,
            kap,
        }
    }
}
