// Scratch diagnostics: solve the hexic at the two verification-run parameter
// sets and print stage logs, node counts, and puncture probes.

use num_complex::Complex64;
use semiflat::cubic::RationalCubicDifferential;
use semiflat::geometry::{AtlasConfig, BackgroundKind, NodeRole, PatchKind};
use semiflat::holonomy::{classify, decay_rate, loop_holonomy, winding_number};
use semiflat::mongeampere::{hessian_on_circle, max_unimodularity_defect};
use semiflat::titeica::{blowup_check, solve, Solution, SolverConfig};
use semiflat::transport::{
    circle_path, init_frame, transport, FlatData, ModelData, SolvedData, SurfaceData,
};
use std::time::Instant;

fn hexic() -> RationalCubicDifferential {
    RationalCubicDifferential::from_coeff_pairs(
        &[[1.0, 0.0]],
        &[
            [-1.0, 0.0],
            [0.0, 0.0],
            [0.0, 0.0],
            [0.0, 0.0],
            [0.0, 0.0],
            [0.0, 0.0],
            [1.0, 0.0],
        ],
    )
}

fn report(tag: &str, sol: &Solution, secs: f64) {
    let active: usize = sol
        .atlas
        .patches
        .iter()
        .map(|p| p.roles.iter().filter(|r| **r != NodeRole::Hole).count())
        .sum();
    let interior: usize = sol
        .atlas
        .patches
        .iter()
        .map(|p| p.roles.iter().filter(|r| **r == NodeRole::Interior).count())
        .sum();
    println!(
        "[{tag}] solve took {:.1}s, active nodes {}, interior {}",
        secs, active, interior
    );
    if let Some(rl) = &sol.refine {
        println!(
            "[{tag}] refine: iters={} chart={:.2e} metric={:.2e} sand=({:+.2e},{:+.2e}) uphill={:+.3e} clamped={}",
            rl.newton_iters,
            rl.chart_residual,
            rl.metric_residual,
            rl.sandwich_low,
            rl.sandwich_high,
            rl.max_uphill,
            rl.clamped
        );
    }
    for st in &sol.stages {
        println!(
            "[{tag}] stage rho_min={:6.2} iters={:2} chart={:.2e} metric={:.2e} \
             low_margin={:+.2e} up_margin={:+.2e} sand=({:+.2e},{:+.2e}) uphill={:?} probe={:?}",
            st.rho_min,
            st.newton_iters,
            st.chart_residual,
            st.metric_residual,
            st.lower_margin,
            st.upper_margin,
            st.sandwich_low,
            st.sandwich_high,
            st.max_uphill,
            st.probe_change
        );
    }
    println!("[{tag}] final metric residual: {:.3e}", sol.metric_residual);
    let site = &sol.atlas.sites[0];
    println!("[{tag}] r2 = {:.4}  r_b = {:.4}", site.r2, site.r_b);
    let probes = blowup_check(&sol.atlas, &sol.u, &[1e-1, 1e-2, 1e-3]);
    for pr in probes.iter().filter(|p| p.site < 2) {
        println!(
            "[{tag}] site {} r={:.3e}  sup|u|={:.4e}  sup|z u_z|={:.4e}",
            pr.site, pr.r, pr.sup_u, pr.sup_zuz
        );
    }
}

fn main() {
    let diff = hexic();

    if std::env::args().any(|a| a == "--shallow") {
        let shallow_atlas = AtlasConfig {
            n_theta: 192,
            cap_n: 321,
            rb_frac: 0.2,
            ..AtlasConfig::default()
        };
        let shallow_cfg = SolverConfig {
            stages: vec![-4.0, -5.5, -7.0],
            ..SolverConfig::default()
        };
        let t0 = Instant::now();
        let sol = solve(&diff, &shallow_atlas, &shallow_cfg).unwrap();
        report("shallow", &sol, t0.elapsed().as_secs_f64());
    }

    // Pointwise comparison: zero-field SolvedData vs ModelData on |w| = e^-6.
    {
        let atl = AtlasConfig {
            n_theta: 64,
            cap_n: 97,
            rb_frac: 0.2,
            ..AtlasConfig::default()
        };
        let cfg = SolverConfig {
            stages: vec![-6.0, -9.0, -12.6],
            ..SolverConfig::default()
        };
        let s = solve(&diff, &atl, &cfg).unwrap();
        let zeros: Vec<Vec<f64>> = s.u.iter().map(|v| vec![0.0; v.len()]).collect();
        let sz = SolvedData::new(&s.atlas, &zeros, 0);
        let model = ModelData;
        let (mut dp, mut dd, mut dc) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..17 {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 17.0;
            let w = Complex64::from_polar((-6.0f64).exp(), th);
            dp = dp.max((sz.psi(w) - model.psi(w)).abs());
            dd = dd.max((sz.dpsi(w) - model.dpsi(w)).norm());
            dc = dc.max((sz.cubic(w) - model.cubic(w)).norm());
        }
        println!("[pointwise] zero-field vs model at y=6: |dpsi_gap|={dd:.3e} |psi_gap|={dp:.3e} |cubic_gap|={dc:.3e}");
        let w = Complex64::from_polar((-6.0f64).exp(), 0.7);
        println!(
            "[pointwise] sample w={w}: model cubic={} solved cubic={}",
            model.cubic(w),
            sz.cubic(w)
        );
        println!(
            "[pointwise] model dpsi={} solved dpsi={}",
            model.dpsi(w),
            sz.dpsi(w)
        );
    }

    // Scaling study: resolution (h^2-driven error) vs rim depth (boundary
    // contamination from the zero rim trace).
    for (nt, cap, rim) in [
        (64usize, 97usize, -12.6f64),
        (128, 193, -12.6),
        (64, 97, -10.0),
        (64, 97, -15.0),
        (128, 193, -15.0),
    ] {
        let atl = AtlasConfig {
            n_theta: nt,
            cap_n: cap,
            rb_frac: 0.2,
            ..AtlasConfig::default()
        };
        let cfg = SolverConfig {
            stages: vec![-6.0, 0.5 * (rim - 6.0), rim],
            ..SolverConfig::default()
        };
        let s = solve(&diff, &atl, &cfg).unwrap();
        let sd = SolvedData::new(&s.atlas, &s.u, 0);
        for y in [6.0f64, 10.0] {
            let lh = loop_holonomy(&sd, Complex64::ZERO, (-y).exp(), 0.0).unwrap();
            let tr = lh.map.trace();
            let det = lh.map.det();
            let disc = tr * tr - 4.0 * det;
            let eig_dev = 0.5 * ((tr - 2.0).abs() + disc.abs().sqrt());
            println!(
                "[scale] n_theta={nt} rim={rim} y={y} |tr-2|={:.4e} eig_dev~{:.3e}",
                (tr - 2.0).abs(),
                eig_dev
            );
        }
    }

    // Analytic standard-data ladder (no splines anywhere).
    {
        use semiflat::blaschke::{model_fg, ModelData as BModel, PairSampler};
        let pair = model_fg(&BModel::standard(48)).unwrap();
        let sampler = PairSampler::new(pair);
        for y in [8.0f64, 10.0, 12.0] {
            let lh = loop_holonomy(&sampler, Complex64::ZERO, (-y).exp(), 0.0).unwrap();
            println!(
                "[trace-std] y={y} |tr-2|={:.4e} drift={:.2e}",
                (lh.map.trace() - 2.0).abs(),
                lh.det_drift
            );
        }
    }

    if !std::env::args().any(|a| a == "--deep") {
        return;
    }

    let deep_atlas = AtlasConfig {
        n_theta: 128,
        cap_n: 193,
        rb_frac: 0.2,
        ..AtlasConfig::default()
    };
    let deep_cfg = SolverConfig {
        stages: vec![-6.0, -9.0, -12.6],
        ..SolverConfig::default()
    };
    let t0 = Instant::now();
    let sol = solve(&diff, &deep_atlas, &deep_cfg).unwrap();
    report("deep", &sol, t0.elapsed().as_secs_f64());

    // --- transport diagnostics on the refined deep solution, site 0 ---
    let sd = SolvedData::new(&sol.atlas, &sol.u, 0);
    for y in [6.0f64, 8.0, 10.0] {
        let t = Instant::now();
        let lh = loop_holonomy(&sd, Complex64::ZERO, (-y).exp(), 0.0).unwrap();
        let (e1, e2) = lh.map.eigenvalues();
        let eig_dev = (e1 - 1.0).norm().max((e2 - 1.0).norm());
        let (_, fp_res) = lh.map.fixed_point();
        println!(
            "[loop] y={y} drift={:.2e} |tr-2|={:.2e} |det-1|={:.2e} eig_dev={:.2e} fp_res={:.2e} cls3={:?} cls4={:?} ({:.1}s)",
            lh.det_drift,
            (lh.map.trace() - 2.0).abs(),
            (lh.map.det() - 1.0).abs(),
            eig_dev,
            fp_res,
            classify(&lh.map, 1e-3),
            classify(&lh.map, 1e-4),
            t.elapsed().as_secs_f64()
        );
    }
    // Model and flat controls for the first-integral drift.
    for y in [6.0f64, 8.0] {
        let z0 = Complex64::new((-y).exp(), 0.0);
        let seed = init_frame(&sd, z0, 0.0).unwrap();
        let res = transport(&sd, circle_path(Complex64::ZERO, (-y).exp(), 0.0), &seed).unwrap();
        println!("[drift] solved circle y={y}: {:.3e} steps={}", res.det_drift, res.steps);
    }
    {
        // Ray leg y: 5 -> 10 on the solved collar.
        let a = (-5.0f64).exp();
        let b = (-10.0f64).exp();
        let seed = init_frame(&sd, Complex64::new(a, 0.0), 0.0).unwrap();
        let res = transport(
            &sd,
            move |t: f64| {
                let r = a * (b / a).powf(t);
                (Complex64::new(r, 0.0), Complex64::new(r * (b / a).ln(), 0.0))
            },
            &seed,
        )
        .unwrap();
        println!("[drift] solved ray 5->10: {:.3e} steps={}", res.det_drift, res.steps);
        let seedm = init_frame(&ModelData, Complex64::new((-7.0f64).exp(), 0.0), 0.0).unwrap();
        let resm = transport(&ModelData, circle_path(Complex64::ZERO, (-7.0f64).exp(), 0.0), &seedm).unwrap();
        println!("[drift] model circle y=7: {:.3e}", resm.det_drift);
        let seedf = init_frame(&FlatData, Complex64::new(1.0, 0.0), 0.0).unwrap();
        let resf = transport(&FlatData, circle_path(Complex64::ZERO, 1.0, 0.0), &seedf).unwrap();
        println!("[drift] flat circle r=1: {:.3e}", resf.det_drift);
    }
    for y in [6.0f64, 8.0] {
        let t = Instant::now();
        let w = winding_number(&sd, Complex64::ZERO, (-y).exp(), 0.0, 512);
        println!("[wind] y={y}: {:?} ({:.1}s)", w, t.elapsed().as_secs_f64());
    }
    {
        let t = Instant::now();
        let fit = decay_rate(&sd, 5.0, 10.0, 11).unwrap();
        println!(
            "[decay] slope={:.4} residual={:.2e} samples={} ({:.1}s)",
            fit.slope, fit.residual, fit.samples, t.elapsed().as_secs_f64()
        );
    }
    {
        let t = Instant::now();
        let hs = hessian_on_circle(&sd, Complex64::ZERO, (-6.0f64).exp(), 16, 0.02).unwrap();
        let defect = max_unimodularity_defect(&hs);
        let min_eig = hs.iter().map(|s| s.min_eig).fold(f64::INFINITY, f64::min);
        let asym = hs.iter().map(|s| s.asymmetry).fold(0.0f64, f64::max);
        println!(
            "[hess] solved y=6: defect={:.3e} min_eig={:.3e} asym={:.3e} ({:.1}s)",
            defect, min_eig, asym, t.elapsed().as_secs_f64()
        );
    }

    // --- Bryant curvature deviation by region ---
    let hdata = sol.atlas.background(BackgroundKind::Singular);
    let poles: Vec<Complex64> = (0..6)
        .map(|k| Complex64::from_polar(1.0, k as f64 * std::f64::consts::PI / 3.0))
        .collect();
    let mut collar_dev = 0.0f64;
    // Buckets by distance to the nearest pole: <0.3, 0.3-0.5, 0.5-0.8, 0.8-1.2, >=1.2
    let mut cap_dev = [0.0f64; 5];
    for (pi, p) in sol.atlas.patches.iter().enumerate() {
        let log_g: Vec<f64> = (0..p.n_nodes())
            .map(|idx| {
                let lg = hdata.uh2[pi][idx] * hdata.lam[pi][idx] * (-2.0 * sol.u[pi][idx]).exp();
                if lg > 0.0 {
                    lg.ln()
                } else {
                    f64::NAN
                }
            })
            .collect();
        for j in 1..p.ny.saturating_sub(1).max(1) {
            for i in 1..p.nx - 1 {
                let idx = p.idx(i, j);
                if p.roles[idx] != NodeRole::Interior {
                    continue;
                }
                let Some(lap) = p.five_point(&log_g, i, j) else { continue };
                if !lap.is_finite() {
                    continue;
                }
                let kg = -lap / (2.0 * log_g[idx].exp());
                let dev = (kg + 4.0).abs();
                if matches!(p.kind, PatchKind::Collar { .. }) {
                    collar_dev = collar_dev.max(dev);
                } else {
                    let z = sol.atlas.global_z_of(pi, idx);
                    let d = poles
                        .iter()
                        .map(|q| (z - q).norm())
                        .fold(f64::INFINITY, f64::min);
                    let b = if d < 0.3 {
                        0
                    } else if d < 0.5 {
                        1
                    } else if d < 0.8 {
                        2
                    } else if d < 1.2 {
                        3
                    } else {
                        4
                    };
                    cap_dev[b] = cap_dev[b].max(dev);
                }
            }
        }
    }
    println!("[bryant] collar max_dev = {:.3e}", collar_dev);
    println!(
        "[bryant] cap devs by pole distance: <0.3: {:.3e}  0.3-0.5: {:.3e}  0.5-0.8: {:.3e}  0.8-1.2: {:.3e}  >=1.2: {:.3e}",
        cap_dev[0], cap_dev[1], cap_dev[2], cap_dev[3], cap_dev[4]
    );
}
