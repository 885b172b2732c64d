//! Traveling-wave checks of the growth solver against Fisher-KPP theory.

use tumor_core::growth::{diffusion_field, init_seed, SolverConfig, Stencil};
use tumor_core::volumes::{Anatomy, ScalarField3D};

/// Position (mm) of the u = 0.5 crossing along the x axis of the (y, z) line,
/// linearly interpolated between voxel centers.
fn front_position(u: &ScalarField3D, y: usize, z: usize) -> Option<f64> {
    let [nx, _, _] = u.dims();
    let h = u.spacing_mm();
    (0..nx - 1).rev().find_map(|x| {
        let (a, b) = (u.get(x, y, z), u.get(x + 1, y, z));
        (a >= 0.5 && b < 0.5).then(|| (x as f64 + (a - 0.5) / (a - b)) * h)
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mx = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mx)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    num / den
}

/// Measured front speed for a homogeneous all-WM slab seeded at the low-x end.
pub fn measured_front_speed(dims: [usize; 3], h: f64, d: f64, rho: f64, cfg: &SolverConfig) -> f64 {
    let wm = ScalarField3D::filled(dims, h, 1.0).unwrap();
    let zero = ScalarField3D::zeros(dims, h).unwrap();
    let anatomy = Anatomy::new(wm, zero.clone(), zero).unwrap();
    let u0 = init_seed(&anatomy, [0.0, 0.5, 0.5], cfg).unwrap();
    let stencil = Stencil::new(&diffusion_field(&anatomy, d, cfg.dw_dg_ratio, cfg.csf_domain_threshold));
    let dt = stencil.stable_dt(rho, cfg.dt_safety).unwrap();

    let (yc, zc) = (dims[1] / 2, dims[2] / 2);
    let length = dims[0] as f64 * h;
    let (lo, hi) = (0.25 * length, 0.75 * length);
    let mut cur = u0.into_data();
    let mut next = vec![0.0; cur.len()];
    let mut t = 0.0;
    let mut samples = Vec::new();
    loop {
        stencil.step_into(&cur, &mut next, rho, dt).unwrap();
        std::mem::swap(&mut cur, &mut next);
        t += dt;
        let u = ScalarField3D::new(dims, h, cur.clone()).unwrap();
        match front_position(&u, yc, zc) {
            Some(x) if x > hi => break,
            Some(x) if x >= lo => samples.push((t, x)),
            _ => {}
        }
        assert!(t < 1e5, "front never crossed the slab");
    }
    least_squares_slope(&samples)
}

#[test]
fn front_speed_matches_fisher_theory() {
    let (d, rho) = (0.05, 0.02);
    let speed = measured_front_speed([64, 16, 16], 1.0, d, rho, &SolverConfig::default());
    let theory = 2.0 * (d * rho as f64).sqrt();
    let rel = (speed - theory).abs() / theory;
    println!("front speed {speed:.5} mm/day, theory {theory:.5}, rel err {rel:.4}");
    assert!(rel <= 0.10);
}
