//! Fisher-Kolmogorov tumor growth on probabilistic tissue maps.
//!
//! Solves `du/dt = div(D grad u) + rho u (1 - u)` with explicit Euler in flux
//! form. The face diffusivity between two voxels is the harmonic mean of their
//! voxel diffusivities, so any face touching a non-tissue voxel (D = 0) carries
//! no flux. That is the zero-flux boundary at CSF and skull; no ghost cells are
//! needed and total mass is conserved to rounding when `rho = 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{fraction_to_voxel, Anatomy, ScalarField3D};

/// Biophysical parameters: diffusivity in WM, proliferation rate, seed
/// location as fractions of the volume extent, and tumor age.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthParams {
    /// mm²/day
    #[serde(rename = "D_w")]
    pub d_w: f64,
    /// 1/day
    pub rho: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// days
    #[serde(rename = "T")]
    pub t: f64,
}

impl GrowthParams {
    pub fn new(d_w: f64, rho: f64, seed: [f64; 3], t: f64) -> Self {
        Self {
            d_w,
            rho,
            x: seed[0],
            y: seed[1],
            z: seed[2],
            t,
        }
    }

    pub fn seed(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.d_w > 0.0 && self.d_w.is_finite()) {
            return bad(format!("D_w must be > 0, got {}", self.d_w));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be >= 0, got {}", self.rho));
        }
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return bad(format!("T must be >= 0, got {}", self.t));
        }
        if self.seed().iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad(format!("seed must lie in [0,1]^3, got {:?}", self.seed()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// D_w / D_g
    pub dw_dg_ratio: f64,
    /// Voxels with `p_w + p_g` at or below this are outside the simulation domain.
    pub csf_domain_threshold: f64,
    pub dt_safety: f64,
    pub seed_amplitude: f64,
    pub seed_sigma_voxels: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dw_dg_ratio: 10.0,
            csf_domain_threshold: 0.1,
            dt_safety: 0.9,
            seed_amplitude: 0.1,
            seed_sigma_voxels: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("solver: {m}")));
        if !(self.dw_dg_ratio > 0.0 && self.dw_dg_ratio.is_finite()) {
            return bad("dw_dg_ratio must be positive");
        }
        if !(self.csf_domain_threshold > 0.0 && self.csf_domain_threshold < 1.0) {
            return bad("csf_domain_threshold must lie in (0, 1)");
        }
        if !(self.dt_safety > 0.0 && self.dt_safety <= 1.0) {
            return bad("dt_safety must lie in (0, 1]");
        }
        if !(self.seed_amplitude > 0.0 && self.seed_amplitude <= 1.0) {
            return bad("seed_amplitude must lie in (0, 1]");
        }
        if !(self.seed_sigma_voxels > 0.0 && self.seed_sigma_voxels.is_finite()) {
            return bad("seed_sigma_voxels must be positive");
        }
        Ok(())
    }
}

/// Per-voxel diffusivity `p_w D_w + p_g D_w / ratio`, zero outside the domain.
pub fn diffusion_field(anatomy: &Anatomy, d_w: f64, ratio: f64, domain_threshold: f64) -> ScalarField3D {
    let d_g = d_w / ratio;
    let data = anatomy
        .wm
        .data()
        .iter()
        .zip(anatomy.gm.data())
        .map(|(&pw, &pg)| {
            if pw + pg <= domain_threshold {
                0.0
            } else {
                pw * d_w + pg * d_g
            }
        })
        .collect();
    ScalarField3D::new(anatomy.dims(), anatomy.spacing_mm(), data).expect("dims come from a valid anatomy")
}

/// Largest explicit step (days, scaled by `safety`) for which every update is
/// a convex combination of neighbor values plus a bounded logistic term:
/// `dt * (6 D_max / h² + rho) <= safety`.
pub fn stable_dt(d_field: &ScalarField3D, rho: f64, h: f64, safety: f64) -> Result<f64> {
    let d_max = d_field.max().max(0.0);
    let rate = 6.0 * d_max / (h * h) + rho.max(0.0);
    if rate <= 0.0 {
        return Err(Error::StaticModel);
    }
    Ok(safety / rate)
}

/// Truncated Gaussian point source at the voxel containing `seed`.
pub fn init_seed(anatomy: &Anatomy, seed: [f64; 3], cfg: &SolverConfig) -> Result<ScalarField3D> {
    let dims = anatomy.dims();
    let sv = fraction_to_voxel(seed, dims);
    let si = anatomy.wm.index(sv[0], sv[1], sv[2]);
    if anatomy.tissue(si) <= cfg.csf_domain_threshold {
        return Err(Error::SeedOutsideTissue(sv));
    }
    let sigma = cfg.seed_sigma_voxels;
    let cutoff = 3.0 * sigma;
    let reach = cutoff.floor() as i64;
    let mut u = ScalarField3D::zeros(dims, anatomy.spacing_mm())?;
    for dz in -reach..=reach {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let p = [sv[0] as i64 + dx, sv[1] as i64 + dy, sv[2] as i64 + dz];
                if !u.contains(p) {
                    continue;
                }
                let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                if d2 > cutoff * cutoff {
                    continue;
                }
                let i = u.index(p[0] as usize, p[1] as usize, p[2] as usize);
                if anatomy.tissue(i) > cfg.csf_domain_threshold {
                    u.data_mut()[i] = cfg.seed_amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    Ok(u)
}

#[inline]
fn harmonic(a: f64, b: f64) -> f64 {
    let s = a + b;
    if s > 0.0 {
        2.0 * a * b / s
    } else {
        0.0
    }
}

/// Face diffusivities of a fixed `D` field, precomputed once per simulation.
///
/// `faces[a][i]` couples voxel `i` with its `+a` neighbor; it is zero on the
/// last plane along `a`.
#[derive(Debug, Clone)]
pub struct Stencil {
    dims: [usize; 3],
    h: f64,
    d_max: f64,
    faces: [Vec<f64>; 3],
}

impl Stencil {
    pub fn new(d_field: &ScalarField3D) -> Self {
        let dims = d_field.dims();
        let [nx, ny, nz] = dims;
        let d = d_field.data();
        let strides = [1, nx, nx * ny];
        let faces = std::array::from_fn(|a| {
            let mut f = vec![0.0; d.len()];
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let c = [x, y, z];
                        if c[a] + 1 < dims[a] {
                            let i = x + nx * (y + ny * z);
                            f[i] = harmonic(d[i], d[i + strides[a]]);
                        }
                    }
                }
            }
            f
        });
        Self {
            dims,
            h: d_field.spacing_mm(),
            d_max: d_field.max().max(0.0),
            faces,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn stable_dt(&self, rho: f64, safety: f64) -> Result<f64> {
        let rate = 6.0 * self.d_max / (self.h * self.h) + rho.max(0.0);
        if rate <= 0.0 {
            return Err(Error::StaticModel);
        }
        Ok(safety / rate)
    }

    /// One explicit Euler step from `u` into `out` (double-buffered).
    pub fn step_into(&self, u: &[f64], out: &mut [f64], rho: f64, dt: f64) -> Result<()> {
        let n = self.dims.iter().product::<usize>();
        if u.len() != n || out.len() != n {
            return Err(Error::InvalidDims(format!("state length {} for grid {:?}", u.len(), self.dims)));
        }
        let limit = self.stable_dt(rho, 1.0).unwrap_or(f64::INFINITY);
        if !(dt >= 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::Unstable { dt, limit });
        }
        let [nx, ny, nz] = self.dims;
        let plane = nx * ny;
        let k = dt / (self.h * self.h);
        let growth = dt * rho;
        let [fx, fy, fz] = &self.faces;

        out.par_chunks_mut(plane).enumerate().for_each(|(z, out_plane)| {
            for y in 0..ny {
                let row = nx * (y + ny * z);
                let has_ym = y > 0;
                let has_yp = y + 1 < ny;
                let has_zm = z > 0;
                let has_zp = z + 1 < nz;
                for x in 0..nx {
                    let i = row + x;
                    let c = u[i];
                    let mut acc = 0.0;
                    if x > 0 {
                        acc += fx[i - 1] * (u[i - 1] - c);
                    }
                    if x + 1 < nx {
                        acc += fx[i] * (u[i + 1] - c);
                    }
                    if has_ym {
                        acc += fy[i - nx] * (u[i - nx] - c);
                    }
                    if has_yp {
                        acc += fy[i] * (u[i + nx] - c);
                    }
                    if has_zm {
                        acc += fz[i - plane] * (u[i - plane] - c);
                    }
                    if has_zp {
                        acc += fz[i] * (u[i + plane] - c);
                    }
                    out_plane[row - z * plane + x] = c + k * acc + growth * c * (1.0 - c);
                }
            }
        });
        Ok(())
    }

    pub fn step(&self, u: &ScalarField3D, rho: f64, dt: f64) -> Result<ScalarField3D> {
        if u.dims() != self.dims {
            return Err(Error::DimMismatch(u.dims(), self.dims));
        }
        let mut out = vec![0.0; u.len()];
        self.step_into(u.data(), &mut out, rho, dt)?;
        ScalarField3D::new(self.dims, u.spacing_mm(), out)
    }
}

/// Single explicit step; builds the face stencil on every call. Prefer
/// [`Stencil`] in loops.
pub fn step(u: &ScalarField3D, d_field: &ScalarField3D, rho: f64, dt: f64) -> Result<ScalarField3D> {
    u.same_shape(d_field)?;
    Stencil::new(d_field).step(u, rho, dt)
}

/// Integrates from the seeded initial condition to exactly `params.t` days.
pub fn simulate(anatomy: &Anatomy, params: &GrowthParams, cfg: &SolverConfig) -> Result<ScalarField3D> {
    params.validate()?;
    cfg.validate()?;
    let u = init_seed(anatomy, params.seed(), cfg)?;
    if params.t == 0.0 {
        return Ok(u);
    }
    let d = diffusion_field(anatomy, params.d_w, cfg.dw_dg_ratio, cfg.csf_domain_threshold);
    let stencil = Stencil::new(&d);
    let dt = stencil.stable_dt(params.rho, cfg.dt_safety)?;

    let full_steps = (params.t / dt).floor() as usize;
    let remainder = params.t - full_steps as f64 * dt;
    let spacing = u.spacing_mm();
    let mut cur = u.into_data();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..full_steps {
        stencil.step_into(&cur, &mut next, params.rho, dt)?;
        std::mem::swap(&mut cur, &mut next);
    }
    if remainder > params.t * 1e-12 {
        stencil.step_into(&cur, &mut next, params.rho, remainder)?;
        std::mem::swap(&mut cur, &mut next);
    }
    ScalarField3D::new(anatomy.dims(), spacing, cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::gen_phantom;
    use proptest::prelude::*;

    fn uniform_anatomy(dims: [usize; 3], h: f64, pw: f64, pg: f64) -> Anatomy {
        let f = |v| ScalarField3D::filled(dims, h, v).unwrap();
        Anatomy::new(f(pw), f(pg), f(1.0 - pw - pg)).unwrap()
    }

    #[test]
    fn diffusion_field_mixes_tissues() {
        let a = uniform_anatomy([2, 2, 2], 1.0, 1.0, 0.0);
        assert_eq!(diffusion_field(&a, 0.08, 10.0, 0.1).data()[0], 0.08);
        let a = uniform_anatomy([2, 2, 2], 1.0, 0.0, 1.0);
        assert!((diffusion_field(&a, 0.08, 10.0, 0.1).data()[0] - 0.008).abs() < 1e-15);
        let a = uniform_anatomy([2, 2, 2], 1.0, 0.5, 0.25);
        // 0.5 * 0.08 + 0.25 * 0.008
        assert!((diffusion_field(&a, 0.08, 10.0, 0.1).data()[0] - 0.042).abs() < 1e-15);
        let a = uniform_anatomy([2, 2, 2], 1.0, 0.05, 0.04);
        assert_eq!(diffusion_field(&a, 0.08, 10.0, 0.1).data()[0], 0.0);
    }

    #[test]
    fn stable_dt_formula() {
        let d = ScalarField3D::filled([4, 4, 4], 2.0, 0.08).unwrap();
        // 0.9 * 4 / (6 * 0.08) = 7.5
        assert!((stable_dt(&d, 0.0, 2.0, 0.9).unwrap() - 7.5).abs() < 1e-12);
        let small_rho = stable_dt(&d, 1e-6, 2.0, 0.9).unwrap();
        assert!((small_rho - 7.5).abs() / 7.5 < 1e-4);
        let d2 = d.map(|v| 2.0 * v);
        assert!((stable_dt(&d2, 0.0, 2.0, 1.0).unwrap() * 2.0 - stable_dt(&d, 0.0, 2.0, 1.0).unwrap()).abs() < 1e-12);
        let z = ScalarField3D::zeros([4, 4, 4], 2.0).unwrap();
        assert!((stable_dt(&z, 0.03, 2.0, 0.5).unwrap() - 0.5 / 0.03).abs() < 1e-12);
        assert!(matches!(stable_dt(&z, 0.0, 2.0, 0.5), Err(Error::StaticModel)));
    }

    #[test]
    fn seed_profile() {
        let a = uniform_anatomy([16, 16, 16], 1.0, 1.0, 0.0);
        let cfg = SolverConfig::default();
        // voxel containing (0.5,0.5,0.5) on a 16-grid is 8
        let u = init_seed(&a, [0.5, 0.5, 0.5], &cfg).unwrap();
        assert_eq!(u.get(8, 8, 8), 0.1);
        assert_eq!(u.max(), 0.1);
        assert!((u.get(9, 8, 8) - 0.1 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((u.get(9, 8, 8) - 0.06065).abs() < 1e-5);
        assert!(u.get(11, 8, 8) > 0.0);
        assert_eq!(u.get(12, 8, 8), 0.0);
        assert_eq!(u.get(10, 10, 10), 0.0); // sqrt(12) > 3
    }

    #[test]
    fn seed_in_csf_is_rejected() {
        let a = uniform_anatomy([16, 16, 16], 1.0, 0.0, 0.05);
        let err = init_seed(&a, [0.5, 0.5, 0.5], &SolverConfig::default()).unwrap_err();
        assert!(err.to_string().contains("seed outside tissue domain"));
    }

    #[test]
    fn step_equilibrium_and_reaction() {
        let d = ScalarField3D::filled([5, 4, 3], 1.0, 0.05).unwrap();
        let u = ScalarField3D::filled([5, 4, 3], 1.0, 0.3).unwrap();
        let u1 = step(&u, &d, 0.0, 1.0).unwrap();
        assert!(u1.data().iter().all(|&v| (v - 0.3).abs() < 1e-16));

        let d0 = ScalarField3D::zeros([1, 1, 1], 1.0).unwrap();
        let u = ScalarField3D::filled([1, 1, 1], 1.0, 0.1).unwrap();
        let u1 = step(&u, &d0, 0.03, 1.0).unwrap();
        assert!((u1.data()[0] - 0.1027).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_unstable_dt() {
        let d = ScalarField3D::filled([3, 3, 3], 1.0, 0.5).unwrap();
        let u = ScalarField3D::zeros([3, 3, 3], 1.0).unwrap();
        // limit = 1 / (6 * 0.5) = 1/3
        assert!(step(&u, &d, 0.0, 0.33).is_ok());
        assert!(matches!(step(&u, &d, 0.0, 0.34), Err(Error::Unstable { .. })));
    }

    #[test]
    fn simulate_zero_time_is_initial_condition() {
        let a = gen_phantom([20, 20, 20], 2.0, 3).unwrap();
        let cfg = SolverConfig::default();
        let best = (0..a.wm.len()).max_by(|&i, &j| a.wm.data()[i].total_cmp(&a.wm.data()[j])).unwrap();
        let seed = crate::volumes::voxel_to_fraction(a.wm.coords(best), a.dims());
        let p = GrowthParams::new(0.05, 0.02, seed, 0.0);
        assert_eq!(simulate(&a, &p, &cfg).unwrap(), init_seed(&a, p.seed(), &cfg).unwrap());
    }

    #[test]
    fn simulate_is_bitwise_deterministic() {
        let a = gen_phantom([20, 20, 20], 2.0, 3).unwrap();
        let cfg = SolverConfig::default();
        let p = GrowthParams::new(0.05, 0.02, [0.45, 0.5, 0.55], 333.3);
        let u1 = simulate(&a, &p, &cfg).unwrap();
        let u2 = simulate(&a, &p, &cfg).unwrap();
        assert!(u1.data().iter().zip(u2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn simulate_stays_in_domain() {
        let a = gen_phantom([24, 24, 24], 2.0, 1).unwrap();
        let cfg = SolverConfig::default();
        let u = simulate(&a, &GrowthParams::new(0.08, 0.03, [0.5, 0.5, 0.5], 600.0), &cfg).unwrap();
        let mask = a.domain_mask(cfg.csf_domain_threshold);
        for (i, &v) in u.data().iter().enumerate() {
            assert!((0.0..=1.0).contains(&v));
            if !mask[i] {
                assert_eq!(v, 0.0);
            }
        }
        assert!(u.max() > 0.5);
    }

    #[test]
    fn logistic_oracle_without_diffusion() {
        let a = uniform_anatomy([9, 9, 9], 2.0, 1.0, 0.0);
        let cfg = SolverConfig {
            dt_safety: 0.02,
            ..SolverConfig::default()
        };
        let (rho, t) = (0.03, 300.0);
        let u = simulate(&a, &GrowthParams::new(1e-12, rho, [0.5, 0.5, 0.5], t), &cfg).unwrap();
        let u0 = cfg.seed_amplitude;
        let e = (rho * t).exp();
        let exact = u0 * e / (1.0 - u0 + u0 * e);
        assert!((u.get(4, 4, 4) - exact).abs() <= 1e-4, "{} vs {exact}", u.get(4, 4, 4));
    }

    #[test]
    fn spherical_phantom_is_axis_swap_symmetric() {
        let n = 17;
        let c = 8.0;
        let f = |frac: fn(f64) -> f64| {
            ScalarField3D::from_fn([n; 3], 1.0, |x, y, z| {
                let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
                frac(r)
            })
            .unwrap()
        };
        let wm = f(|r| if r < 4.0 { 1.0 } else { 0.0 });
        let gm = f(|r| if (4.0..7.0).contains(&r) { 1.0 } else { 0.0 });
        let csf = f(|r| if r >= 7.0 { 1.0 } else { 0.0 });
        let a = Anatomy::new(wm, gm, csf).unwrap();
        let u = simulate(&a, &GrowthParams::new(0.2, 0.02, [0.5, 0.5, 0.5], 120.0), &SolverConfig::default()).unwrap();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let v = u.get(x, y, z);
                    for w in [u.get(y, x, z), u.get(z, y, x), u.get(x, z, y)] {
                        assert!((v - w).abs() <= 1e-10);
                    }
                }
            }
        }
    }

    fn field_strategy(dims: [usize; 3], lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(lo..hi, dims.iter().product::<usize>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn step_keeps_unit_interval(
            u in field_strategy([4, 3, 5], 0.0, 1.0),
            d in field_strategy([4, 3, 5], 0.0, 0.1),
            rho in 0.0f64..0.05,
            frac in 0.0f64..=1.0,
        ) {
            let u = ScalarField3D::new([4, 3, 5], 1.5, u).unwrap();
            let d = ScalarField3D::new([4, 3, 5], 1.5, d).unwrap();
            let dt = stable_dt(&d, rho, 1.5, 1.0).unwrap() * frac;
            let u1 = step(&u, &d, rho, dt).unwrap();
            for &v in u1.data() {
                prop_assert!((0.0..=1.0).contains(&v), "{}", v);
            }
        }

        #[test]
        fn pure_diffusion_conserves_mass(
            u in field_strategy([5, 4, 3], 0.0, 1.0),
            d in field_strategy([5, 4, 3], 0.0, 0.1),
        ) {
            let u = ScalarField3D::new([5, 4, 3], 1.0, u).unwrap();
            let d = ScalarField3D::new([5, 4, 3], 1.0, d).unwrap();
            let dt = stable_dt(&d, 0.0, 1.0, 1.0).unwrap();
            let u1 = step(&u, &d, 0.0, dt).unwrap();
            prop_assert!((u1.sum() - u.sum()).abs() <= 1e-10 * u.sum());
        }
    }
}
