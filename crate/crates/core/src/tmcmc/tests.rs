use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::*;
use crate::growth::SolverConfig;
use crate::surrogate::{predict, NetConfig, ParamRanges, SurrogateParams, SurrogateWeights};
use crate::volumes::{gen_phantom, voxel_to_fraction, CropSpec, ScalarField3D};

fn samples_from(lls: &[f64]) -> Vec<Sample> {
    lls.iter()
        .enumerate()
        .map(|(i, &l)| Sample {
            theta: vec![i as f64],
            log_lik: l,
            log_prior: 0.0,
        })
        .collect()
}

#[test]
fn log_prior_cases() {
    let b = [[0.0, 2.0], [1.0, 5.0]];
    let want = -(2.0f64.ln() + 4.0f64.ln());
    assert!((log_prior(&[1.0, 3.0], &b) - want).abs() < 1e-15);
    assert_eq!(log_prior(&[1.0, 5.5], &b), f64::NEG_INFINITY);
    assert_eq!(log_prior(&[-1e-9, 3.0], &b), f64::NEG_INFINITY);
    assert_eq!(log_prior(&[0.3; 4], &[[0.0, 1.0]; 4]), 0.0);
}

#[test]
fn default_prior_is_valid() {
    let p = PriorSpec::default();
    p.validate().unwrap();
    assert_eq!(p.bounds().len(), PARAM_NAMES.len());
    let mut bad = p;
    bad.rho = [0.1, 0.1];
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn two_sample_step_matches_closed_form() {
    // weights (1, r): sample-std COV = √2 (1 - r) / (1 + r)
    let target = 1.0;
    let k = target / 2f64.sqrt();
    let r = (1.0 - k) / (1.0 + k);
    let want = -r.ln() / 10.0;
    let got = select_delta_p(&[0.0, -10.0], 0.0, target).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");

    let got = select_delta_p(&[0.0, -10.0], 0.5, target).unwrap();
    assert!((got - (0.5 + want)).abs() < 1e-6);
}

#[test]
fn mild_likelihood_jumps_to_one() {
    // COV at Δp = 1 is already below target
    assert_eq!(select_delta_p(&[0.0, -1.0], 0.0, 1.0).unwrap(), 1.0);
    assert_eq!(select_delta_p(&[-3.0; 5], 0.2, 1.0).unwrap(), 1.0);
    assert_eq!(select_delta_p(&[0.0, -1e6, 4.0], 0.0, 1e12).unwrap(), 1.0);
}

#[test]
fn select_rejects_degenerate_input() {
    assert!(select_delta_p(&[0.0], 0.0, 1.0).is_err());
    assert!(matches!(
        select_delta_p(&[f64::NEG_INFINITY; 4], 0.0, 1.0),
        Err(Error::DegenerateWeights)
    ));
}

#[test]
fn uniform_resampling_passes_chi_square() {
    let k = 10;
    let samples = samples_from(&vec![0.0; k]);
    let w = importance_weights(&vec![0.0; k], 1.0).unwrap();
    let mut rng = sample_rng(7, 1, 0);
    let mut counts = vec![0usize; k];
    let trials = 1000;
    for _ in 0..trials {
        for s in resample(&samples, &w, &mut rng).unwrap() {
            counts[s.theta[0] as usize] += 1;
        }
    }
    let expected = (trials * k) as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(chi2);
    assert!(p_value > 0.01, "chi2 = {chi2}, p = {p_value}");
}

#[test]
fn one_hot_weight_copies_winner() {
    let lls = [f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
    let w = importance_weights(&lls, 0.5).unwrap();
    assert_eq!(w, vec![0.0, 0.0, 1.0, 0.0]);
    let out = resample(&samples_from(&lls), &w, &mut sample_rng(1, 1, 4)).unwrap();
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(|s| s.theta[0] == 2.0));
}

#[test]
fn vanished_weights_are_an_error() {
    assert!(matches!(
        importance_weights(&[f64::NEG_INFINITY; 3], 1.0),
        Err(Error::DegenerateWeights)
    ));
}

proptest! {
    #[test]
    fn weights_are_shift_invariant(
        lls in prop::collection::vec(-50.0f64..50.0, 2..20),
        shift in -1e4f64..1e4,
        dp in 0.01f64..1.0,
    ) {
        let a = importance_weights(&lls, dp).unwrap();
        let shifted: Vec<f64> = lls.iter().map(|l| l + shift).collect();
        let b = importance_weights(&shifted, dp).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn selected_exponent_hits_target(
        lls in prop::collection::vec(-200.0f64..0.0, 3..40),
        p0 in 0.0f64..0.9,
    ) {
        let p = select_delta_p(&lls, p0, 1.0).unwrap();
        prop_assert!(p > p0 && p <= 1.0);
        let max = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cov = weight_cov(&lls, max, p - p0);
        if p < 1.0 {
            prop_assert!((cov - 1.0).abs() < 1e-4, "cov {}", cov);
        } else {
            prop_assert!(cov <= 1.0 + 1e-12);
        }
    }
}

fn flat(_: &[f64]) -> f64 {
    0.0
}

#[test]
fn flat_target_accepts_in_box_fraction() {
    let bounds = [[0.0, 1.0], [0.0, 1.0]];
    let x = [0.2, 0.7];
    let s = 0.3;
    let chol = DMatrix::from_diagonal_element(2, 2, s);
    let start = Sample {
        theta: x.to_vec(),
        log_lik: 0.0,
        log_prior: 0.0,
    };
    let n = 10_000;
    let accepted = (0..n)
        .filter(|&i| mh_move(&start, &chol, 1.0, &bounds, 1.0, &flat, &mut sample_rng(3, 1, i)).accepted)
        .count();
    let std = Normal::new(0.0, 1.0).unwrap();
    let p_in: f64 = x.iter().map(|&v| std.cdf((1.0 - v) / s) - std.cdf(-v / s)).product();
    let se = (p_in * (1.0 - p_in) / n as f64).sqrt();
    let rate = accepted as f64 / n as f64;
    assert!((rate - p_in).abs() < 3.0 * se, "rate {rate} vs {p_in} ± {se}");
}

#[test]
fn zero_step_leaves_sample() {
    let start = Sample {
        theta: vec![0.4, 0.6],
        log_lik: -1.0,
        log_prior: 0.0,
    };
    let chol = DMatrix::identity(2, 2);
    let out = mh_move(&start, &chol, 0.0, &[[0.0, 1.0]; 2], 1.0, &|t: &[f64]| -t[0], &mut sample_rng(0, 1, 0));
    assert_eq!(out.sample.theta, start.theta);
}

#[test]
fn out_of_box_proposal_is_rejected() {
    let start = Sample {
        theta: vec![0.5],
        log_lik: 0.0,
        log_prior: 0.0,
    };
    let chol = DMatrix::from_element(1, 1, 1e6);
    for i in 0..100 {
        let out = mh_move(&start, &chol, 1.0, &[[0.0, 1.0]], 1.0, &flat, &mut sample_rng(0, 1, i));
        if out.proposal.is_none() {
            assert!(!out.accepted);
            assert_eq!(out.sample, start);
        }
    }
}

#[test]
fn proposal_factor_recovers_covariance() {
    // two points at ±1 with equal weight: variance 1 on axis 0, 0 on axis 1
    let s = vec![
        Sample {
            theta: vec![-1.0, 2.0],
            log_lik: 0.0,
            log_prior: 0.0,
        },
        Sample {
            theta: vec![1.0, 2.0],
            log_lik: 0.0,
            log_prior: 0.0,
        },
    ];
    let l = proposal_factor(&s, &[0.5, 0.5]);
    let c = &l * l.transpose();
    assert!((c[(0, 0)] - 1.0).abs() < 1e-9);
    assert!(c[(1, 1)] >= 0.0 && c[(1, 1)] < 1e-8);
    assert!(c[(0, 1)].abs() < 1e-9);
}

fn small_cfg(n: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        population_n: n,
        seed,
        ..SamplerConfig::default()
    }
}

#[test]
fn constant_likelihood_is_one_stage() {
    let bounds = [[0.0, 1.0], [-2.0, 4.0]];
    let r = run(&flat, &bounds, &small_cfg(2048, 0), &mut |_| {}).unwrap();
    assert_eq!(r.stages.len(), 2);
    assert_eq!(r.last().p, 1.0);
    for (d, [lo, hi]) in bounds.iter().enumerate() {
        let mean = |set: &SampleSet| set.samples.iter().map(|s| s.theta[d]).sum::<f64>() / set.samples.len() as f64;
        let se = (hi - lo) / 12f64.sqrt() / (r.last().samples.len() as f64).sqrt();
        let center = 0.5 * (lo + hi);
        let m0 = mean(&r.stages[0]);
        assert!((m0 - center).abs() < 3.0 * se, "dim {d}: prior mean {m0}");
        // multinomial resampling adds its own σ²/n to the variance of the mean
        let m1 = mean(r.last());
        assert!((m1 - center).abs() < 3.0 * 2f64.sqrt() * se, "dim {d}: mean {m1}");
    }
}

#[test]
fn stages_are_monotone_and_reproducible() {
    let ll = |t: &[f64]| -0.5 * ((t[0] - 0.3) / 0.02).powi(2);
    let bounds = [[0.0, 1.0]];
    let mut seen = Vec::new();
    let a = run(&ll, &bounds, &small_cfg(256, 11), &mut |s| seen.push(s.stage)).unwrap();
    let b = run(&ll, &bounds, &small_cfg(256, 11), &mut |_| {}).unwrap();
    assert!(a.stages.len() > 2);
    assert_eq!(seen, (0..a.stages.len()).collect::<Vec<_>>());
    for w in a.stages.windows(2) {
        assert!(w[1].p > w[0].p);
    }
    assert_eq!(a.last().p, 1.0);
    for (x, y) in a.stages.iter().zip(&b.stages) {
        assert_eq!(x.p, y.p);
        assert_eq!(x.samples, y.samples);
    }
    assert!(a.stages.iter().all(|s| s.samples.len() == 256));
    assert!(a.stages.iter().flat_map(|s| &s.samples).all(|s| (0.0..=1.0).contains(&s.theta[0])));
    assert_eq!(a.map, b.map);
    assert!((a.map.theta[0] - 0.3).abs() < 0.01);
}

#[test]
fn stage_cap_is_reported() {
    let ll = |t: &[f64]| -0.5 * ((t[0] - 0.3) / 1e-4).powi(2);
    let cfg = SamplerConfig {
        max_stages: 2,
        ..small_cfg(64, 0)
    };
    assert!(matches!(run(&ll, &[[0.0, 1.0]], &cfg, &mut |_| {}), Err(Error::NoConvergence(2))));
}

#[test]
fn failing_likelihood_is_excluded() {
    // left half of the box "fails"
    let ll = |t: &[f64]| if t[0] < 0.5 { f64::NEG_INFINITY } else { 0.0 };
    let r = run(&ll, &[[0.0, 1.0]], &small_cfg(128, 2), &mut |_| {}).unwrap();
    assert!(r.last().samples.iter().all(|s| s.theta[0] >= 0.5));
}

#[test]
fn split_theta_order() {
    let theta: Vec<f64> = (0..11).map(|i| i as f64).collect();
    let (g, im) = split_theta(&theta);
    assert_eq!((g.d_w, g.rho, g.t), (0.0, 1.0, 2.0));
    assert_eq!(g.seed(), [3.0, 4.0, 5.0]);
    assert_eq!((im.sigma, im.b, im.uc_t1c, im.uc_flair, im.sigma_alpha), (6.0, 7.0, 8.0, 9.0, 10.0));
}

#[test]
fn surrogate_forward_embeds_at_seed() {
    let anatomy = gen_phantom([32, 32, 32], 1.0, 4).unwrap();
    let cfg = NetConfig {
        side: 16,
        channels: 4,
        convs_per_block: 1,
        levels: 2,
        param_count: 3,
    };
    let w = SurrogateWeights::random(cfg, ParamRanges::default(), 9).unwrap();
    let fwd = SurrogateForward::new(anatomy.clone(), w.clone(), 0.1);
    let sv = [12usize, 20, 14];
    let params = GrowthParams::new(0.04, 0.01, voxel_to_fraction(sv, [32; 3]), 300.0);
    let full = fwd.evaluate(&params).unwrap();
    assert_eq!(full.dims(), [32; 3]);

    let crop = anatomy.crop(&CropSpec::at_voxel(sv, 16)).unwrap();
    let local = predict(
        &w,
        &crop,
        &SurrogateParams {
            d_w: 0.04,
            rho: 0.01,
            t: 300.0,
        },
    )
    .unwrap();
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                let l = [x as i64 - (sv[0] as i64 - 8), y as i64 - (sv[1] as i64 - 8), z as i64 - (sv[2] as i64 - 8)];
                let want = if l.iter().all(|&c| (0..16).contains(&c)) {
                    local.get(l[0] as usize, l[1] as usize, l[2] as usize)
                } else {
                    0.0
                };
                assert_eq!(full.get(x, y, z), want);
            }
        }
    }
}

#[test]
fn forward_failures_become_neg_infinity() {
    let anatomy = gen_phantom([16, 16, 16], 1.0, 1).unwrap();
    let fwd = NumericalForward::new(anatomy, SolverConfig::default());
    let z = ScalarField3D::zeros([16; 3], 1.0).unwrap();
    let obs = Observation::new(z.clone(), z.clone(), z.clone(), z.map(|_| 1.0)).unwrap();
    // corner voxel is background in the phantom
    let mut theta = vec![0.05, 0.01, 100.0, 0.0, 0.0, 0.0, 0.1, 0.8, 0.7, 0.3, 0.06];
    assert_eq!(theta_log_lik(&fwd, &obs, &theta), f64::NEG_INFINITY);
    theta[3..6].copy_from_slice(&[0.5, 0.5, 0.5]);
    assert!(theta_log_lik(&fwd, &obs, &theta).is_finite());
}


