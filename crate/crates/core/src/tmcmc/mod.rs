//! Transitional MCMC: a population is carried from the prior (`p = 0`) to the
//! posterior (`p = 1`) through tempered targets `L(θ)^p · prior(θ)`. Each stage
//! picks the next exponent from the weight coefficient of variation,
//! resamples, and applies one Metropolis-Hastings move per sample.
//!
//! The sampler core ([`run`]) is dimension-agnostic; [`calibrate`] binds it to
//! the 11 tumor and imaging parameters.

mod forward;
mod output;

pub use forward::{ForwardModel, NumericalForward, SurrogateForward};
pub use output::{stage_csv, write_results, Summary, SUMMARY_FILE};

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::GrowthParams;
use crate::imaging::{total_loglik, ImagingParams, Observation};

/// Parameter order of θ throughout the sampler and its outputs.
pub const PARAM_NAMES: [&str; 11] = [
    "D_w",
    "rho",
    "T",
    "x",
    "y",
    "z",
    "sigma",
    "b",
    "uc_t1c",
    "uc_flair",
    "sigma_alpha",
];

/// Uniform box prior over θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(rename = "D_w")]
    pub d_w: [f64; 2],
    pub rho: [f64; 2],
    #[serde(rename = "T")]
    pub t: [f64; 2],
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub sigma: [f64; 2],
    pub b: [f64; 2],
    pub uc_t1c: [f64; 2],
    pub uc_flair: [f64; 2],
    pub sigma_alpha: [f64; 2],
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            d_w: [0.01, 0.08],
            rho: [0.0001, 0.03],
            t: [30.0, 1000.0],
            x: [0.0, 1.0],
            y: [0.0, 1.0],
            z: [0.0, 1.0],
            sigma: [0.01, 0.25],
            b: [0.6, 1.02],
            uc_t1c: [0.6, 0.8],
            uc_flair: [0.05, 0.6],
            sigma_alpha: [0.05, 0.08],
        }
    }
}

impl PriorSpec {
    pub fn bounds(&self) -> Vec<[f64; 2]> {
        vec![
            self.d_w,
            self.rho,
            self.t,
            self.x,
            self.y,
            self.z,
            self.sigma,
            self.b,
            self.uc_t1c,
            self.uc_flair,
            self.sigma_alpha,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        validate_bounds(&self.bounds())
    }
}

fn validate_bounds(bounds: &[[f64; 2]]) -> Result<()> {
    for (i, [lo, hi]) in bounds.iter().enumerate() {
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            let name = PARAM_NAMES.get(i).copied().unwrap_or("?");
            return Err(Error::Config(format!("prior bound {i} ({name}) = [{lo}, {hi}] is empty")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub population_n: usize,
    pub cov_target: f64,
    pub beta: f64,
    pub seed: u64,
    pub max_stages: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            population_n: 2048,
            cov_target: 1.0,
            beta: 0.2,
            seed: 0,
            max_stages: 1000,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_n < 8 {
            return Err(Error::Config(format!("population_n must be at least 8, got {}", self.population_n)));
        }
        if !(self.cov_target > 0.0) || !(self.beta >= 0.0) || self.max_stages == 0 {
            return Err(Error::Config("cov_target must be positive, beta non-negative, max_stages positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub theta: Vec<f64>,
    pub log_lik: f64,
    pub log_prior: f64,
}

impl Sample {
    pub fn log_posterior(&self) -> f64 {
        self.log_lik + self.log_prior
    }
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub stage: usize,
    pub p: f64,
    pub samples: Vec<Sample>,
    /// Fraction of accepted MH moves; `None` for the prior draw.
    pub acceptance_rate: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub stages: Vec<SampleSet>,
    pub map: Sample,
    pub evaluations: usize,
}

impl RunResult {
    pub fn last(&self) -> &SampleSet {
        self.stages.last().expect("a run has at least the prior stage")
    }
}

/// Uniform box log-density: `-Σ ln(hi - lo)` inside, `-∞` outside.
pub fn log_prior(theta: &[f64], bounds: &[[f64; 2]]) -> f64 {
    let mut lp = 0.0;
    for (v, [lo, hi]) in theta.iter().zip(bounds) {
        if !(*lo..=*hi).contains(v) {
            return f64::NEG_INFINITY;
        }
        lp -= (hi - lo).ln();
    }
    lp
}

/// Normalized importance weights `exp(Δp · ℓ_k)`, computed after subtracting
/// the maximum so the largest weight is exactly 1 before normalization.
pub fn importance_weights(log_liks: &[f64], dp: f64) -> Result<Vec<f64>> {
    let max = log_liks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let w: Vec<f64> = log_liks
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (dp * (l - max)).exp() })
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Coefficient of variation (sample standard deviation over mean) of
/// `exp(dp · (ℓ_k - max ℓ))`.
fn weight_cov(log_liks: &[f64], max: f64, dp: f64) -> f64 {
    let n = log_liks.len() as f64;
    let w: Vec<f64> = log_liks
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (dp * (l - max)).exp() })
        .collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

/// Next tempering exponent: the largest `p ∈ (p_current, 1]` whose weight COV
/// does not exceed `cov_target`, found by bisection on `Δp`.
pub fn select_delta_p(log_liks: &[f64], p_current: f64, cov_target: f64) -> Result<f64> {
    if log_liks.len() < 2 {
        return Err(Error::InvalidParam("need at least two samples to temper".into()));
    }
    let max = log_liks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let span = 1.0 - p_current;
    if weight_cov(log_liks, max, span) <= cov_target {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, span);
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if weight_cov(log_liks, max, mid) > cov_target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // never stall: a vanishing step would repeat this stage forever
    Ok((p_current + lo.max(1e-8)).min(1.0))
}

/// Multinomial resampling with the given normalized weights.
pub fn resample<R: Rng>(samples: &[Sample], weights: &[f64], rng: &mut R) -> Result<Vec<Sample>> {
    let dist = WeightedIndex::new(weights).map_err(|_| Error::DegenerateWeights)?;
    Ok((0..samples.len()).map(|_| samples[dist.sample(rng)].clone()).collect())
}

/// Cholesky factor of the weighted population covariance, regularized with a
/// growing diagonal until it factors.
pub fn proposal_factor(samples: &[Sample], weights: &[f64]) -> DMatrix<f64> {
    let d = samples[0].theta.len();
    let mut mean = DVector::zeros(d);
    for (s, &w) in samples.iter().zip(weights) {
        mean += DVector::from_column_slice(&s.theta) * w;
    }
    let mut cov = DMatrix::zeros(d, d);
    for (s, &w) in samples.iter().zip(weights) {
        let r = DVector::from_column_slice(&s.theta) - &mean;
        cov += &r * r.transpose() * w;
    }
    let mut eps = 1e-10;
    loop {
        let reg = &cov + DMatrix::identity(d, d) * eps;
        if let Some(ch) = reg.cholesky() {
            return ch.l();
        }
        eps *= 10.0;
    }
}

#[derive(Debug, Clone)]
pub struct MoveOutcome {
    pub sample: Sample,
    pub accepted: bool,
    /// The evaluated proposal, if it fell inside the prior box.
    pub proposal: Option<Sample>,
}

/// One Metropolis-Hastings step with proposal `θ + β L z`, `z ~ N(0, I)`,
/// targeting `p · ℓ(θ) + log prior(θ)`.
pub fn mh_move<R: Rng>(
    sample: &Sample,
    chol: &DMatrix<f64>,
    beta: f64,
    bounds: &[[f64; 2]],
    p: f64,
    log_lik: &(dyn Fn(&[f64]) -> f64 + Sync),
    rng: &mut R,
) -> MoveOutcome {
    let d = sample.theta.len();
    let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let step = chol * z * beta;
    let theta: Vec<f64> = sample.theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
    let lp = log_prior(&theta, bounds);
    let u: f64 = rng.random();
    if lp == f64::NEG_INFINITY {
        return MoveOutcome {
            sample: sample.clone(),
            accepted: false,
            proposal: None,
        };
    }
    let ll = log_lik(&theta);
    let proposal = Sample {
        theta,
        log_lik: ll,
        log_prior: lp,
    };
    let tempered = |s: &Sample| if p == 0.0 { s.log_prior } else { p * s.log_lik + s.log_prior };
    let delta = tempered(&proposal) - tempered(sample);
    let accepted = if delta.is_nan() {
        // both at -inf: stay put
        false
    } else {
        delta >= 0.0 || u.ln() < delta
    };
    MoveOutcome {
        sample: if accepted { proposal.clone() } else { sample.clone() },
        accepted,
        proposal: Some(proposal),
    }
}

/// Independent stream per `(seed, stage, index)` so results do not depend on
/// how work is scheduled across threads.
pub fn sample_rng(seed: u64, stage: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | index as u64);
    rng
}

/// Progress record passed to the per-stage callback.
#[derive(Debug, Clone, Copy)]
pub struct StageInfo {
    pub stage: usize,
    pub p: f64,
    pub acceptance_rate: Option<f64>,
    pub elapsed_s: f64,
}

fn better(a: &Sample, b: &Sample) -> bool {
    a.log_posterior() > b.log_posterior()
}

/// Runs TMCMC on a box prior with an arbitrary log-likelihood. Log-likelihood
/// failures should be reported as `-∞`.
pub fn run(
    log_lik: &(dyn Fn(&[f64]) -> f64 + Sync),
    bounds: &[[f64; 2]],
    cfg: &SamplerConfig,
    on_stage: &mut dyn FnMut(&StageInfo),
) -> Result<RunResult> {
    cfg.validate()?;
    validate_bounds(bounds)?;
    let n = cfg.population_n;
    let resample_stream = n; // indices 0..n belong to samples

    let t0 = Instant::now();
    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, 0, i);
            let theta: Vec<f64> = bounds.iter().map(|[lo, hi]| rng.random_range(*lo..*hi)).collect();
            let log_prior = log_prior(&theta, bounds);
            Sample {
                log_lik: log_lik(&theta),
                theta,
                log_prior,
            }
        })
        .collect();
    let mut evaluations = n;
    let mut map = samples.iter().fold(samples[0].clone(), |m, s| if better(s, &m) { s.clone() } else { m });
    let info = StageInfo {
        stage: 0,
        p: 0.0,
        acceptance_rate: None,
        elapsed_s: t0.elapsed().as_secs_f64(),
    };
    on_stage(&info);
    let mut stages = vec![SampleSet {
        stage: 0,
        p: 0.0,
        samples,
        acceptance_rate: None,
        elapsed_s: info.elapsed_s,
    }];

    while stages.last().unwrap().p < 1.0 {
        let stage = stages.len();
        if stage > cfg.max_stages {
            return Err(Error::NoConvergence(cfg.max_stages));
        }
        let t0 = Instant::now();
        let prev = stages.last().unwrap();
        let lls: Vec<f64> = prev.samples.iter().map(|s| s.log_lik).collect();
        let p = select_delta_p(&lls, prev.p, cfg.cov_target)?;
        let weights = importance_weights(&lls, p - prev.p)?;
        let chol = proposal_factor(&prev.samples, &weights);
        let parents = resample(&prev.samples, &weights, &mut sample_rng(cfg.seed, stage, resample_stream))?;

        let moves: Vec<MoveOutcome> = parents
            .par_iter()
            .enumerate()
            .map(|(i, s)| mh_move(s, &chol, cfg.beta, bounds, p, log_lik, &mut sample_rng(cfg.seed, stage, i)))
            .collect();
        let accepted = moves.iter().filter(|m| m.accepted).count();
        for m in &moves {
            if let Some(prop) = &m.proposal {
                evaluations += 1;
                if better(prop, &map) {
                    map = prop.clone();
                }
            }
        }
        let acceptance_rate = Some(accepted as f64 / n as f64);
        let elapsed_s = t0.elapsed().as_secs_f64();
        on_stage(&StageInfo {
            stage,
            p,
            acceptance_rate,
            elapsed_s,
        });
        stages.push(SampleSet {
            stage,
            p,
            samples: moves.into_iter().map(|m| m.sample).collect(),
            acceptance_rate,
            elapsed_s,
        });
    }
    Ok(RunResult { stages, map, evaluations })
}

/// Splits θ (in [`PARAM_NAMES`] order) into growth and imaging parameters.
pub fn split_theta(theta: &[f64]) -> (GrowthParams, ImagingParams) {
    (
        GrowthParams::new(theta[0], theta[1], [theta[3], theta[4], theta[5]], theta[2]),
        ImagingParams {
            sigma: theta[6],
            b: theta[7],
            uc_t1c: theta[8],
            uc_flair: theta[9],
            sigma_alpha: theta[10],
        },
    )
}

/// Log-likelihood of θ under the imaging model; any forward or likelihood
/// failure maps to `-∞`.
pub fn theta_log_lik(forward: &dyn ForwardModel, obs: &Observation, theta: &[f64]) -> f64 {
    let (growth, imaging) = split_theta(theta);
    forward
        .evaluate(&growth)
        .and_then(|u| total_loglik(obs, &u, &imaging))
        .ok()
        .filter(|v| !v.is_nan())
        .unwrap_or(f64::NEG_INFINITY)
}

/// Bayesian calibration of the 11 tumor and imaging parameters.
pub fn calibrate(
    forward: &dyn ForwardModel,
    obs: &Observation,
    prior: &PriorSpec,
    cfg: &SamplerConfig,
    on_stage: &mut dyn FnMut(&StageInfo),
) -> Result<RunResult> {
    prior.validate()?;
    let log_lik = |theta: &[f64]| theta_log_lik(forward, obs, theta);
    run(&log_lik, &prior.bounds(), cfg, on_stage)
}

#[cfg(test)]
mod tests;
