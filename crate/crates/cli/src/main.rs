use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tumor_core::config::RunConfig;
use tumor_core::dataset::{self, DatasetManifest, DatasetSpec, SampleParams};
use tumor_core::evaluation::{evaluate_set, EvalCase};
use tumor_core::growth::{simulate, GrowthParams};
use tumor_core::imaging::{synth_observation, ImagingParams, Observation};
use tumor_core::surrogate::{load_weights, predict, SurrogateParams};
use tumor_core::tmcmc::{self, split_theta, ForwardModel, NumericalForward, StageInfo, SurrogateForward};
use tumor_core::volumes::{gen_phantom, load_anatomy, load_volume, save_anatomy, save_volume, Anatomy};
use tumor_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tumor", version, about = "Brain tumor growth simulation, surrogate inference and Bayesian calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; missing sections take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TumorParams {
    #[arg(long = "d-w")]
    d_w: f64,
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    t: f64,
    /// Seed position as fractions of the volume extent
    #[arg(long)]
    x: f64,
    #[arg(long)]
    y: f64,
    #[arg(long)]
    z: f64,
}

impl TumorParams {
    fn growth(&self) -> GrowthParams {
        GrowthParams::new(self.d_w, self.rho, [self.x, self.y, self.z], self.t)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ForwardKind {
    Numerical,
    Surrogate,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic three-tissue anatomy
    GenAnatomy {
        /// nx,ny,nz
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        spacing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export (parameters, anatomy crop, tumor crop) training samples
    GenDataset {
        /// Anatomy directories, comma separated
        #[arg(long, value_delimiter = ',', required = true)]
        anatomies: Vec<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        crop_side: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Run the numerical solver once
    Simulate {
        #[arg(long)]
        anatomy: PathBuf,
        #[command(flatten)]
        params: TumorParams,
        /// Output volume path (without extension)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Predict a tumor with the surrogate, embedded in the full anatomy grid
    Predict {
        #[arg(long)]
        anatomy: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        params: TumorParams,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sample T1c/FLAIR/PET scans from a tumor density
    SynthObs {
        #[arg(long)]
        anatomy: PathBuf,
        /// Ground-truth tumor volume
        #[arg(long)]
        tumor: PathBuf,
        #[arg(long)]
        uc_t1c: f64,
        #[arg(long)]
        uc_flair: f64,
        #[arg(long)]
        sigma_alpha: f64,
        #[arg(long)]
        b: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Bayesian calibration of tumor and imaging parameters
    Calibrate {
        #[arg(long)]
        anatomy: Option<PathBuf>,
        #[arg(long)]
        observation: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ForwardKind::Numerical)]
        forward: ForwardKind,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Overrides sampler.seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides sampler.population_n
        #[arg(long)]
        population: Option<usize>,
        /// Replace the likelihood by a constant (samples the prior)
        #[arg(long)]
        constant_likelihood: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare predictions with simulations
    Evaluate {
        /// Dataset directory from gen-dataset; requires --weights
        #[arg(long, conflicts_with_all = ["pred", "sim"])]
        dataset: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Single predicted volume; requires --sim and --anatomy
        #[arg(long, requires_all = ["sim", "anatomy"])]
        pred: Option<PathBuf>,
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long)]
        anatomy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn required(v: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    v.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("{what} is required (flag or config paths)")))
}

fn surrogate_forward(anatomy: Anatomy, weights: Option<PathBuf>, cfg: &RunConfig) -> Result<SurrogateForward> {
    let path = required(weights, &cfg.paths.weights, "--weights for the surrogate forward model")?;
    let w = load_weights(&path)?;
    Ok(SurrogateForward::new(anatomy, w, cfg.solver.csf_domain_threshold))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenAnatomy { dims, spacing, seed, out } => {
            let dims: [usize; 3] = dims
                .try_into()
                .map_err(|d: Vec<usize>| Error::Config(format!("--dims needs three values, got {}", d.len())))?;
            let a = gen_phantom(dims, spacing, seed)?;
            save_anatomy(&a, &out)?;
            eprintln!("wrote anatomy {:?} to {}", a.dims(), out.display());
        }
        Command::GenDataset {
            anatomies,
            count,
            crop_side,
            out,
            seed,
            common,
        } => {
            let cfg = load_config(&common)?;
            let loaded = anatomies.iter().map(|p| load_anatomy(p)).collect::<Result<Vec<_>>>()?;
            let spec = DatasetSpec {
                anatomies: &loaded,
                anatomy_names: anatomies.iter().map(|p| p.display().to_string()).collect(),
                count,
                crop_side,
                seed,
                ranges: Default::default(),
                solver: cfg.solver,
            };
            let m = dataset::generate(&spec, &out)?;
            eprintln!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Command::Simulate {
            anatomy,
            params,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            let a = load_anatomy(&anatomy)?;
            let u = simulate(&a, &params.growth(), &cfg.solver)?;
            save_volume(&u, &out)?;
            eprintln!("max density {:.6}, total {:.6}", u.max(), u.sum());
        }
        Command::Predict {
            anatomy,
            weights,
            params,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            let fwd = surrogate_forward(load_anatomy(&anatomy)?, weights, &cfg)?;
            let u = fwd.evaluate(&params.growth())?;
            save_volume(&u, &out)?;
            eprintln!("max density {:.6}", u.max());
        }
        Command::SynthObs {
            anatomy,
            tumor,
            uc_t1c,
            uc_flair,
            sigma_alpha,
            b,
            sigma,
            seed,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            let theta = ImagingParams {
                uc_t1c,
                uc_flair,
                sigma_alpha,
                b,
                sigma,
            };
            let obs = synth_observation(
                &load_volume(&tumor)?,
                &theta,
                &load_anatomy(&anatomy)?,
                cfg.solver.csf_domain_threshold,
                seed,
            )?;
            obs.save(&out)?;
            eprintln!("wrote observation to {}", out.display());
        }
        Command::Calibrate {
            anatomy,
            observation,
            forward,
            weights,
            seed,
            population,
            constant_likelihood,
            out,
            common,
        } => calibrate(
            CalibrateArgs {
                anatomy,
                observation,
                forward,
                weights,
                seed,
                population,
                constant_likelihood,
                out,
            },
            &common,
        )?,
        Command::Evaluate {
            dataset,
            weights,
            pred,
            sim,
            anatomy,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            let config_echo = json!({ "run": cfg, "dataset": dataset, "weights": weights, "pred": pred, "sim": sim, "anatomy": anatomy });
            let report = match (dataset, pred) {
                (Some(dir), None) => {
                    let path = required(weights, &cfg.paths.weights, "--weights")?;
                    evaluate_dataset(&dir, &path)?
                }
                (None, Some(pred)) => {
                    let (p, s) = (load_volume(&pred)?, load_volume(&sim.expect("clap enforces --sim"))?);
                    let a = load_anatomy(&anatomy.expect("clap enforces --anatomy"))?;
                    evaluate_set(&[EvalCase {
                        id: "pair",
                        pred: &p,
                        sim: &s,
                        anatomy: &a,
                    }])?
                }
                _ => return Err(Error::Config("evaluate needs either --dataset or --pred/--sim/--anatomy".into())),
            };
            report.write(&out, config_echo)?;
            eprintln!(
                "n={} dice@0.2={:.4} dice@0.4={:.4} dice@0.8={:.4} mae_tumor={:.4}",
                report.samples.len(),
                report.dice[0].mean,
                report.dice[1].mean,
                report.dice[2].mean,
                report.mae_tumor.mean
            );
        }
    }
    Ok(())
}

fn evaluate_dataset(dir: &Path, weights: &Path) -> Result<tumor_core::evaluation::MetricReport> {
    let m = DatasetManifest::load(dir)?;
    let w = load_weights(weights)?;
    let mut fields = Vec::with_capacity(m.samples.len());
    for s in &m.samples {
        let sd = dir.join(&s.dir);
        let text = std::fs::read(sd.join("params.json")).map_err(|e| Error::Io {
            path: sd.join("params.json"),
            source: e,
        })?;
        let p: SampleParams = serde_json::from_slice(&text)?;
        let crop = Anatomy::new(load_volume(&sd.join("wm"))?, load_volume(&sd.join("gm"))?, load_volume(&sd.join("csf"))?)?;
        let sp = SurrogateParams {
            d_w: p.growth.d_w,
            rho: p.growth.rho,
            t: p.growth.t,
        };
        let pred = predict(&w, &crop, &sp)?;
        fields.push((s.id.clone(), pred, load_volume(&sd.join("tumor"))?, crop));
    }
    let cases: Vec<EvalCase> = fields
        .iter()
        .map(|(id, pred, sim, anatomy)| EvalCase { id, pred, sim, anatomy })
        .collect();
    evaluate_set(&cases)
}

struct CalibrateArgs {
    anatomy: Option<PathBuf>,
    observation: Option<PathBuf>,
    forward: ForwardKind,
    weights: Option<PathBuf>,
    seed: Option<u64>,
    population: Option<usize>,
    constant_likelihood: bool,
    out: Option<PathBuf>,
}

fn calibrate(args: CalibrateArgs, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = args.seed {
        cfg.sampler.seed = s;
    }
    if let Some(n) = args.population {
        cfg.sampler.population_n = n;
    }
    cfg.validate()?;
    let out = required(args.out, &cfg.paths.out, "--out")?;
    let anatomy_path = required(args.anatomy, &cfg.paths.anatomy, "--anatomy")?;
    let obs_path = required(args.observation, &cfg.paths.observation, "--observation")?;
    let weights = match args.forward {
        ForwardKind::Surrogate => Some(required(
            args.weights.clone(),
            &cfg.paths.weights,
            "--weights for the surrogate forward model",
        )?),
        ForwardKind::Numerical => None,
    };
    let anatomy = load_anatomy(&anatomy_path)?;
    let obs = Observation::load(&obs_path)?;
    if obs.dims() != anatomy.dims() {
        return Err(Error::DimMismatch(obs.dims(), anatomy.dims()));
    }
    let forward: Box<dyn ForwardModel> = match args.forward {
        ForwardKind::Numerical => Box::new(NumericalForward::new(anatomy, cfg.solver)),
        ForwardKind::Surrogate => Box::new(surrogate_forward(anatomy, weights.clone(), &cfg)?),
    };

    let mut progress = |s: &StageInfo| {
        let acc = s.acceptance_rate.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into());
        eprintln!("stage {} p={:.6} acceptance={} elapsed={:.2}s", s.stage, s.p, acc, s.elapsed_s);
    };
    let bounds = cfg.prior.bounds();
    let result = if args.constant_likelihood {
        tmcmc::run(&|_: &[f64]| 0.0, &bounds, &cfg.sampler, &mut progress)?
    } else {
        tmcmc::calibrate(forward.as_ref(), &obs, &cfg.prior, &cfg.sampler, &mut progress)?
    };

    let echo = json!({
        "run": cfg,
        "forward": match args.forward { ForwardKind::Numerical => "numerical", ForwardKind::Surrogate => "surrogate" },
        "anatomy": anatomy_path,
        "observation": obs_path,
        "weights": weights,
        "constant_likelihood": args.constant_likelihood,
    });
    let summary = tmcmc::write_results(&out, &result, cfg.sampler.seed, echo)?;
    let (growth, _) = split_theta(&result.map.theta);
    match forward.evaluate(&growth) {
        Ok(u) => save_volume(&u, &out.join("map_tumor"))?,
        Err(e) => eprintln!("MAP tumor not written: {e}"),
    }
    write_json(&out.join("map_theta.json"), &serde_json::Value::Object(summary.map_theta.clone()))?;
    eprintln!(
        "done: {} stages, {} evaluations, MAP log posterior {:.4}",
        result.stages.len() - 1,
        result.evaluations,
        result.map.log_posterior()
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
