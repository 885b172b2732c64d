use crate::error::{Error, Result};
use crate::growth::{simulate, GrowthParams, SolverConfig};
use crate::surrogate::{predict, SurrogateParams, SurrogateWeights};
use crate::volumes::{embed, fraction_to_voxel, Anatomy, CropSpec, ScalarField3D};

/// Maps growth parameters to a tumor density on the observation grid.
pub trait ForwardModel: Sync {
    fn evaluate(&self, params: &GrowthParams) -> Result<ScalarField3D>;
}

/// Full reaction-diffusion solve on the patient anatomy.
#[derive(Debug, Clone)]
pub struct NumericalForward {
    pub anatomy: Anatomy,
    pub solver: SolverConfig,
}

impl NumericalForward {
    pub fn new(anatomy: Anatomy, solver: SolverConfig) -> Self {
        Self { anatomy, solver }
    }
}

impl ForwardModel for NumericalForward {
    fn evaluate(&self, params: &GrowthParams) -> Result<ScalarField3D> {
        simulate(&self.anatomy, params, &self.solver)
    }
}

/// Network prediction on a crop centered at the seed, embedded back into the
/// full grid with zeros outside the crop.
#[derive(Debug, Clone)]
pub struct SurrogateForward {
    pub anatomy: Anatomy,
    pub weights: SurrogateWeights,
    /// Minimum WM+GM fraction at the seed voxel, as in the solver.
    pub domain_threshold: f64,
}

impl SurrogateForward {
    pub fn new(anatomy: Anatomy, weights: SurrogateWeights, domain_threshold: f64) -> Self {
        Self {
            anatomy,
            weights,
            domain_threshold,
        }
    }
}

impl ForwardModel for SurrogateForward {
    fn evaluate(&self, params: &GrowthParams) -> Result<ScalarField3D> {
        params.validate()?;
        let dims = self.anatomy.dims();
        let sv = fraction_to_voxel(params.seed(), dims);
        let si = self.anatomy.wm.index(sv[0], sv[1], sv[2]);
        if self.anatomy.tissue(si) <= self.domain_threshold {
            return Err(Error::SeedOutsideTissue(sv));
        }
        let spec = CropSpec::at_voxel(sv, self.weights.config().side);
        let crop = self.anatomy.crop(&spec)?;
        let sp = SurrogateParams {
            d_w: params.d_w,
            rho: params.rho,
            t: params.t,
        };
        let u = predict(&self.weights, &crop, &sp)?;
        embed(&u, dims, spec.center, 0.0)
    }
}
