//! Differentiable core: parameter storage, a reverse-mode tape, probability
//! helpers, and the denoiser / classifier models.

pub mod dist;
pub mod graph;
pub mod models;
pub mod params;

pub use dist::{kl_divergence, softmax_t, DistVec};
pub use graph::{Gradients, Graph, Var};
pub use models::{Binding, Classifier, ClassifierSpec, Denoiser, DenoiserSpec};
pub use params::{ParamStore, ParamTensor};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Noise implied by an x-prediction: `eps = (z - alpha_t x) / sigma_t`.
pub fn x_to_eps(schedule: &NoiseSchedule, z: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    if sigma == 0.0 {
        return Err(Error::Domain("x_to_eps undefined at t = 0".into()));
    }
    same_len(z, x)?;
    Ok(z.iter().zip(x).map(|(zi, xi)| (zi - alpha * xi) / sigma).collect())
}

/// Clean point implied by an eps-prediction: `x = (z - sigma_t eps) / alpha_t`.
pub fn eps_to_x(schedule: &NoiseSchedule, z: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    if alpha == 0.0 {
        return Err(Error::Domain("eps_to_x undefined at t = 1".into()));
    }
    same_len(z, eps)?;
    Ok(z.iter().zip(eps).map(|(zi, ei)| (zi - sigma * ei) / alpha).collect())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())))
    }
}
