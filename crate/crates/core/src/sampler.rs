//! Forward diffusion and deterministic DDIM sampling.

use ndarray::Array2;

use crate::diffnet::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, TimeGrid};

/// `z_t = alpha_t x + sigma_t eps`.
pub fn forward_diffuse(schedule: &NoiseSchedule, x: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if x.len() != eps.len() {
        return Err(Error::Shape(format!("x has {} dims, eps {}", x.len(), eps.len())));
    }
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(x.iter().zip(eps).map(|(xi, ei)| alpha * xi + sigma * ei).collect())
}

/// Batched forward diffusion with one time per row.
pub fn forward_diffuse_batch(
    schedule: &NoiseSchedule,
    x: &Array2<f64>,
    t: &[f64],
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    if x.dim() != eps.dim() || x.nrows() != t.len() {
        return Err(Error::Shape("forward_diffuse_batch: mismatched inputs".into()));
    }
    let mut z = Array2::zeros(x.raw_dim());
    for (i, &ti) in t.iter().enumerate() {
        let (alpha, sigma) = schedule.alpha_sigma(ti)?;
        for j in 0..x.ncols() {
            z[[i, j]] = alpha * x[[i, j]] + sigma * eps[[i, j]];
        }
    }
    Ok(z)
}

/// Coefficients `(c_x, c_z)` with `z_s = c_x x_hat + c_z z_t` for one DDIM jump
/// `t -> s`. For `s = 0` they are exactly `(1, 0)`.
pub fn ddim_coefficients(schedule: &NoiseSchedule, t: f64, s: f64) -> Result<(f64, f64)> {
    if t <= 0.0 {
        return Err(Error::Domain(format!("DDIM step needs t > 0, got {t}")));
    }
    if s > t {
        return Err(Error::Argument(format!("DDIM target time {s} exceeds source {t}")));
    }
    let (alpha_t, sigma_t) = schedule.alpha_sigma(t)?;
    let (alpha_s, sigma_s) = schedule.alpha_sigma(s)?;
    let ratio = sigma_s / sigma_t;
    Ok((alpha_s - ratio * alpha_t, ratio))
}

/// One DDIM update from a given prediction. `s == t` returns `z_t` unchanged,
/// `s == 0` returns `x_hat` unchanged.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    z_t: &[f64],
    x_hat: &[f64],
    t: f64,
    s: f64,
) -> Result<Vec<f64>> {
    if z_t.len() != x_hat.len() {
        return Err(Error::Shape("ddim_update: z and x_hat differ in length".into()));
    }
    if s == t {
        ddim_coefficients(schedule, t, s)?;
        return Ok(z_t.to_vec());
    }
    let (alpha_t, sigma_t) = schedule.alpha_sigma(t)?;
    let (alpha_s, sigma_s) = schedule.alpha_sigma(s)?;
    ddim_coefficients(schedule, t, s)?;
    Ok(z_t
        .iter()
        .zip(x_hat)
        .map(|(&z, &x)| alpha_s * x + sigma_s * ((z - alpha_t * x) / sigma_t))
        .collect())
}

/// Row-wise [`ddim_update`] with per-row source and target times.
pub fn ddim_update_batch(
    schedule: &NoiseSchedule,
    z_t: &Array2<f64>,
    x_hat: &Array2<f64>,
    t: &[f64],
    s: &[f64],
) -> Result<Array2<f64>> {
    if z_t.dim() != x_hat.dim() || t.len() != z_t.nrows() || s.len() != t.len() {
        return Err(Error::Shape("ddim_update_batch: mismatched inputs".into()));
    }
    let mut out = Array2::zeros(z_t.raw_dim());
    for i in 0..z_t.nrows() {
        let row = ddim_update(
            schedule,
            z_t.row(i).as_slice().expect("contiguous"),
            x_hat.row(i).as_slice().expect("contiguous"),
            t[i],
            s[i],
        )?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(out)
}

/// `z_s` from `z_t` using the model's prediction at `t`.
pub fn ddim_step(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    z_t: &[f64],
    t: f64,
    s: f64,
) -> Result<Vec<f64>> {
    ddim_coefficients(schedule, t, s)?;
    if s == t {
        return Ok(z_t.to_vec());
    }
    let x_hat = model.denoise(z_t, t)?;
    ddim_update(schedule, z_t, &x_hat, t, s)
}

/// One captured sampler step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub z: Array2<f64>,
    pub x_hat: Array2<f64>,
}

/// Result of sampling a batch of noises along a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Per-step records (empty unless capture was requested).
    pub steps: Vec<StepRecord>,
    /// Terminal samples `z_0`, one row per noise.
    pub samples: Array2<f64>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.t).collect()
    }
}

/// Runs DDIM along `grid` from `noise` (row per sample) down to `s = 0`.
pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    noise: &Array2<f64>,
    capture: bool,
) -> Result<Trajectory> {
    if noise.ncols() != model.data_dim() {
        return Err(Error::Shape(format!(
            "noise has {} columns, model expects {}",
            noise.ncols(),
            model.data_dim()
        )));
    }
    if noise.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampler noise is not finite".into()));
    }
    let mut z = noise.clone();
    let mut steps = Vec::new();
    for (t, s) in grid.transitions() {
        let x_hat = model.denoise_at(&z, t)?;
        let (cx, cz) = ddim_coefficients(schedule, t, s)?;
        let next = if s == 0.0 {
            x_hat.clone()
        } else {
            &x_hat * cx + &z * cz
        };
        if capture {
            steps.push(StepRecord {
                t,
                z: std::mem::replace(&mut z, next),
                x_hat,
            });
        } else {
            z = next;
        }
    }
    Ok(Trajectory { steps, samples: z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::DenoiserSpec;
    use crate::schedule::make_grid;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sch() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn random_model(seed: u64) -> Denoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = DenoiserSpec {
            data_dim: 2,
            time_embed_dim: 4,
            hidden: vec![8, 8],
        };
        let mut m = Denoiser::new(spec, &mut rng).unwrap();
        let flat: Vec<f64> = m
            .params
            .flatten()
            .iter()
            .map(|v| v + rng.random_range(-0.5..0.5))
            .collect();
        m.params.assign_flat(&flat).unwrap();
        m
    }

    #[test]
    fn diffuse_endpoints_and_midpoint() {
        let x = [0.3, -1.0];
        let e = [1.2, 0.4];
        assert_eq!(forward_diffuse(&sch(), &x, 0.0, &e).unwrap(), x.to_vec());
        assert_eq!(forward_diffuse(&sch(), &x, 1.0, &e).unwrap(), e.to_vec());
        let z = forward_diffuse(&sch(), &[2.0, 0.0], 0.5, &[0.0, 2.0]).unwrap();
        assert!((z[0] - std::f64::consts::SQRT_2).abs() < 1e-8 && (z[1] - std::f64::consts::SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn diffuse_then_recover_eps() {
        let x = [0.3, -1.0];
        let e = [1.2, 0.4];
        let z = forward_diffuse(&sch(), &x, 0.37, &e).unwrap();
        let back = crate::diffnet::x_to_eps(&sch(), &z, &x, 0.37).unwrap();
        for (a, b) in back.iter().zip(e) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_step_scales_by_sigma_ratio() {
        let m = Denoiser::new(DenoiserSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = ddim_step(&m, &sch(), &[2.0, -2.0], 1.0, 0.5).unwrap();
        assert!((z[0] - std::f64::consts::SQRT_2).abs() < 1e-8);
        assert!((z[1] + std::f64::consts::SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn step_identity_and_endpoint() {
        let m = random_model(1);
        let z = [0.7, -0.2];
        assert_eq!(ddim_step(&m, &sch(), &z, 0.6, 0.6).unwrap(), z.to_vec());
        let x = m.denoise(&z, 1.0).unwrap();
        assert_eq!(ddim_step(&m, &sch(), &z, 1.0, 0.0).unwrap(), x);
    }

    #[test]
    fn step_errors() {
        let m = random_model(1);
        assert!(matches!(ddim_step(&m, &sch(), &[0.0, 0.0], 0.3, 0.5), Err(Error::Argument(_))));
        assert!(matches!(ddim_step(&m, &sch(), &[0.0, 0.0], 0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn single_step_sampler_outputs_prediction() {
        let m = random_model(4);
        let noise = array![[0.5, 1.5], [-0.3, 0.2]];
        let traj = sample(&m, &sch(), &make_grid(1).unwrap(), &noise, true).unwrap();
        assert_eq!(traj.samples, m.denoise_at(&noise, 1.0).unwrap());
        assert_eq!(traj.times(), vec![1.0]);
    }

    #[test]
    fn trajectory_matches_grid_and_is_deterministic() {
        let m = random_model(2);
        let grid = make_grid(8).unwrap();
        let noise = array![[0.5, 1.5], [-0.3, 0.2], [1.0, 1.0]];
        let a = sample(&m, &sch(), &grid, &noise, true).unwrap();
        let b = sample(&m, &sch(), &grid, &noise, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times(), grid.times().to_vec());
        assert_eq!(a.steps.len(), 8);
        assert_eq!(a.steps.last().unwrap().x_hat, a.samples);
        // capture must not change the outcome
        let c = sample(&m, &sch(), &grid, &noise, false).unwrap();
        assert_eq!(c.samples, a.samples);
        assert!(c.steps.is_empty());
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = random_model(3);
        let grid = make_grid(4).unwrap();
        let noise = array![[0.5, 1.5], [-0.3, 0.2]];
        let both = sample(&m, &sch(), &grid, &noise, false).unwrap();
        for i in 0..2 {
            let single = noise.slice(ndarray::s![i..i + 1, ..]).to_owned();
            let one = sample(&m, &sch(), &grid, &single, false).unwrap();
            assert_eq!(one.samples.row(0), both.samples.row(i));
        }
    }
}
