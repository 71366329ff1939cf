use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, PrngStream, Tensor};
use crate::registry::Registry;

pub const DEFAULT_SAMPLER: &str = "ddim";

fn check_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what} dims {:?} differ from {:?}",
            b.dims(),
            a.dims()
        )));
    }
    Ok(())
}

/// `z_t = sqrt(ab_t)·z0 + sqrt(1 - ab_t)·eps`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    check_dims(z0, eps, "noise")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_with(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// Reverse-process mean `(z - (1 - a_t)/sqrt(1 - ab_t)·eps) / sqrt(a_t)` for one element.
pub fn ddpm_mean(z: f64, eps: f64, alpha_t: f64, alpha_bar_t: f64) -> f64 {
    (z - (1.0 - alpha_t) / (1.0 - alpha_bar_t).sqrt() * eps) / alpha_t.sqrt()
}

/// One ancestral step `t → t-1`: `mu + sigma_t·noise`, noise ignored at `t = 1`.
pub fn ddpm_step(z: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    sched.check_t(t)?;
    check_dims(z, eps_hat, "eps_hat")?;
    check_dims(z, noise, "noise")?;
    let (a, ab) = (sched.alpha(t), sched.alpha_bar(t));
    let sigma = if t == 1 { 0.0 } else { sched.sigma(t) };
    let data = z
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&zv, &e), &n)| (ddpm_mean(zv as f64, e as f64, a, ab) + sigma * n as f64) as f32)
        .collect();
    Tensor::new(z.dims().to_vec(), data)
}

/// Ancestral step over a stride `t → t_prev` using the effective
/// `a = ab_t / ab_prev`. Reduces to [`ddpm_step`] when `t_prev = t - 1`.
pub fn ddpm_step_between(
    z: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Input(format!("t_prev {t_prev} must precede t {t}")));
    }
    if t_prev + 1 == t {
        return ddpm_step(z, eps_hat, t, sched, noise);
    }
    sched.check_t(t)?;
    check_dims(z, eps_hat, "eps_hat")?;
    check_dims(z, noise, "noise")?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let a = ab / ab_prev;
    let sigma = if t_prev == 0 {
        0.0
    } else {
        ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - a)).sqrt()
    };
    let data = z
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&zv, &e), &n)| (ddpm_mean(zv as f64, e as f64, a, ab) + sigma * n as f64) as f32)
        .collect();
    Tensor::new(z.dims().to_vec(), data)
}

/// Deterministic (eta = 0) step through the predicted clean sample.
pub fn ddim_step(z: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Input(format!("t_prev {t_prev} must precede t {t}")));
    }
    sched.check_t(t)?;
    check_dims(z, eps_hat, "eps_hat")?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    z.zip_with(eps_hat, |zv, e| {
        let x0 = (zv as f64 - sb * e as f64) / sa;
        (pa * x0 + pb * e as f64) as f32
    })
}

pub struct StepInput<'a> {
    pub z: &'a Tensor,
    pub eps_hat: &'a Tensor,
    pub t: usize,
    pub t_prev: usize,
    pub sched: &'a NoiseSchedule,
    /// Source of fresh noise for stochastic samplers.
    pub noise: PrngStream,
}

pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn step(&self, input: StepInput<'_>) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Ddim;

impl Sampler for Ddim {
    fn name(&self) -> &'static str {
        "ddim"
    }
    fn step(&self, input: StepInput<'_>) -> Result<Tensor> {
        ddim_step(input.z, input.eps_hat, input.t, input.t_prev, input.sched)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Ddpm;

impl Sampler for Ddpm {
    fn name(&self) -> &'static str {
        "ddpm"
    }
    fn step(&self, input: StepInput<'_>) -> Result<Tensor> {
        let (noise, _) = gaussian_sample(input.z.dims(), input.noise);
        ddpm_step_between(input.z, input.eps_hat, input.t, input.t_prev, input.sched, &noise)
    }
}

pub fn samplers() -> Registry<dyn Sampler> {
    let mut reg: Registry<dyn Sampler> = Registry::new("sampler");
    reg.register("ddim", || Box::new(Ddim));
    reg.register("ddpm", || Box::new(Ddpm));
    reg
}
