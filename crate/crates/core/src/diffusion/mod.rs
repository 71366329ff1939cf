//! Noise schedule, closed-form forward diffusion and the reverse samplers.
//!
//! Timesteps are 1-based in every formula (`t ∈ 1..=T`) and 0-based in
//! storage: table slot `t - 1` holds the values for timestep `t`. Timestep 0
//! is the clean endpoint with `alpha_bar(0) = 1`.

mod sampler;
mod schedule;

pub use sampler::{
    ddim_step, ddpm_mean, ddpm_step, ddpm_step_between, forward_diffuse, samplers, Ddim, Ddpm,
    Sampler, StepInput, DEFAULT_SAMPLER,
};
pub use schedule::{linear_schedule, sampling_plan, NoiseSchedule, ScheduleConfig};
