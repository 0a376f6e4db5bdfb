//! Discrete-time Gaussian diffusion: schedules, forward noising, the
//! ancestral posterior step and the DDIM step.

mod schedule;
mod step;

pub use schedule::{NoiseSchedule, ScheduleKind};
pub use step::{
    ddim_step, eps_to_x0, forward_sample, posterior_mean, posterior_step, reverse_step,
    step_needs_noise, timestep_pairs, x0_to_eps, SamplerKind,
};
