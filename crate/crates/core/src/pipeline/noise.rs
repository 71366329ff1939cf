use crate::numerics::PrngStream;
use crate::registry::Registry;

pub const DEFAULT_REF_NOISE_POLICY: &str = "fresh_per_step";

/// Stream domains keep the target, reference and sampler noise apart.
pub(crate) const TARGET_NOISE_DOMAIN: u64 = 1;
pub(crate) const REF_NOISE_DOMAIN: u64 = 2;
pub(crate) const SAMPLER_NOISE_DOMAIN: u64 = 3;

/// How the reference path draws the ε it adds to each reference latent.
pub trait RefNoisePolicy: Send + Sync {
    fn name(&self) -> &'static str;
    /// `concept_key` identifies the reference independently of its list position.
    fn stream(&self, seed: u64, concept_key: u64, step: usize) -> PrngStream;
}

/// New noise at every sampler step.
#[derive(Debug, Clone, Copy, Default)]
pub struct FreshPerStep;

impl RefNoisePolicy for FreshPerStep {
    fn name(&self) -> &'static str {
        "fresh_per_step"
    }
    fn stream(&self, seed: u64, concept_key: u64, step: usize) -> PrngStream {
        PrngStream::keyed(seed, &[REF_NOISE_DOMAIN, concept_key, step as u64])
    }
}

/// One noise draw per reference, reused at every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fixed;

impl RefNoisePolicy for Fixed {
    fn name(&self) -> &'static str {
        "fixed"
    }
    fn stream(&self, seed: u64, concept_key: u64, _step: usize) -> PrngStream {
        PrngStream::keyed(seed, &[REF_NOISE_DOMAIN, concept_key])
    }
}

pub fn ref_noise_policies() -> Registry<dyn RefNoisePolicy> {
    let mut reg: Registry<dyn RefNoisePolicy> = Registry::new("reference noise policy");
    reg.register("fresh_per_step", || Box::new(FreshPerStep));
    reg.register("fixed", || Box::new(Fixed));
    reg
}
