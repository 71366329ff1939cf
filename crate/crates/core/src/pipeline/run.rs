use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;

use super::cache::KvCache;
use super::config::{DiagnosticsSpec, LayerStep, RunConfig};
use super::diagnostics::{correspondence_from_capture, RunDiagnostics};
use super::noise::{ref_noise_policies, RefNoisePolicy, SAMPLER_NOISE_DOMAIN, TARGET_NOISE_DOMAIN};
use crate::attention::{attention_map, build_weighted_mask, mask_modes, KvRecord, WeightedMask};
use crate::codec::{embed_prompt, Codec, LatentImage, PromptEmbedding};
use crate::concepts::ConceptRef;
use crate::denoiser::{init_weights, ComposeContext, Denoiser, WeightBundle};
use crate::diffusion::{forward_diffuse, sampling_plan, samplers, NoiseSchedule, Sampler, StepInput};
use crate::error::{Error, Result};
use crate::io::{read_mask_png, read_rgb_png};
use crate::numerics::{gaussian_sample, nn_resize, PrngStream, Tensor};

pub const THREADS_ENV: &str = "FREECUSTOM_THREADS";

/// Per-run choices that do not live in the network or the concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub steps: usize,
    pub sampler: String,
    pub mask_mode: String,
    pub ref_noise_policy: String,
    pub diagnostics: DiagnosticsSpec,
    /// Worker cap; `None` reads `FREECUSTOM_THREADS`, 0 means one per core.
    pub threads: Option<usize>,
}

impl RunOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            seed: config.seed,
            steps: config.steps,
            sampler: config.sampler.clone(),
            mask_mode: config.mask_mode.clone(),
            ref_noise_policy: config.ref_noise_policy.clone(),
            diagnostics: config.diagnostics.clone(),
            threads: None,
        }
    }
}

/// A ready-to-run composition: network, schedule, codec, concepts and prompt.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub codec: Codec,
    pub refs: Vec<ConceptRef>,
    pub target_prompt: PromptEmbedding,
    pub options: RunOptions,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub latent: LatentImage,
    pub image: Tensor,
    pub diagnostics: RunDiagnostics,
}

impl Pipeline {
    /// Validates `config`, loads its images and masks and builds the network.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let unet = config.unet_config();
        let weights = match &config.weights {
            Some(path) => WeightBundle::load(path)?,
            None => init_weights(config.weight_seed, &unet)?,
        };
        let denoiser = Denoiser::new(weights)?.with_psi(unet.psi.iter().copied())?;
        let codec = Codec::default();
        let refs = config
            .refs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let image = read_rgb_png(&r.image)?;
                let mask = read_mask_png(&r.mask)?;
                let prompt = embed_prompt(&r.prompt, config.vocab_seed)?;
                ConceptRef::new(config.ref_name(i), image, &mask, config.ref_weight(i), prompt, &codec)
            })
            .collect::<Result<Vec<_>>>()?;
        let target_prompt = embed_prompt(&config.target_prompt, config.vocab_seed)?;
        Ok(Self {
            denoiser,
            schedule: config.schedule.build()?,
            codec,
            refs,
            target_prompt,
            options: RunOptions::from_config(config),
        })
    }

    /// Weighted mask per feature resolution of the MRSA blocks.
    pub fn weighted_masks(&self) -> Result<BTreeMap<usize, WeightedMask>> {
        let cfg = self.denoiser.config();
        let weights: Vec<f32> = self.refs.iter().map(|r| r.weight).collect();
        cfg.psi
            .iter()
            .map(|&b| cfg.block_resolutions[b])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|res| {
                let levels = self
                    .refs
                    .iter()
                    .map(|r| nn_resize(&r.mask, res, res))
                    .collect::<Result<Vec<_>>>()?;
                Ok((res, build_weighted_mask(&levels, &weights, res * res)?))
            })
            .collect()
    }

    fn check_refs(&self) -> Result<()> {
        for (i, a) in self.refs.iter().enumerate() {
            if self.refs[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("reference name {:?} used twice", a.name)));
            }
        }
        let r = self.denoiser.config().latent_resolution();
        let want = [self.denoiser.config().latent_channels, r, r];
        for c in &self.refs {
            if c.latent.tensor.dims() != want {
                return Err(Error::Shape(format!(
                    "reference {:?} has latent {:?}, the network needs {want:?}",
                    c.name,
                    c.latent.tensor.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn run(&self) -> Result<RunOutput> {
        run_freecustom(self)
    }
}

/// Runs `f` on a pool capped by `threads`, or by `FREECUSTOM_THREADS` when unset.
pub fn with_thread_cap<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let n = match threads {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a worker count")))?,
            Err(_) => 0,
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    Ok(pool.install(f))
}

fn initial_latent(seed: u64, denoiser: &Denoiser, scale_factor: usize) -> Result<LatentImage> {
    let cfg = denoiser.config();
    let r = cfg.latent_resolution();
    let (z, _) = gaussian_sample(&[cfg.latent_channels, r, r], PrngStream::keyed(seed, &[TARGET_NOISE_DOMAIN]));
    LatentImage::new(z, scale_factor)
}

fn sampler_noise(seed: u64, step: usize) -> PrngStream {
    PrngStream::keyed(seed, &[SAMPLER_NOISE_DOMAIN, step as u64])
}

/// Reference path for one sampler step: noises every reference latent to `t`
/// and records its keys and values. References run concurrently; the result
/// is ordered by reference index regardless of scheduling.
pub fn harvest_reference_features(
    denoiser: &Denoiser,
    refs: &[ConceptRef],
    step: usize,
    t: usize,
    sched: &NoiseSchedule,
    policy: &dyn RefNoisePolicy,
    seed: u64,
) -> Result<Vec<KvRecord>> {
    let per_ref = refs
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let ref_index = i + 1;
            let (eps, _) = gaussian_sample(r.latent.tensor.dims(), policy.stream(seed, r.noise_key(), step));
            let zt = r.latent.with_tensor(forward_diffuse(&r.latent.tensor, t, &eps, sched)?)?;
            denoiser.forward_reference(&zt, t, step, ref_index, &r.prompt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_ref.into_iter().flatten().collect())
}

/// Plain text-to-image sampling with the unmodified network.
pub fn sample_vanilla(
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    prompt: &PromptEmbedding,
    seed: u64,
    steps: usize,
    sampler: &dyn Sampler,
    scale_factor: usize,
) -> Result<LatentImage> {
    let mut z = initial_latent(seed, denoiser, scale_factor)?;
    for (k, (t, t_prev)) in sampling_plan(sched.len(), steps)?.into_iter().enumerate() {
        let eps_hat = denoiser.forward(&z, t, prompt)?;
        let next = sampler.step(StepInput {
            z: &z.tensor,
            eps_hat: &eps_hat,
            t,
            t_prev,
            sched,
            noise: sampler_noise(seed, k + 1),
        })?;
        z = z.with_tensor(next)?;
    }
    Ok(z)
}

/// The dual-path procedure: at every sampler step the reference path
/// harvests keys and values from the noised references, then the
/// composition path denoises the target latent with multi-reference
/// self-attention in the `psi` blocks.
pub fn run_freecustom(p: &Pipeline) -> Result<RunOutput> {
    with_thread_cap(p.options.threads, || run_inner(p))?
}

fn run_inner(p: &Pipeline) -> Result<RunOutput> {
    p.check_refs()?;
    let opts = &p.options;
    let sampler = samplers().create(&opts.sampler)?;
    let strategy = mask_modes().create(&opts.mask_mode)?;
    let policy = ref_noise_policies().create(&opts.ref_noise_policy)?;
    let plan = sampling_plan(p.schedule.len(), opts.steps)?;
    let masks = p.weighted_masks()?;
    let per_step = p.refs.len() * p.denoiser.config().psi_layers().len();
    let wanted = opts.diagnostics.capture_addresses();

    let mut cache = KvCache::new(p.refs.len());
    let mut captures = BTreeMap::new();
    let mut timings = super::diagnostics::PhaseTimings::default();
    let mut z = initial_latent(opts.seed, &p.denoiser, p.codec.scale_factor)?;

    for (k, &(t, t_prev)) in plan.iter().enumerate() {
        let step = k + 1;
        let start = Instant::now();
        let records = harvest_reference_features(&p.denoiser, &p.refs, step, t, &p.schedule, policy.as_ref(), opts.seed)?;
        cache.extend(records)?;
        if cache.entries_at_step(step) != per_step {
            return Err(Error::Consistency(format!(
                "step {step}: {} cached records, composition needs {per_step}",
                cache.entries_at_step(step)
            )));
        }
        timings.harvest += start.elapsed();

        let start = Instant::now();
        let capture_layers: BTreeSet<usize> = wanted.iter().filter(|a| a.step == step).map(|a| a.layer).collect();
        let ctx = ComposeContext {
            cache: &cache,
            step,
            masks: &masks,
            strategy: strategy.as_ref(),
            capture_layers: &capture_layers,
        };
        let out = p.denoiser.forward_compose(&z, t, &p.target_prompt, &ctx)?;
        for c in out.captures {
            captures.insert(LayerStep { layer: c.layer, step }, c);
        }
        let next = sampler.step(StepInput {
            z: &z.tensor,
            eps_hat: &out.eps,
            t,
            t_prev,
            sched: &p.schedule,
            noise: sampler_noise(opts.seed, step),
        })?;
        z = z.with_tensor(next)?;
        timings.compose += start.elapsed();
    }

    let start = Instant::now();
    let image = p.codec.decode_latent(&z)?;
    timings.decode = start.elapsed();

    let mut attention_maps = Vec::new();
    for req in &opts.diagnostics.attention_maps {
        let c = captures
            .get(&req.at())
            .ok_or_else(|| Error::Consistency(format!("capture missing at {:?}", req.at())))?;
        let query = req.query[0] * c.res + req.query[1];
        let map = attention_map(&c.q, &c.k, &c.mask, strategy.as_ref(), query, (c.res, c.res))?;
        attention_maps.push((*req, map));
    }
    let mut correspondence = Vec::new();
    for addr in &opts.diagnostics.correspondence {
        let c = captures
            .get(addr)
            .ok_or_else(|| Error::Consistency(format!("capture missing at {addr:?}")))?;
        correspondence.push((*addr, correspondence_from_capture(c)?));
    }

    Ok(RunOutput {
        latent: z,
        image,
        diagnostics: RunDiagnostics {
            mask_mode: opts.mask_mode.clone(),
            captures,
            attention_maps,
            correspondence,
            cache_entries: cache.len(),
            cache_reads: cache.reads_per_layer(),
            timings,
        },
    })
}
