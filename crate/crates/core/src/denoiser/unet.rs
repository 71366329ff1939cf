use std::collections::{BTreeMap, BTreeSet};

use super::config::{LayerAddress, UNetConfig};
use super::ops::{
    add_channel_vector, avg_pool2, chw, concat_channels, conv1x1, conv3x3, from_tokens, gelu,
    group_norm, layer_norm, linear, silu, to_tokens, upsample2,
};
use super::weights::{layer_plans, layer_prefix, LayerPlan, WeightBundle};
use crate::attention::{
    concat_reference_kv, mrsa, self_attention, AttentionInputs, KvRecord, MaskStrategy, WeightedMask,
};
use crate::codec::{LatentImage, PromptEmbedding};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Read access to harvested reference features.
pub trait KvSource: Sync {
    fn num_refs(&self) -> usize;
    /// Record of reference `ref_index` (1-based) at `addr` for sampler `step`.
    fn fetch(&self, ref_index: usize, addr: LayerAddress, step: usize) -> Result<&KvRecord>;
}

/// Everything the composition path needs beyond the latent and prompt.
pub struct ComposeContext<'a> {
    pub cache: &'a dyn KvSource,
    pub step: usize,
    /// Weighted masks keyed by feature resolution.
    pub masks: &'a BTreeMap<usize, WeightedMask>,
    pub strategy: &'a dyn MaskStrategy,
    /// Global layers whose attention inputs should be recorded.
    pub capture_layers: &'a BTreeSet<usize>,
}

/// Attention inputs recorded at one layer of the composition path.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub layer: usize,
    pub step: usize,
    pub res: usize,
    pub q: Tensor,
    /// `K'`: self keys followed by every reference's keys.
    pub k: Tensor,
    pub mask: WeightedMask,
}

#[derive(Debug, Clone)]
pub struct ComposeOutput {
    pub eps: Tensor,
    pub captures: Vec<AttentionCapture>,
}

trait SelfAttentionHook {
    fn attend(&mut self, plan: &LayerPlan, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor>;
}

struct Vanilla;

impl SelfAttentionHook for Vanilla {
    fn attend(&mut self, _: &LayerPlan, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        self_attention(&AttentionInputs { q, k, v })
    }
}

struct Harvest<'a> {
    psi: &'a BTreeSet<usize>,
    step: usize,
    ref_index: usize,
    records: Vec<KvRecord>,
}

impl SelfAttentionHook for Harvest<'_> {
    fn attend(&mut self, plan: &LayerPlan, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        if self.psi.contains(&plan.block) {
            self.records.push(KvRecord {
                layer: plan.global_layer,
                step: self.step,
                ref_index: self.ref_index,
                k: k.clone(),
                v: v.clone(),
            });
        }
        self_attention(&AttentionInputs { q, k, v })
    }
}

struct Compose<'a, 'c> {
    psi: &'a BTreeSet<usize>,
    ctx: &'a ComposeContext<'c>,
    captures: Vec<AttentionCapture>,
}

impl SelfAttentionHook for Compose<'_, '_> {
    fn attend(&mut self, plan: &LayerPlan, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let l = plan.res * plan.res;
        let capture = self.ctx.capture_layers.contains(&plan.global_layer);
        if !self.psi.contains(&plan.block) {
            if capture {
                self.captures.push(AttentionCapture {
                    layer: plan.global_layer,
                    step: self.ctx.step,
                    res: plan.res,
                    q: q.clone(),
                    k: k.clone(),
                    mask: WeightedMask::ones(l),
                });
            }
            return self_attention(&AttentionInputs { q, k, v });
        }
        let addr = LayerAddress {
            block: plan.block,
            layer_in_block: plan.layer_in_block,
            global_layer: plan.global_layer,
        };
        let n = self.ctx.cache.num_refs();
        let refs = (1..=n)
            .map(|i| self.ctx.cache.fetch(i, addr, self.ctx.step))
            .collect::<Result<Vec<_>>>()?;
        let (kp, vp, bounds) = concat_reference_kv(k, v, &refs)?;
        let ones;
        let mask = match self.ctx.masks.get(&plan.res) {
            Some(m) => m,
            None if n == 0 => {
                ones = WeightedMask::ones(l);
                &ones
            }
            None => {
                return Err(Error::Input(format!(
                    "no weighted mask for resolution {} (layer {})",
                    plan.res, plan.global_layer
                )))
            }
        };
        if mask.bounds() != bounds.as_slice() {
            return Err(Error::Shape(format!(
                "mask segments {:?} do not match K' segments {bounds:?} at layer {}",
                mask.bounds(),
                plan.global_layer
            )));
        }
        let out = mrsa(&AttentionInputs { q, k: &kp, v: &vp }, mask, self.ctx.strategy)?;
        if capture {
            self.captures.push(AttentionCapture {
                layer: plan.global_layer,
                step: self.ctx.step,
                res: plan.res,
                q: q.clone(),
                k: kp,
                mask: mask.clone(),
            });
        }
        Ok(out)
    }
}

/// Half sines, half cosines of `t` at log-spaced frequencies.
pub fn sinusoidal_embedding(t: f32, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for k in 0..half {
        let freq = (-(10_000f32.ln()) * k as f32 / half as f32).exp();
        out[k] = (t * freq).sin();
        out[half + k] = (t * freq).cos();
    }
    Tensor::from_parts(vec![dim], out)
}

/// Toy ε-predictor: seeded weights plus the fixed 7-block topology.
#[derive(Debug, Clone)]
pub struct Denoiser {
    weights: WeightBundle,
    plans: Vec<LayerPlan>,
}

impl Denoiser {
    pub fn new(weights: WeightBundle) -> Result<Self> {
        weights.check_layout()?;
        let plans = layer_plans(&weights.config);
        Ok(Self { weights, plans })
    }

    /// Same weights, different MRSA block set.
    pub fn with_psi(mut self, psi: impl IntoIterator<Item = usize>) -> Result<Self> {
        let config = self.weights.config.clone().with_psi(psi);
        config.validate()?;
        self.weights.config = config;
        Ok(self)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &WeightBundle {
        &self.weights
    }

    fn w(&self, key: &str) -> Result<&Tensor> {
        self.weights.get(key)
    }

    /// Sinusoidal embedding of `t` through the two-layer projection.
    pub fn time_embedding(&self, t: usize) -> Result<Tensor> {
        let td = self.config().time_dim();
        let x = sinusoidal_embedding(t as f32, td).reshape(vec![1, td])?;
        let h = silu(&linear(&x, self.w("time.fc1.w")?, Some(self.w("time.fc1.b")?))?);
        linear(&h, self.w("time.fc2.w")?, Some(self.w("time.fc2.b")?))?.reshape(vec![td])
    }

    /// Unmodified network.
    pub fn forward(&self, z: &LatentImage, t: usize, prompt: &PromptEmbedding) -> Result<Tensor> {
        self.run(z, t, prompt, &mut Vanilla)
    }

    /// Reference path: runs the unmodified network and returns the keys and
    /// values of every self-attention layer in a `psi` block. The noise
    /// prediction is computed and dropped.
    pub fn forward_reference(
        &self,
        z: &LatentImage,
        t: usize,
        step: usize,
        ref_index: usize,
        prompt: &PromptEmbedding,
    ) -> Result<Vec<KvRecord>> {
        let mut hook = Harvest {
            psi: &self.config().psi,
            step,
            ref_index,
            records: Vec::new(),
        };
        let _eps = self.run(z, t, prompt, &mut hook)?;
        Ok(hook.records)
    }

    /// Composition path: MRSA in `psi` blocks, vanilla attention elsewhere.
    pub fn forward_compose(
        &self,
        z: &LatentImage,
        t: usize,
        prompt: &PromptEmbedding,
        ctx: &ComposeContext<'_>,
    ) -> Result<ComposeOutput> {
        let mut hook = Compose {
            psi: &self.config().psi,
            ctx,
            captures: Vec::new(),
        };
        let eps = self.run(z, t, prompt, &mut hook)?;
        Ok(ComposeOutput {
            eps,
            captures: hook.captures,
        })
    }

    fn run(&self, z: &LatentImage, t: usize, prompt: &PromptEmbedding, hook: &mut dyn SelfAttentionHook) -> Result<Tensor> {
        let cfg = self.config();
        let r = cfg.latent_resolution();
        let want = [cfg.latent_channels, r, r];
        if z.tensor.dims() != want {
            return Err(Error::Shape(format!(
                "latent dims {:?} do not match network input {want:?}",
                z.tensor.dims()
            )));
        }
        if prompt.tokens.dims() != [prompt.tokens.dims()[0], cfg.text_dim] || prompt.token_count == 0 {
            return Err(Error::Shape(format!("prompt tokens {:?} unusable", prompt.tokens.dims())));
        }
        let temb = silu(&self.time_embedding(t)?.reshape(vec![1, cfg.time_dim()])?);
        let text = Tensor::new(
            vec![prompt.token_count, cfg.text_dim],
            prompt.tokens.data()[..prompt.token_count * cfg.text_dim].to_vec(),
        )?;

        let mut h = conv3x3(&z.tensor, self.w("conv_in.w")?, self.w("conv_in.b")?)?;
        let mut skips = Vec::new();
        let nblocks = cfg.block_resolutions.len();
        for block in 0..nblocks {
            if block >= 4 {
                let skip = skips.pop().ok_or_else(|| Error::Consistency("skip stack empty".into()))?;
                h = concat_channels(&h, &skip)?;
            }
            for plan in self.plans.iter().filter(|p| p.block == block) {
                h = self.layer(&h, plan, &temb, &text, hook)?;
            }
            if block < 3 {
                skips.push(h.clone());
            }
            if block + 1 < nblocks {
                let (r0, r1) = (cfg.block_resolutions[block], cfg.block_resolutions[block + 1]);
                let key = format!("t{block}.w");
                if r1 < r0 {
                    h = conv1x1(&avg_pool2(&h)?, self.w(&key)?)?;
                } else if r1 > r0 {
                    h = conv1x1(&upsample2(&h)?, self.w(&key)?)?;
                }
            }
        }
        let n = group_norm(&h, cfg.norm_groups, self.w("out.gn.g")?, self.w("out.gn.b")?)?;
        conv3x3(&silu(&n), self.w("out.conv.w")?, self.w("out.conv.b")?)
    }

    fn layer(
        &self,
        x: &Tensor,
        plan: &LayerPlan,
        temb: &Tensor,
        text: &Tensor,
        hook: &mut dyn SelfAttentionHook,
    ) -> Result<Tensor> {
        let cfg = self.config();
        let g = cfg.norm_groups;
        let pre = layer_prefix(plan.block, plan.layer_in_block);
        let p = |role: &str| self.w(&format!("{pre}.{role}"));
        let (_, hh, ww) = chw(x)?;

        // residual block with time injection
        let a = group_norm(x, g, p("res.gn1.g")?, p("res.gn1.b")?)?;
        let mut a = conv3x3(&silu(&a), p("res.conv1.w")?, p("res.conv1.b")?)?;
        let tproj = linear(temb, p("res.temb.w")?, Some(p("res.temb.b")?))?;
        add_channel_vector(&mut a, tproj.data())?;
        let a = group_norm(&a, g, p("res.gn2.g")?, p("res.gn2.b")?)?;
        let a = conv3x3(&silu(&a), p("res.conv2.w")?, p("res.conv2.b")?)?;
        let h = if plan.in_channels != plan.channels {
            a.add(&conv1x1(x, p("res.skip.w")?)?)?
        } else {
            a.add(x)?
        };

        // self-attention (or MRSA through the hook)
        let n = to_tokens(&group_norm(&h, g, p("sa.gn.g")?, p("sa.gn.b")?)?)?;
        let q = linear(&n, p("sa.q.w")?, None)?;
        let k = linear(&n, p("sa.k.w")?, None)?;
        let v = linear(&n, p("sa.v.w")?, None)?;
        let attn = hook.attend(plan, &q, &k, &v)?;
        let mut tok = to_tokens(&h)?;
        tok.add_assign(&linear(&attn, p("sa.o.w")?, None)?)?;

        // cross-attention over the prompt's non-pad tokens
        let n = layer_norm(&tok, p("ca.ln.g")?, p("ca.ln.b")?)?;
        let q = linear(&n, p("ca.q.w")?, None)?;
        let k = linear(text, p("ca.k.w")?, None)?;
        let v = linear(text, p("ca.v.w")?, None)?;
        let cross = self_attention(&AttentionInputs { q: &q, k: &k, v: &v })?;
        tok.add_assign(&linear(&cross, p("ca.o.w")?, None)?)?;

        // feed-forward
        let n = layer_norm(&tok, p("ff.ln.g")?, p("ff.ln.b")?)?;
        let f = gelu(&linear(&n, p("ff.fc1.w")?, Some(p("ff.fc1.b")?))?);
        tok.add_assign(&linear(&f, p("ff.fc2.w")?, Some(p("ff.fc2.b")?))?)?;

        from_tokens(&tok, hh, ww)
    }
}
