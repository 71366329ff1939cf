use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::noise::{ref_noise_policies, DEFAULT_REF_NOISE_POLICY};
use crate::attention::{mask_modes, DEFAULT_MASK_MODE};
use crate::codec::DEFAULT_VOCAB_SEED;
use crate::concepts::{DEFAULT_REF_WEIGHT, MAX_WEIGHT, SELF_WEIGHT};
use crate::denoiser::{UNetConfig, DEFAULT_PSI, NUM_BLOCKS, NUM_LAYERS};
use crate::diffusion::{samplers, ScheduleConfig, DEFAULT_SAMPLER};
use crate::error::{Error, Result};

pub const MAX_REFS: usize = 4;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_WEIGHT_SEED: u64 = 1234;

/// One reference concept as written in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefSpec {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f32>,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Address of one layer at one sampler step (1-based; the last step is `steps`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStep {
    pub layer: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionMapRequest {
    pub layer: usize,
    pub step: usize,
    /// `[row, col]` of the query on the layer's feature grid.
    pub query: [usize; 2],
}

impl AttentionMapRequest {
    pub fn at(&self) -> LayerStep {
        LayerStep {
            layer: self.layer,
            step: self.step,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    #[serde(default)]
    pub attention_maps: Vec<AttentionMapRequest>,
    #[serde(default)]
    pub correspondence: Vec<LayerStep>,
    /// Extra addresses whose attention inputs are kept and exported.
    #[serde(default)]
    pub captures: Vec<LayerStep>,
}

impl DiagnosticsSpec {
    /// Every address whose attention inputs the run must record.
    pub fn capture_addresses(&self) -> std::collections::BTreeSet<LayerStep> {
        self.attention_maps
            .iter()
            .map(AttentionMapRequest::at)
            .chain(self.correspondence.iter().copied())
            .chain(self.captures.iter().copied())
            .collect()
    }
}

/// The JSON run description. A written `run_manifest.json` is itself a valid
/// run config: it carries every resolved field plus an `outputs` table that
/// is ignored on input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_sampler")]
    pub sampler: String,
    #[serde(default = "default_mask_mode")]
    pub mask_mode: String,
    #[serde(default = "default_ref_noise_policy")]
    pub ref_noise_policy: String,
    #[serde(default = "default_psi")]
    pub psi: Vec<usize>,
    pub target_prompt: String,
    #[serde(default)]
    pub refs: Vec<RefSpec>,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_weight_seed")]
    pub weight_seed: u64,
    /// Weight container to load instead of seeding fresh weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default = "default_self_weight")]
    pub self_weight: f32,
    #[serde(default = "default_ref_weight")]
    pub default_ref_weight: f32,
    #[serde(default = "default_vocab_seed")]
    pub vocab_seed: u64,
    /// Output file name → SHA-256, filled in by the manifest writer.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, String>,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}
fn default_sampler() -> String {
    DEFAULT_SAMPLER.into()
}
fn default_mask_mode() -> String {
    DEFAULT_MASK_MODE.into()
}
fn default_ref_noise_policy() -> String {
    DEFAULT_REF_NOISE_POLICY.into()
}
fn default_psi() -> Vec<usize> {
    DEFAULT_PSI.to_vec()
}
fn default_weight_seed() -> u64 {
    DEFAULT_WEIGHT_SEED
}
fn default_self_weight() -> f32 {
    SELF_WEIGHT
}
fn default_ref_weight() -> f32 {
    DEFAULT_REF_WEIGHT
}
fn default_vocab_seed() -> u64 {
    DEFAULT_VOCAB_SEED
}

impl RunConfig {
    /// Defaults for everything but the prompt.
    pub fn new(target_prompt: impl Into<String>) -> Self {
        Self {
            seed: 0,
            steps: DEFAULT_STEPS,
            sampler: default_sampler(),
            mask_mode: default_mask_mode(),
            ref_noise_policy: default_ref_noise_policy(),
            psi: default_psi(),
            target_prompt: target_prompt.into(),
            refs: Vec::new(),
            diagnostics: DiagnosticsSpec::default(),
            output_dir: None,
            schedule: ScheduleConfig::default(),
            weight_seed: DEFAULT_WEIGHT_SEED,
            weights: None,
            self_weight: SELF_WEIGHT,
            default_ref_weight: DEFAULT_REF_WEIGHT,
            vocab_seed: DEFAULT_VOCAB_SEED,
            outputs: BTreeMap::new(),
        }
    }

    /// Parses JSON; syntax and field errors name their byte offset.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let offset = byte_offset(text, e.line(), e.column());
            Error::Config(format!("run config, byte offset {offset}: {e}"))
        })
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        config.resolve_paths(dir)?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for r in &mut self.refs {
            fix(&mut r.image);
            fix(&mut r.mask);
        }
        if let Some(p) = &mut self.weights {
            fix(p);
        }
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
        Ok(())
    }

    pub fn ref_weight(&self, index: usize) -> f32 {
        self.refs[index].weight.unwrap_or(self.default_ref_weight)
    }

    pub fn ref_name(&self, index: usize) -> String {
        self.refs[index]
            .name
            .clone()
            .unwrap_or_else(|| format!("ref{}", index + 1))
    }

    /// Fills optional fields with the values the run will use.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        for i in 0..out.refs.len() {
            out.refs[i].weight = Some(self.ref_weight(i));
            out.refs[i].name = Some(self.ref_name(i));
        }
        out.psi.sort_unstable();
        out.psi.dedup();
        out.outputs.clear();
        out
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig::default().with_psi(self.psi.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("field `{field}`: {msg}")));
        if self.steps == 0 || self.steps > self.schedule.train_steps {
            return bad("steps", format!("{} not in 1..={}", self.steps, self.schedule.train_steps));
        }
        samplers().create(&self.sampler).map_err(|e| Error::Config(format!("field `sampler`: {e}")))?;
        mask_modes()
            .create(&self.mask_mode)
            .map_err(|e| Error::Config(format!("field `mask_mode`: {e}")))?;
        ref_noise_policies()
            .create(&self.ref_noise_policy)
            .map_err(|e| Error::Config(format!("field `ref_noise_policy`: {e}")))?;
        if let Some(b) = self.psi.iter().find(|&&b| b >= NUM_BLOCKS) {
            return bad("psi", format!("block {b} does not exist (0..{NUM_BLOCKS})"));
        }
        if self.target_prompt.trim().is_empty() {
            return bad("target_prompt", "empty".into());
        }
        if self.refs.len() > MAX_REFS {
            return bad("refs", format!("{} references, at most {MAX_REFS}", self.refs.len()));
        }
        if self.self_weight != SELF_WEIGHT {
            return bad("self_weight", format!("the self segment is fixed at {SELF_WEIGHT}"));
        }
        if !(0.0..=MAX_WEIGHT).contains(&self.default_ref_weight) {
            return bad("default_ref_weight", format!("outside [0, {MAX_WEIGHT}]"));
        }
        for (i, r) in self.refs.iter().enumerate() {
            let w = self.ref_weight(i);
            if !(0.0..=MAX_WEIGHT).contains(&w) {
                return bad(&format!("refs[{i}].weight"), format!("{w} outside [0, {MAX_WEIGHT}]"));
            }
            if (0..i).any(|j| self.ref_name(j) == self.ref_name(i)) {
                return bad(&format!("refs[{i}].name"), format!("{:?} used twice", self.ref_name(i)));
            }
            if r.prompt.trim().is_empty() {
                return bad(&format!("refs[{i}].prompt"), "empty".into());
            }
        }
        let unet = self.unet_config();
        let d = &self.diagnostics;
        let addrs = d.capture_addresses();
        for a in &addrs {
            if a.layer >= NUM_LAYERS {
                return bad("diagnostics", format!("layer {} not in 0..{NUM_LAYERS}", a.layer));
            }
            if a.step == 0 || a.step > self.steps {
                return bad("diagnostics", format!("step {} not in 1..={}", a.step, self.steps));
            }
        }
        for m in &d.attention_maps {
            let res = unet.resolution_of_layer(m.layer)?;
            if m.query[0] >= res || m.query[1] >= res {
                return bad(
                    "diagnostics.attention_maps",
                    format!("query {:?} outside the {res}×{res} grid of layer {}", m.query, m.layer),
                );
            }
        }
        if !d.correspondence.is_empty() && self.refs.is_empty() {
            return bad("diagnostics.correspondence", "needs at least one reference".into());
        }
        Ok(())
    }
}

/// serde_json reports 1-based line and column; converts them to a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let v = serde_json::to_value(RunConfig::new("a dog")).unwrap();
        assert_eq!(v["default_ref_weight"], 3.0);
        assert_eq!(v["self_weight"], 1.0);
        assert_eq!(v["psi"], serde_json::json!([5, 6]));
        assert_eq!(v["steps"], 50);
        assert_eq!(v["sampler"], "ddim");
        assert_eq!(v["mask_mode"], "multiplicative");
        assert_eq!(v["ref_noise_policy"], "fresh_per_step");
    }

    #[test]
    fn minimal_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"target_prompt": "a cat"}"#).unwrap();
        assert_eq!(c, RunConfig::new("a cat"));
        c.validate().unwrap();
    }

    #[test]
    fn parse_errors_name_byte_offset() {
        let text = "{\n  \"seed\": 1,\n  \"steps\": ,\n}";
        let err = RunConfig::from_json(text).unwrap_err().to_string();
        let at = text.find(" ,").unwrap() + 1;
        assert!(err.contains(&format!("byte offset {at}")), "{err}");
        let unknown = RunConfig::from_json(r#"{"target_prompt": "a", "sed": 1}"#).unwrap_err();
        assert!(unknown.to_string().contains("sed"));
    }

    #[test]
    fn validation_names_fields() {
        let mut c = RunConfig::new("a dog");
        c.psi = vec![7];
        assert!(c.validate().unwrap_err().to_string().contains("psi"));
        let mut c = RunConfig::new("a dog");
        c.mask_mode = "soft".into();
        assert!(c.validate().unwrap_err().to_string().contains("mask_mode"));
        let mut c = RunConfig::new("a dog");
        c.steps = 1001;
        assert!(c.validate().is_err());
        let mut c = RunConfig::new("a dog");
        c.refs = (0..5)
            .map(|_| RefSpec {
                image: "a.png".into(),
                mask: "m.png".into(),
                weight: None,
                prompt: "a hat".into(),
                name: None,
            })
            .collect();
        assert!(c.validate().unwrap_err().to_string().contains("refs"));
        c.refs.truncate(1);
        c.refs[0].weight = Some(9.0);
        assert!(c.validate().is_err());
        let mut c = RunConfig::new("a dog");
        c.diagnostics.attention_maps.push(AttentionMapRequest {
            layer: 10,
            step: 50,
            query: [8, 0],
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let mut c = RunConfig::new("a dog");
        c.refs.push(RefSpec {
            image: "refs/hat.png".into(),
            mask: "/abs/mask.png".into(),
            weight: None,
            prompt: "a hat".into(),
            name: None,
        });
        c.resolve_paths(Path::new("/data/run")).unwrap();
        assert_eq!(c.refs[0].image, PathBuf::from("/data/run/refs/hat.png"));
        assert_eq!(c.refs[0].mask, PathBuf::from("/abs/mask.png"));
        let r = c.resolved();
        assert_eq!(r.refs[0].weight, Some(3.0));
        assert_eq!(r.refs[0].name.as_deref(), Some("ref1"));
    }
}
