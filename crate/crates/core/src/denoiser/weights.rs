//! Seeded parameter bundles and their container file.
//!
//! Container layout: `b"FCTC"`, u32 LE manifest length, the JSON manifest
//! (ordered keys and dims, init seed, U-Net config, SHA-256 of the payload),
//! then one FCT1 record per manifest entry in manifest order.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::UNetConfig;
use crate::error::{Error, Result};
use crate::numerics::{decode_fct, encode_fct, gaussian_sample, PrngStream, Tensor};

pub const CONTAINER_MAGIC: &[u8; 4] = b"FCTC";
const CONTAINER_FORMAT: &str = "fct-container/1";
const WEIGHT_DOMAIN: u64 = 0x3e16;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Gaussian { fan_in: usize },
    Ones,
    Zeros,
}

/// Channel plan of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPlan {
    pub block: usize,
    pub layer_in_block: usize,
    pub global_layer: usize,
    pub res: usize,
    pub in_channels: usize,
    pub channels: usize,
}

pub fn layer_plans(config: &UNetConfig) -> Vec<LayerPlan> {
    config
        .addresses()
        .into_iter()
        .map(|a| {
            let res = config.block_resolutions[a.block];
            let c = config.channels_at(res);
            // first layer of a decoder block also sees the encoder skip
            let in_channels = if a.block >= 4 && a.layer_in_block == 0 { 2 * c } else { c };
            LayerPlan {
                block: a.block,
                layer_in_block: a.layer_in_block,
                global_layer: a.global_layer,
                res,
                in_channels,
                channels: c,
            }
        })
        .collect()
}

pub fn layer_prefix(block: usize, layer_in_block: usize) -> String {
    format!("b{block}.l{layer_in_block}")
}

fn param_specs(config: &UNetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs = Vec::new();
    let mut push = |key: String, dims: Vec<usize>, init: Init| specs.push((key, dims, init));
    let gauss = |fan_in| Init::Gaussian { fan_in };
    let td = config.time_dim();
    let (d, dt, lat, base) = (config.head_dim, config.text_dim, config.latent_channels, config.base_channels);

    push("time.fc1.w".into(), vec![td, td], gauss(td));
    push("time.fc1.b".into(), vec![td], Init::Zeros);
    push("time.fc2.w".into(), vec![td, td], gauss(td));
    push("time.fc2.b".into(), vec![td], Init::Zeros);
    push("conv_in.w".into(), vec![base, lat * 9], gauss(lat * 9));
    push("conv_in.b".into(), vec![base], Init::Zeros);

    let plans = layer_plans(config);
    for p in &plans {
        let pre = layer_prefix(p.block, p.layer_in_block);
        let (i, c) = (p.in_channels, p.channels);
        push(format!("{pre}.res.gn1.g"), vec![i], Init::Ones);
        push(format!("{pre}.res.gn1.b"), vec![i], Init::Zeros);
        push(format!("{pre}.res.conv1.w"), vec![c, i * 9], gauss(i * 9));
        push(format!("{pre}.res.conv1.b"), vec![c], Init::Zeros);
        push(format!("{pre}.res.temb.w"), vec![td, c], gauss(td));
        push(format!("{pre}.res.temb.b"), vec![c], Init::Zeros);
        push(format!("{pre}.res.gn2.g"), vec![c], Init::Ones);
        push(format!("{pre}.res.gn2.b"), vec![c], Init::Zeros);
        push(format!("{pre}.res.conv2.w"), vec![c, c * 9], gauss(c * 9));
        push(format!("{pre}.res.conv2.b"), vec![c], Init::Zeros);
        if i != c {
            push(format!("{pre}.res.skip.w"), vec![c, i], gauss(i));
        }
        push(format!("{pre}.sa.gn.g"), vec![c], Init::Ones);
        push(format!("{pre}.sa.gn.b"), vec![c], Init::Zeros);
        for role in ["q", "k", "v"] {
            push(format!("{pre}.sa.{role}.w"), vec![c, d], gauss(c));
        }
        push(format!("{pre}.sa.o.w"), vec![d, c], gauss(d));
        push(format!("{pre}.ca.ln.g"), vec![c], Init::Ones);
        push(format!("{pre}.ca.ln.b"), vec![c], Init::Zeros);
        push(format!("{pre}.ca.q.w"), vec![c, d], gauss(c));
        push(format!("{pre}.ca.k.w"), vec![dt, d], gauss(dt));
        push(format!("{pre}.ca.v.w"), vec![dt, d], gauss(dt));
        push(format!("{pre}.ca.o.w"), vec![d, c], gauss(d));
        push(format!("{pre}.ff.ln.g"), vec![c], Init::Ones);
        push(format!("{pre}.ff.ln.b"), vec![c], Init::Zeros);
        push(format!("{pre}.ff.fc1.w"), vec![c, 2 * c], gauss(c));
        push(format!("{pre}.ff.fc1.b"), vec![2 * c], Init::Zeros);
        push(format!("{pre}.ff.fc2.w"), vec![2 * c, c], gauss(2 * c));
        push(format!("{pre}.ff.fc2.b"), vec![c], Init::Zeros);
    }
    for b in 0..config.block_resolutions.len() - 1 {
        let (r0, r1) = (config.block_resolutions[b], config.block_resolutions[b + 1]);
        if r0 != r1 {
            let (c0, c1) = (config.channels_at(r0), config.channels_at(r1));
            push(format!("t{b}.w"), vec![c1, c0], gauss(c0));
        }
    }
    push("out.gn.g".into(), vec![base], Init::Ones);
    push("out.gn.b".into(), vec![base], Init::Zeros);
    push("out.conv.w".into(), vec![lat, base * 9], gauss(base * 9));
    push("out.conv.b".into(), vec![lat], Init::Zeros);
    specs
}

/// Every parameter of the network, keyed by `(block, layer, role)` strings.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub init_seed: u64,
    pub config: UNetConfig,
    params: IndexMap<String, Tensor>,
}

/// Seeded Gaussian scaled by `1/sqrt(fan_in)` for projections and
/// convolutions; ones for norm gains; zeros for biases and norm shifts.
pub fn init_weights(seed: u64, config: &UNetConfig) -> Result<WeightBundle> {
    config.validate()?;
    let params = param_specs(config)
        .into_iter()
        .enumerate()
        .map(|(idx, (key, dims, init))| {
            let t = match init {
                Init::Gaussian { fan_in } => {
                    let stream = PrngStream::keyed(seed, &[WEIGHT_DOMAIN, idx as u64]);
                    gaussian_sample(&dims, stream).0.scale(1.0 / (fan_in as f32).sqrt())
                }
                Init::Ones => Tensor::ones(&dims),
                Init::Zeros => Tensor::zeros(&dims),
            };
            (key, t)
        })
        .collect();
    Ok(WeightBundle {
        init_seed: seed,
        config: config.clone(),
        params,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    init_seed: u64,
    config: UNetConfig,
    entries: Vec<ManifestEntry>,
    payload_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    key: String,
    dims: Vec<usize>,
}

impl WeightBundle {
    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.params
            .get(key)
            .ok_or_else(|| Error::Consistency(format!("missing parameter {key}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for t in self.params.values() {
            payload.extend_from_slice(&encode_fct(t));
        }
        let manifest = Manifest {
            format: CONTAINER_FORMAT.into(),
            init_seed: self.init_seed,
            config: self.config.clone(),
            entries: self
                .params
                .iter()
                .map(|(k, t)| ManifestEntry {
                    key: k.clone(),
                    dims: t.dims().to_vec(),
                })
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = CONTAINER_MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.get(..4) != Some(CONTAINER_MAGIC.as_slice()) {
            return Err("bad magic, expected FCTC".into());
        }
        let len = bytes
            .get(4..8)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or("truncated header")?;
        let json = bytes.get(8..8 + len).ok_or("truncated manifest")?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| format!("manifest: {e}"))?;
        if manifest.format != CONTAINER_FORMAT {
            return Err(format!("unsupported container format {:?}", manifest.format));
        }
        let payload = &bytes[8 + len..];
        let digest = hex::encode(Sha256::digest(payload));
        if digest != manifest.payload_sha256 {
            return Err(format!(
                "payload checksum mismatch: manifest {}, content {digest}",
                manifest.payload_sha256
            ));
        }
        let mut params = IndexMap::new();
        let mut off = 0;
        for entry in manifest.entries {
            let (t, used) = decode_fct(&payload[off..]).map_err(|e| format!("{}: {e}", entry.key))?;
            if t.dims() != entry.dims.as_slice() {
                return Err(format!("{}: dims {:?} disagree with manifest {:?}", entry.key, t.dims(), entry.dims));
            }
            off += used;
            params.insert(entry.key, t);
        }
        if off != payload.len() {
            return Err(format!("{} trailing payload bytes", payload.len() - off));
        }
        let bundle = WeightBundle {
            init_seed: manifest.init_seed,
            config: manifest.config,
            params,
        };
        bundle.check_layout().map_err(|e| e.to_string())?;
        Ok(bundle)
    }

    /// Verifies that keys and dims are exactly those `init_weights` produces
    /// for this bundle's config.
    pub fn check_layout(&self) -> Result<()> {
        self.config.validate()?;
        let specs = param_specs(&self.config);
        if specs.len() != self.params.len() {
            return Err(Error::Consistency(format!(
                "bundle has {} tensors, config needs {}",
                self.params.len(),
                specs.len()
            )));
        }
        for ((key, dims, _), (k, t)) in specs.iter().zip(&self.params) {
            if key != k || dims.as_slice() != t.dims() {
                return Err(Error::Consistency(format!(
                    "parameter {k} {:?} where {key} {dims:?} was expected",
                    t.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.into(),
            msg,
        })
    }
}
