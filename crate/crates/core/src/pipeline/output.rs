//! Run directory layout:
//!
//! ```text
//! result.png                      decoded image
//! latent.fct                      final latent z_0
//! diagnostics/attn_l{L}_s{S}_q{R}_{C}.{png,fct}   multi-attention maps
//! diagnostics/corr_l{L}_s{S}.{png,fct}            correspondence maps
//! captures/l{L}_s{S}_{q,k,mask,bounds}.fct        attention inputs
//! run_manifest.json               resolved config plus output hashes
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::{LayerStep, RunConfig};
use super::run::RunOutput;
use crate::attention::{attention_map, mask_modes, WeightedMask};
use crate::denoiser::AttentionCapture;
use crate::error::{Error, Result};
use crate::io::{encode_gray_png, encode_rgb_png, min_max_normalize};
use crate::numerics::{encode_fct, read_fct, Tensor};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const RESULT_FILE: &str = "result.png";

fn capture_stem(at: LayerStep) -> String {
    format!("captures/l{}_s{}", at.layer, at.step)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], hashes: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    hashes.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
    Ok(())
}

/// Writes every artifact of `output` under `dir` and returns the manifest,
/// which is `config` resolved, pointed at `dir`, with output hashes.
pub fn write_run(dir: &Path, config: &RunConfig, output: &RunOutput) -> Result<RunConfig> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dir = std::path::absolute(dir).map_err(|e| Error::io(dir, e))?;
    let mut hashes = BTreeMap::new();
    write_file(&dir, RESULT_FILE, &encode_rgb_png(&output.image)?, &mut hashes)?;
    write_file(&dir, "latent.fct", &encode_fct(&output.latent.tensor), &mut hashes)?;

    let diag = &output.diagnostics;
    for (req, map) in &diag.attention_maps {
        let stem = format!(
            "diagnostics/attn_l{}_s{}_q{}_{}",
            req.layer, req.step, req.query[0], req.query[1]
        );
        write_file(&dir, &format!("{stem}.fct"), &encode_fct(map), &mut hashes)?;
        write_file(&dir, &format!("{stem}.png"), &encode_gray_png(&min_max_normalize(map))?, &mut hashes)?;
    }
    for (at, map) in &diag.correspondence {
        let stem = format!("diagnostics/corr_l{}_s{}", at.layer, at.step);
        write_file(&dir, &format!("{stem}.fct"), &encode_fct(&map.to_tensor()), &mut hashes)?;
        write_file(&dir, &format!("{stem}.png"), &encode_rgb_png(&map.to_rgb())?, &mut hashes)?;
    }
    for (at, c) in &diag.captures {
        let stem = capture_stem(*at);
        let bounds: Vec<f32> = c.mask.bounds().iter().map(|&b| b as f32).collect();
        let bounds = Tensor::new(vec![bounds.len()], bounds)?;
        write_file(&dir, &format!("{stem}_q.fct"), &encode_fct(&c.q), &mut hashes)?;
        write_file(&dir, &format!("{stem}_k.fct"), &encode_fct(&c.k), &mut hashes)?;
        write_file(&dir, &format!("{stem}_mask.fct"), &encode_fct(&c.mask.as_tensor()), &mut hashes)?;
        write_file(&dir, &format!("{stem}_bounds.fct"), &encode_fct(&bounds), &mut hashes)?;
    }

    let mut manifest = config.resolved();
    manifest.output_dir = Some(dir.clone());
    manifest.outputs = hashes;
    let json = serde_json::to_string_pretty(&manifest)?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(run_dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&run_dir.join(MANIFEST_FILE))
}

/// Attention inputs a run exported for `(layer, step)`.
pub fn load_capture(run_dir: &Path, layer: usize, step: usize) -> Result<AttentionCapture> {
    let stem = run_dir.join(capture_stem(LayerStep { layer, step }));
    let part = |suffix: &str| -> PathBuf { PathBuf::from(format!("{}_{suffix}.fct", stem.display())) };
    if !part("q").exists() {
        return Err(Error::Input(format!(
            "run {} has no attention capture at layer {layer}, step {step}",
            run_dir.display()
        )));
    }
    let q = read_fct(&part("q"))?;
    let k = read_fct(&part("k"))?;
    let values = read_fct(&part("mask"))?.into_data();
    let bounds = read_fct(&part("bounds"))?.data().iter().map(|&b| b as usize).collect();
    let mask = WeightedMask::from_parts(values, bounds)?;
    let res = (mask.segment(0).len() as f64).sqrt() as usize;
    Ok(AttentionCapture {
        layer,
        step,
        res,
        q,
        k,
        mask,
    })
}

/// Recomputes the multi-attention map of query `(row, col)` from a run's
/// exported capture. The softmax row is checked to sum to one before it is
/// returned.
pub fn inspect_attention(run_dir: &Path, layer: usize, step: usize, query: (usize, usize)) -> Result<Tensor> {
    let manifest = read_manifest(run_dir)?;
    let capture = load_capture(run_dir, layer, step)?;
    let res = capture.res;
    if query.0 >= res || query.1 >= res {
        return Err(Error::Input(format!(
            "query {query:?} outside the {res}×{res} grid of layer {layer}"
        )));
    }
    let strategy = mask_modes().create(&manifest.mask_mode)?;
    let map = attention_map(
        &capture.q,
        &capture.k,
        &capture.mask,
        strategy.as_ref(),
        query.0 * res + query.1,
        (res, res),
    )?;
    let sum: f64 = map.data().iter().map(|&v| v as f64).sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Consistency(format!("attention row sums to {sum}")));
    }
    Ok(map)
}
