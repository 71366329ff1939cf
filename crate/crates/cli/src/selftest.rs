//! Built-in invariant checks for `freecustom selftest`.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use freecustom::attention::{build_weighted_mask, mask_modes, mrsa, self_attention, AttentionInputs, WeightedMask};
use freecustom::codec::{embed_prompt, token_slot, Codec, DEFAULT_VOCAB_SEED};
use freecustom::concepts::{
    copy_paste_context, synth_scene, threshold_segment, AccessorySpec, Color, ConceptRef, SceneSpec, ShapeKind,
    ShapeSpec, SYNTH_VOCABULARY,
};
use freecustom::denoiser::{init_weights, ComposeContext, Denoiser, UNetConfig, WeightBundle};
use freecustom::diffusion::{ddim_step, forward_diffuse, sampling_plan, ScheduleConfig};
use freecustom::numerics::{decode_fct, encode_fct, gaussian_sample, matmul, row_softmax, PrngStream, Tensor};
use freecustom::pipeline::{Pipeline, RunConfig, RunOptions, DEFAULT_WEIGHT_SEED};

type Check = Result<String, String>;
type NetworkCheck = fn(&Denoiser) -> Check;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand(dims: &[usize], seed: u64, stream: u64) -> Tensor {
    gaussian_sample(dims, PrngStream::new(seed, stream)).0
}

fn binary(side: usize, seed: u64, stream: u64) -> Tensor {
    let (u, _) = PrngStream::new(seed, stream).uniform(side * side);
    Tensor::from_rows(&[u.iter().map(|&x| (x < 0.5) as u8 as f32).collect()])
        .unwrap()
        .reshape(vec![side, side])
        .unwrap()
}

/// f64 reference for `softmax((m ⊙ QKᵀ)/√d) V`.
fn oracle(q: &Tensor, k: &Tensor, v: &Tensor, m: &[f32], neg_inf: bool) -> Vec<f64> {
    let (lq, d) = (q.dims()[0], q.dims()[1]);
    let (lk, dv) = (k.dims()[0], v.dims()[1]);
    let mut out = vec![0.0; lq * dv];
    for i in 0..lq {
        let logits: Vec<f64> = (0..lk)
            .map(|j| {
                if neg_inf && m[j] == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let raw: f64 = (0..d).map(|c| q.row(i)[c] as f64 * k.row(j)[c] as f64).sum();
                raw * m[j] as f64 / (d as f64).sqrt()
            })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
        for j in 0..lk {
            let p = (logits[j] - mx).exp() / z;
            for c in 0..dv {
                out[i * dv + c] += p * v.row(j)[c] as f64;
            }
        }
    }
    out
}

fn worst(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

/// One random attention problem: 8×8 self tokens and `n` references.
struct Problem {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    masks: Vec<Tensor>,
}

fn problem(seed: u64, n: usize) -> Problem {
    let l = 64;
    Problem {
        q: rand(&[l, 16], seed, 0),
        k: rand(&[l * (n + 1), 16], seed, 1),
        v: rand(&[l * (n + 1), 8], seed, 2),
        masks: (0..n as u64).map(|i| binary(8, seed, 10 + i)).collect(),
    }
}

fn softmax_rows() -> Check {
    let p = row_softmax(&rand(&[16, 40], 1, 0).scale(20.0)).map_err(|e| e.to_string())?;
    let err = (0..16).map(|i| (p.row(i).iter().sum::<f32>() - 1.0).abs()).fold(0.0, f32::max);
    ensure(err < 1e-5, format!("max |row sum - 1| {err:.1e}"))
}

fn matmul_naive() -> Check {
    let (a, b) = (rand(&[33, 47], 2, 0), rand(&[47, 29], 2, 1));
    let c = matmul(&a, &b).map_err(|e| e.to_string())?;
    let mut err = 0.0f64;
    for i in 0..33 {
        for j in 0..29 {
            let want: f64 = (0..47).map(|p| a.row(i)[p] as f64 * b.row(p)[j] as f64).sum();
            err = err.max((c.row(i)[j] as f64 - want).abs());
        }
    }
    ensure(err < 1e-4, format!("max |Δ| {err:.1e}"))
}

fn prng_and_fct() -> Check {
    let a = rand(&[3, 5, 7], 9, 4);
    let same = a == rand(&[3, 5, 7], 9, 4);
    let (back, _) = decode_fct(&encode_fct(&a))?;
    ensure(same && back == a, format!("stream repeat {same}, FCT1 round trip {}", back == a))
}

fn schedule_identities() -> Check {
    let s = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let mut prod = 1.0f64;
    let mut err = 0.0f64;
    for t in 1..=s.len() {
        prod *= 1.0 - s.beta(t);
        err = err.max((s.alpha(t) - (1.0 - s.beta(t))).abs()).max((s.alpha_bar(t) - prod).abs());
    }
    let plan = sampling_plan(s.len(), 50).map_err(|e| e.to_string())?;
    let plan_ok = plan[0].0 == 1000 && plan[49] == (20, 0);
    ensure(err < 1e-6 && plan_ok, format!("max identity error {err:.1e}, 50-step plan {plan_ok}"))
}

fn ddim_round_trip() -> Check {
    let s = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let mut err = 0.0f32;
    for (i, t) in [7usize, 333, 999].into_iter().enumerate() {
        let (z0, eps) = (rand(&[256], i as u64, 0), rand(&[256], i as u64, 1));
        let zt = forward_diffuse(&z0, t, &eps, &s).map_err(|e| e.to_string())?;
        let back = ddim_step(&zt, &eps, t, 0, &s).map_err(|e| e.to_string())?;
        err = err.max(back.max_abs_diff(&z0));
    }
    ensure(err < 1e-4, format!("max |z0 - recon| {err:.1e}"))
}

fn weighted_reduces_to_masked() -> Check {
    let mul = mask_modes().create("multiplicative").map_err(|e| e.to_string())?;
    let mut err = 0.0f64;
    for seed in 0..4 {
        let p = problem(seed, 2);
        let m = build_weighted_mask(&p.masks, &[1.0, 1.0], 64).map_err(|e| e.to_string())?;
        let got = mrsa(&AttentionInputs { q: &p.q, k: &p.k, v: &p.v }, &m, mul.as_ref()).map_err(|e| e.to_string())?;
        err = err.max(worst(got.data(), &oracle(&p.q, &p.k, &p.v, m.values(), false)));
    }
    ensure(err < 1e-6, format!("unit weights vs binary mask, max |Δ| {err:.1e}"))
}

fn no_refs_is_self_attention() -> Check {
    let p = problem(5, 0);
    let inputs = AttentionInputs { q: &p.q, k: &p.k, v: &p.v };
    let mut same = true;
    for mode in ["multiplicative", "neg_inf"] {
        let s = mask_modes().create(mode).map_err(|e| e.to_string())?;
        let a = mrsa(&inputs, &WeightedMask::ones(64), s.as_ref()).map_err(|e| e.to_string())?;
        same &= a == self_attention(&inputs).map_err(|e| e.to_string())?;
    }
    ensure(same, format!("bitwise equal in both mask modes: {same}"))
}

fn mrsa_oracle() -> Check {
    let mut err = 0.0f64;
    for seed in 0..4 {
        let p = problem(20 + seed, 3);
        let m = build_weighted_mask(&p.masks, &[3.0, 1.5, 0.5], 64).map_err(|e| e.to_string())?;
        for mode in ["multiplicative", "neg_inf"] {
            let s = mask_modes().create(mode).map_err(|e| e.to_string())?;
            let got = mrsa(&AttentionInputs { q: &p.q, k: &p.k, v: &p.v }, &m, s.as_ref()).map_err(|e| e.to_string())?;
            err = err.max(worst(got.data(), &oracle(&p.q, &p.k, &p.v, m.values(), mode == "neg_inf")));
        }
    }
    ensure(err < 1e-5, format!("max |Δ| vs f64 oracle {err:.1e}"))
}

fn attention_reorder() -> Check {
    let p = problem(40, 2);
    let mul = mask_modes().create("multiplicative").map_err(|e| e.to_string())?;
    let seg = |t: &Tensor, i: usize| {
        let w = t.dims()[1];
        Tensor::new(vec![64, w], t.data()[i * 64 * w..(i + 1) * 64 * w].to_vec()).unwrap()
    };
    let run = |order: [usize; 2]| {
        let ks = [seg(&p.k, 0), seg(&p.k, order[0] + 1), seg(&p.k, order[1] + 1)];
        let vs = [seg(&p.v, 0), seg(&p.v, order[0] + 1), seg(&p.v, order[1] + 1)];
        let k = Tensor::concat_rows(&ks.iter().collect::<Vec<_>>()).unwrap();
        let v = Tensor::concat_rows(&vs.iter().collect::<Vec<_>>()).unwrap();
        let masks = [p.masks[order[0]].clone(), p.masks[order[1]].clone()];
        let w = [[3.0, 1.0][order[0]], [3.0, 1.0][order[1]]];
        let m = build_weighted_mask(&masks, &w, 64).unwrap();
        mrsa(&AttentionInputs { q: &p.q, k: &k, v: &v }, &m, mul.as_ref()).unwrap()
    };
    let d = run([0, 1]).max_abs_diff(&run([1, 0]));
    ensure(d <= 1e-6, format!("max |Δ| after swapping references {d:.1e}"))
}

fn neg_inf_excludes() -> Check {
    let p = problem(50, 1);
    let m = build_weighted_mask(&p.masks, &[2.0], 64).map_err(|e| e.to_string())?;
    let s = mask_modes().create("neg_inf").map_err(|e| e.to_string())?;
    // poison every masked value row; it must not leak into the output
    let mut v = p.v.clone();
    let dv = v.dims()[1];
    for j in 64..128 {
        if m.values()[j] == 0.0 {
            v.data_mut()[j * dv..(j + 1) * dv].iter_mut().for_each(|x| *x = 1e6);
        }
    }
    let out = mrsa(&AttentionInputs { q: &p.q, k: &p.k, v: &v }, &m, s.as_ref()).map_err(|e| e.to_string())?;
    let max = out.data().iter().fold(0.0f32, |a, b| a.max(b.abs()));
    ensure(max < 100.0, format!("largest output magnitude {max:.2} with masked values set to 1e6"))
}

fn scene_spec() -> SceneSpec {
    SceneSpec {
        subject: ShapeSpec {
            kind: ShapeKind::Square,
            color: Color::Green,
            center: [30.0, 40.0],
            size: 24.0,
            name: "subject".into(),
        },
        accessories: vec![AccessorySpec {
            kind: ShapeKind::Triangle,
            color: Color::Red,
            anchor: "top".into(),
            size: 20.0,
            name: "hat".into(),
        }],
        jitter: 1,
    }
}

fn segment_recovers_synth() -> Check {
    let spec = scene_spec();
    let scene = synth_scene(&spec, PrngStream::new(3, 0)).map_err(|e| e.to_string())?;
    let segs = threshold_segment(&scene.image, &[Color::Green.range(), Color::Red.range()]).map_err(|e| e.to_string())?;
    let exact = scene.masks.iter().zip(&segs).all(|((_, m), s)| m == s);
    ensure(exact, format!("{} masks recovered exactly: {exact}", segs.len()))
}

fn copy_paste_contract() -> Check {
    let scene = synth_scene(&scene_spec(), PrngStream::new(3, 0)).map_err(|e| e.to_string())?;
    let base = Tensor::full(&[3, 64, 64], 0.25);
    let mask = scene.mask("hat").unwrap();
    let (img, shifted) =
        copy_paste_context(&base, &Tensor::zeros(&[64, 64]), &scene.image, mask, (3, 5)).map_err(|e| e.to_string())?;
    let plane = 64 * 64;
    let untouched = (0..plane)
        .filter(|&i| shifted.data()[i] == 0.0)
        .all(|i| (0..3).all(|k| img.data()[k * plane + i] == 0.25));
    let area = shifted.data().iter().sum::<f32>() == mask.data().iter().sum::<f32>();
    let off = copy_paste_context(&base, &Tensor::zeros(&[64, 64]), &scene.image, mask, (0, -64)).is_err();
    ensure(
        untouched && area && off,
        format!("outside pixels kept {untouched}, mask area kept {area}, off-canvas rejected {off}"),
    )
}

fn codec_round_trip() -> Check {
    let scene = synth_scene(&scene_spec(), PrngStream::new(0, 0)).map_err(|e| e.to_string())?;
    let codec = Codec::default();
    let back = codec
        .decode_latent(&codec.encode_image(&scene.image).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mae = back.data().iter().zip(scene.image.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / back.len() as f32;
    ensure(mae < 0.05, format!("mean abs error {mae:.4}"))
}

fn vocabulary_injective() -> Check {
    let slots: BTreeSet<u64> = SYNTH_VOCABULARY.iter().map(|w| token_slot(w, DEFAULT_VOCAB_SEED)).collect();
    ensure(
        slots.len() == SYNTH_VOCABULARY.len(),
        format!("{} words, {} distinct slots", SYNTH_VOCABULARY.len(), slots.len()),
    )
}

fn load_network(weights: Option<&Path>) -> Result<Denoiser, String> {
    let bundle = match weights {
        Some(path) => WeightBundle::load(path).map_err(|e| e.to_string())?,
        None => init_weights(DEFAULT_WEIGHT_SEED, &UNetConfig::default()).map_err(|e| e.to_string())?,
    };
    bundle.check_layout().map_err(|e| e.to_string())?;
    Denoiser::new(bundle).map_err(|e| e.to_string())
}

fn concept(name: &str, seed: u64) -> Result<ConceptRef, String> {
    let scene = synth_scene(&scene_spec(), PrngStream::new(seed, 0)).map_err(|e| e.to_string())?;
    let prompt = embed_prompt("a red hat", DEFAULT_VOCAB_SEED).map_err(|e| e.to_string())?;
    ConceptRef::new(name, scene.image.clone(), scene.mask("hat").unwrap(), 3.0, prompt, &Codec::default())
        .map_err(|e| e.to_string())
}

fn pipeline(net: &Denoiser, refs: Vec<ConceptRef>, steps: usize) -> Result<Pipeline, String> {
    let config = RunConfig::new("a photo of the dog wearing the hat");
    let mut options = RunOptions::from_config(&config);
    options.steps = steps;
    options.seed = 11;
    Ok(Pipeline {
        denoiser: net.clone(),
        schedule: config.schedule.build().map_err(|e| e.to_string())?,
        codec: Codec::default(),
        refs,
        target_prompt: embed_prompt(&config.target_prompt, config.vocab_seed).map_err(|e| e.to_string())?,
        options,
    })
}

fn network_forward(net: &Denoiser) -> Check {
    let prompt = embed_prompt("a photo of the dog", DEFAULT_VOCAB_SEED).map_err(|e| e.to_string())?;
    let z = freecustom::codec::LatentImage::new(rand(&[4, 16, 16], 1, 0), 4).map_err(|e| e.to_string())?;
    let a = net.forward(&z, 500, &prompt).map_err(|e| e.to_string())?;
    let b = net.forward(&z, 500, &prompt).map_err(|e| e.to_string())?;
    ensure(
        a.is_finite() && a == b && a.dims() == [4, 16, 16],
        format!("finite {}, repeatable {}, dims {:?}", a.is_finite(), a == b, a.dims()),
    )
}

fn compose_without_refs(net: &Denoiser) -> Check {
    let prompt = embed_prompt("a photo of the dog", DEFAULT_VOCAB_SEED).map_err(|e| e.to_string())?;
    let z = freecustom::codec::LatentImage::new(rand(&[4, 16, 16], 2, 0), 4).map_err(|e| e.to_string())?;
    let p = pipeline(net, vec![], 1)?;
    let masks = p.weighted_masks().map_err(|e| e.to_string())?;
    let cache = freecustom::pipeline::KvCache::new(0);
    let strategy = mask_modes().create("multiplicative").map_err(|e| e.to_string())?;
    let capture_layers = BTreeSet::new();
    let ctx = ComposeContext {
        cache: &cache,
        step: 1,
        masks: &masks,
        strategy: strategy.as_ref(),
        capture_layers: &capture_layers,
    };
    let composed = net.forward_compose(&z, 400, &prompt, &ctx).map_err(|e| e.to_string())?;
    let plain = net.forward(&z, 400, &prompt).map_err(|e| e.to_string())?;
    ensure(composed.eps == plain, format!("bitwise equal to the plain forward: {}", composed.eps == plain))
}

fn cache_reads(net: &Denoiser) -> Check {
    let out = pipeline(net, vec![concept("hat", 0)?], 2)?.run().map_err(|e| e.to_string())?;
    let reads = &out.diagnostics.cache_reads;
    let layers: Vec<usize> = (0..reads.len()).filter(|&l| reads[l] > 0).collect();
    let ok = layers == (10..16).collect::<Vec<_>>() && layers.iter().all(|&l| reads[l] == 2);
    ensure(ok, format!("layers read {layers:?}, entries {}", out.diagnostics.cache_entries))
}

fn run_determinism(net: &Denoiser) -> Check {
    let p = pipeline(net, vec![concept("hat", 0)?, concept("cap", 1)?], 2)?;
    let a = p.run().map_err(|e| e.to_string())?;
    let b = p.run().map_err(|e| e.to_string())?;
    ensure(
        a.latent.tensor == b.latent.tensor && a.image == b.image,
        format!("repeat run identical: {}", a.image == b.image),
    )
}

/// Runs every check, prints the table and returns whether all passed.
pub fn run(weights: Option<&Path>) -> bool {
    let mut rows: Vec<(&str, Check, f64)> = Vec::new();
    let mut timed = |name: &'static str, f: &dyn Fn() -> Check| {
        let start = Instant::now();
        let r = f();
        rows.push((name, r, start.elapsed().as_secs_f64()));
    };
    timed("softmax rows", &softmax_rows);
    timed("matmul vs naive", &matmul_naive);
    timed("prng and fct1", &prng_and_fct);
    timed("schedule identities", &schedule_identities);
    timed("ddim exact-noise round trip", &ddim_round_trip);
    timed("unit weights reduce to masks", &weighted_reduces_to_masked);
    timed("no references is self-attention", &no_refs_is_self_attention);
    timed("mrsa vs f64 oracle", &mrsa_oracle);
    timed("reference order invariance", &attention_reorder);
    timed("neg_inf excludes masked keys", &neg_inf_excludes);
    timed("segmentation recovers synth masks", &segment_recovers_synth);
    timed("copy-paste context", &copy_paste_contract);
    timed("codec round trip", &codec_round_trip);
    timed("vocabulary injective", &vocabulary_injective);

    let start = Instant::now();
    let net = load_network(weights);
    rows.push((
        "weights load",
        net.as_ref()
            .map(|n| format!("{} tensors, {} parameters", n.weights().num_tensors(), n.weights().num_parameters()))
            .map_err(Clone::clone),
        start.elapsed().as_secs_f64(),
    ));
    let network_checks: [(&str, NetworkCheck); 4] = [
        ("network forward", network_forward),
        ("compose without references", compose_without_refs),
        ("cache reads only in psi", cache_reads),
        ("run determinism", run_determinism),
    ];
    for (name, f) in network_checks {
        let start = Instant::now();
        let r = match &net {
            Ok(n) => f(n),
            Err(_) => Err("skipped: weights unavailable".into()),
        };
        rows.push((name, r, start.elapsed().as_secs_f64()));
    }

    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    for (name, r, secs) in &rows {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag}  {name:<width$}  {secs:>6.2} s  {detail}");
    }
    let failed = rows.iter().filter(|r| r.1.is_err()).count();
    println!("{} checks, {} passed, {failed} failed", rows.len(), rows.len() - failed);
    failed == 0
}
