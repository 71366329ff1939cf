use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use super::*;
use crate::attention::{build_weighted_mask, KvRecord, Multiplicative, WeightedMask};
use crate::codec::{embed_prompt, LatentImage, PromptEmbedding, DEFAULT_SCALE_FACTOR, DEFAULT_VOCAB_SEED};
use crate::error::Error;
use crate::numerics::{gaussian_sample, PrngStream, Tensor};

fn net() -> &'static Denoiser {
    static NET: OnceLock<Denoiser> = OnceLock::new();
    NET.get_or_init(|| Denoiser::new(init_weights(3, &UNetConfig::default()).unwrap()).unwrap())
}

fn latent(seed: u64) -> LatentImage {
    let (t, _) = gaussian_sample(&[4, 16, 16], PrngStream::new(seed, 0));
    LatentImage::new(t, DEFAULT_SCALE_FACTOR).unwrap()
}

fn prompt(text: &str) -> PromptEmbedding {
    embed_prompt(text, DEFAULT_VOCAB_SEED).unwrap()
}

/// Flat record store that counts reads per global layer.
struct Store {
    records: BTreeMap<(usize, usize, usize), KvRecord>,
    num_refs: usize,
    reads: Vec<AtomicUsize>,
}

impl Store {
    fn new(num_refs: usize, records: Vec<KvRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| ((r.ref_index, r.layer, r.step), r)).collect(),
            num_refs,
            reads: (0..NUM_LAYERS).map(|_| AtomicUsize::new(0)).collect(),
        }
    }

    fn reads(&self) -> Vec<usize> {
        self.reads.iter().map(|r| r.load(Ordering::Relaxed)).collect()
    }
}

impl KvSource for Store {
    fn num_refs(&self) -> usize {
        self.num_refs
    }
    fn fetch(&self, ref_index: usize, addr: LayerAddress, step: usize) -> crate::error::Result<&KvRecord> {
        self.reads[addr.global_layer].fetch_add(1, Ordering::Relaxed);
        self.records
            .get(&(ref_index, addr.global_layer, step))
            .ok_or(Error::CacheMiss {
                ref_index,
                block: addr.block,
                layer: addr.global_layer,
                step,
            })
    }
}

fn ones_masks(num_refs: usize) -> BTreeMap<usize, WeightedMask> {
    [16usize, 8, 4]
        .into_iter()
        .map(|r| {
            let masks = vec![Tensor::ones(&[r, r]); num_refs];
            (r, build_weighted_mask(&masks, &vec![1.0; num_refs], r * r).unwrap())
        })
        .collect()
}

#[test]
fn layer_bookkeeping_matches_block_layout() {
    let cfg = UNetConfig::default();
    assert_eq!(cfg.address(15).unwrap().block, 6);
    assert_eq!(cfg.address(10).unwrap().block, 5);
    assert_eq!(cfg.psi_layers(), vec![10, 11, 12, 13, 14, 15]);
    let plans = layer_plans(&cfg);
    assert_eq!(plans.len(), 16);
    assert_eq!(plans[10].res, 8);
    assert_eq!(plans[15].res, 16);
}

#[test]
fn reference_harvest_records_psi_layers() {
    let recs = net().forward_reference(&latent(1), 500, 7, 2, &prompt("a red hat")).unwrap();
    assert_eq!(recs.len(), 6);
    for r in &recs {
        let res = net().config().resolution_of_layer(r.layer).unwrap();
        assert_eq!(r.k.dims(), &[res * res, 32]);
        assert_eq!(r.v.dims(), &[res * res, 32]);
        assert_eq!((r.step, r.ref_index), (7, 2));
    }
    assert_eq!(recs[0].k.dims()[0], 64);
    let again = net().forward_reference(&latent(1), 500, 7, 2, &prompt("a red hat")).unwrap();
    assert_eq!(recs, again);
}

#[test]
fn forward_is_finite_and_shaped() {
    let eps = net().forward(&latent(2), 999, &prompt("a photo of the dog")).unwrap();
    assert_eq!(eps.dims(), &[4, 16, 16]);
    assert!(eps.is_finite());
}

#[test]
fn compose_without_refs_is_vanilla_bitwise() {
    let z = latent(4);
    let p = prompt("a dog wearing a hat");
    let vanilla = net().forward(&z, 420, &p).unwrap();
    let store = Store::new(0, vec![]);
    let masks = ones_masks(0);
    let ctx = ComposeContext {
        cache: &store,
        step: 1,
        masks: &masks,
        strategy: &Multiplicative,
        capture_layers: &BTreeSet::new(),
    };
    let out = net().forward_compose(&z, 420, &p, &ctx).unwrap();
    assert_eq!(out.eps.data(), vanilla.data());
}

#[test]
fn empty_psi_ignores_the_cache() {
    let z = latent(5);
    let p = prompt("a cat");
    let no_psi = net().clone().with_psi([]).unwrap();
    let store = Store::new(2, vec![]);
    let masks = ones_masks(2);
    let ctx = ComposeContext {
        cache: &store,
        step: 3,
        masks: &masks,
        strategy: &Multiplicative,
        capture_layers: &BTreeSet::new(),
    };
    let out = no_psi.forward_compose(&z, 300, &p, &ctx).unwrap();
    assert_eq!(out.eps.data(), net().forward(&z, 300, &p).unwrap().data());
    assert!(store.reads().iter().all(|&r| r == 0));
}

#[test]
fn all_blocks_replaced_reads_every_layer() {
    let all = net().clone().with_psi(0..7).unwrap();
    let recs = all.forward_reference(&latent(6), 100, 1, 1, &prompt("a hat")).unwrap();
    assert_eq!(recs.len(), 16);
    let store = Store::new(1, recs);
    let masks = ones_masks(1);
    let ctx = ComposeContext {
        cache: &store,
        step: 1,
        masks: &masks,
        strategy: &Multiplicative,
        capture_layers: &BTreeSet::new(),
    };
    let out = all.forward_compose(&latent(7), 100, &prompt("a dog"), &ctx).unwrap();
    assert!(out.eps.is_finite());
    assert_eq!(store.reads(), vec![1; 16]);
}

#[test]
fn only_psi_layers_read_the_cache() {
    let recs = net().forward_reference(&latent(8), 50, 1, 1, &prompt("a hat")).unwrap();
    let store = Store::new(1, recs);
    let masks = ones_masks(1);
    let capture: BTreeSet<usize> = [3, 15].into();
    let ctx = ComposeContext {
        cache: &store,
        step: 1,
        masks: &masks,
        strategy: &Multiplicative,
        capture_layers: &capture,
    };
    let out = net().forward_compose(&latent(9), 50, &prompt("a dog"), &ctx).unwrap();
    let reads = store.reads();
    for (layer, n) in reads.iter().enumerate() {
        assert_eq!(*n, usize::from(layer >= 10), "layer {layer}");
    }
    assert_eq!(out.captures.len(), 2);
    assert_eq!(out.captures[0].k.dims(), &[64, 32]);
    assert_eq!(out.captures[1].k.dims(), &[512, 32]);
}

#[test]
fn missing_record_names_its_address() {
    let store = Store::new(1, vec![]);
    let masks = ones_masks(1);
    let ctx = ComposeContext {
        cache: &store,
        step: 4,
        masks: &masks,
        strategy: &Multiplicative,
        capture_layers: &BTreeSet::new(),
    };
    match net().forward_compose(&latent(1), 10, &prompt("a"), &ctx) {
        Err(Error::CacheMiss { ref_index, block, layer, step }) => {
            assert_eq!((ref_index, block, layer, step), (1, 5, 10, 4));
        }
        other => panic!("expected cache miss, got {other:?}"),
    }
}

#[test]
fn time_embedding_contract() {
    let s = sinusoidal_embedding(0.0, 128);
    assert!(s.data()[..64].iter().all(|&v| v == 0.0));
    assert!(s.data()[64..].iter().all(|&v| v == 1.0));
    let a = net().time_embedding(10).unwrap();
    let b = net().time_embedding(11).unwrap();
    assert_eq!(a.dims(), &[128]);
    assert_ne!(a, b);
}

#[test]
fn weights_are_seeded() {
    let cfg = UNetConfig::default();
    let a = init_weights(1, &cfg).unwrap();
    assert_eq!(a, init_weights(1, &cfg).unwrap());
    let b = init_weights(2, &cfg).unwrap();
    assert_ne!(a, b);
    assert_eq!(a.num_parameters(), b.num_parameters());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
}

#[test]
fn rejects_wrong_latent_size() {
    let z = LatentImage::new(Tensor::zeros(&[4, 8, 8]), 4).unwrap();
    assert!(matches!(net().forward(&z, 1, &prompt("a")), Err(Error::Shape(_))));
}
