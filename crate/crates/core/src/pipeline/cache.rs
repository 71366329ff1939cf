use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::attention::KvRecord;
use crate::denoiser::{KvSource, LayerAddress, NUM_LAYERS};
use crate::error::{Error, Result};

/// Harvested reference keys and values, keyed by `(ref_index, layer, step)`.
///
/// Every `fetch` bumps a per-layer read counter so tests can see exactly which
/// layers consumed reference features.
#[derive(Debug)]
pub struct KvCache {
    num_refs: usize,
    entries: BTreeMap<(usize, usize, usize), KvRecord>,
    reads: Vec<AtomicUsize>,
}

impl KvCache {
    pub fn new(num_refs: usize) -> Self {
        Self {
            num_refs,
            entries: BTreeMap::new(),
            reads: (0..NUM_LAYERS).map(|_| AtomicUsize::new(0)).collect(),
        }
    }

    pub fn insert(&mut self, record: KvRecord) -> Result<()> {
        if record.ref_index == 0 || record.ref_index > self.num_refs {
            return Err(Error::Input(format!(
                "reference index {} outside 1..={}",
                record.ref_index, self.num_refs
            )));
        }
        let key = (record.ref_index, record.layer, record.step);
        if self.entries.insert(key, record).is_some() {
            return Err(Error::Consistency(format!(
                "duplicate record for ref {}, layer {}, step {}",
                key.0, key.1, key.2
            )));
        }
        Ok(())
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = KvRecord>) -> Result<()> {
        records.into_iter().try_for_each(|r| self.insert(r))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries_at_step(&self, step: usize) -> usize {
        self.entries.values().filter(|r| r.step == step).count()
    }

    pub fn get(&self, ref_index: usize, layer: usize, step: usize) -> Option<&KvRecord> {
        self.entries.get(&(ref_index, layer, step))
    }

    pub fn records(&self) -> impl Iterator<Item = &KvRecord> {
        self.entries.values()
    }

    /// Fetch count per global layer since construction.
    pub fn reads_per_layer(&self) -> Vec<usize> {
        self.reads.iter().map(|r| r.load(Ordering::Relaxed)).collect()
    }
}

impl KvSource for KvCache {
    fn num_refs(&self) -> usize {
        self.num_refs
    }

    fn fetch(&self, ref_index: usize, addr: LayerAddress, step: usize) -> Result<&KvRecord> {
        if let Some(counter) = self.reads.get(addr.global_layer) {
            counter.fetch_add(1, Ordering::Relaxed);
        }
        self.entries
            .get(&(ref_index, addr.global_layer, step))
            .ok_or(Error::CacheMiss {
                ref_index,
                block: addr.block,
                layer: addr.global_layer,
                step,
            })
    }
}
