//! Two-tier activation cache.
//!
//! The disk tier holds the latest record for every key ever received. The
//! memory tier is a bounded working set filled by sampling and evicted in
//! load order. Newly received keys wait in a fresh queue and are served
//! before any uniformly sampled key.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use super::{ActivationRecord, CacheKey};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_MEMORY_CAPACITY: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TierCache {
    disk: BTreeMap<CacheKey, ActivationRecord>,
    memory: VecDeque<ActivationRecord>,
    capacity: usize,
    fresh: VecDeque<CacheKey>,
}

impl TierCache {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("cache.memory_capacity", "must be >= 1"));
        }
        Ok(TierCache {
            disk: BTreeMap::new(),
            memory: VecDeque::new(),
            capacity,
            fresh: VecDeque::new(),
        })
    }

    /// Stores `record` as the latest for its key and queues the key as fresh.
    /// Returns the record it replaced.
    pub fn insert(&mut self, record: ActivationRecord) -> Option<ActivationRecord> {
        let key = record.key;
        self.memory.retain(|r| r.key != key);
        if !self.fresh.contains(&key) {
            self.fresh.push_back(key);
        }
        self.disk.insert(key, record)
    }

    pub fn get(&self, key: &CacheKey) -> Option<&ActivationRecord> {
        self.disk.get(key)
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.disk.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.disk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.disk.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.disk.keys()
    }

    /// Disk-tier records in key order.
    pub fn records(&self) -> impl Iterator<Item = &ActivationRecord> {
        self.disk.values()
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    /// Memory-tier keys, oldest load first.
    pub fn memory_keys(&self) -> Vec<CacheKey> {
        self.memory.iter().map(|r| r.key).collect()
    }

    pub fn fresh_queue(&self) -> &VecDeque<CacheKey> {
        &self.fresh
    }

    /// Restores a record without queueing it as fresh.
    pub(crate) fn restore(&mut self, record: ActivationRecord) {
        self.disk.insert(record.key, record);
    }

    fn load(&mut self, key: CacheKey) -> ActivationRecord {
        let record = self.disk[&key].clone();
        if !self.memory.iter().any(|r| r.key == key) {
            self.memory.push_back(record.clone());
            while self.memory.len() > self.capacity {
                self.memory.pop_front();
            }
        }
        record
    }
}

/// Chooses which cached keys an overlay trains on next.
pub trait CachePolicy {
    fn select(&mut self, cache: &mut TierCache, n: usize, rng: &mut Rng) -> Result<Vec<CacheKey>>;
}

/// Fresh keys first, in arrival order; the rest uniformly without
/// replacement, falling back to sampling with replacement when the cache
/// holds fewer keys than requested.
#[derive(Clone, Copy, Debug, Default)]
pub struct MixedSampling;

impl CachePolicy for MixedSampling {
    fn select(&mut self, cache: &mut TierCache, n: usize, rng: &mut Rng) -> Result<Vec<CacheKey>> {
        if cache.is_empty() {
            return Err(Error::EmptyCache);
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            match cache.fresh.pop_front() {
                Some(k) => out.push(k),
                None => break,
            }
        }
        let rest = n - out.len();
        if rest == 0 {
            return Ok(out);
        }
        let taken: BTreeSet<CacheKey> = out.iter().copied().collect();
        let mut pool: Vec<CacheKey> = cache.keys().filter(|k| !taken.contains(k)).copied().collect();
        if pool.len() >= rest {
            out.extend(pool.choose_multiple(rng, rest).copied());
        } else {
            pool.shuffle(rng);
            let short = rest - pool.len();
            out.extend(pool);
            let all: Vec<CacheKey> = cache.keys().copied().collect();
            out.extend((0..short).map(|_| all[rng.random_range(0..all.len())]));
        }
        Ok(out)
    }
}

/// Placeholder for importance-weighted replay; selecting with it fails.
#[derive(Clone, Debug, Default)]
pub struct ImportanceSampling {
    pub weights: BTreeMap<CacheKey, f64>,
}

impl CachePolicy for ImportanceSampling {
    fn select(&mut self, _: &mut TierCache, _: usize, _: &mut Rng) -> Result<Vec<CacheKey>> {
        Err(Error::InvalidInput("importance sampling is not implemented".into()))
    }
}

/// Draws `n` records with `policy`, loading each into the memory tier.
pub fn sample_with(
    policy: &mut dyn CachePolicy,
    cache: &mut TierCache,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<ActivationRecord>> {
    let keys = policy.select(cache, n, rng)?;
    Ok(keys.into_iter().map(|k| cache.load(k)).collect())
}

pub fn cache_sample(cache: &mut TierCache, n: usize, rng: &mut Rng) -> Result<Vec<ActivationRecord>> {
    sample_with(&mut MixedSampling, cache, n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    fn rec(d: u32, b: u32, v: f32, round: u32) -> ActivationRecord {
        ActivationRecord::new(
            CacheKey::new(d, b),
            Tensor::matrix(2, 2, vec![v, v + 1.0, v - 1.0, 0.5]).unwrap(),
            vec![0, 1],
            round,
        )
        .unwrap()
    }

    #[test]
    fn fresh_first_in_order() {
        let mut c = TierCache::new(4).unwrap();
        c.insert(rec(0, 1, 1.0, 0));
        c.insert(rec(0, 2, 2.0, 0));
        let mut r = rng::stream(1, "c", &[]);
        let got: Vec<_> = cache_sample(&mut c, 2, &mut r).unwrap().iter().map(|r| r.key).collect();
        assert_eq!(got, vec![CacheKey::new(0, 1), CacheKey::new(0, 2)]);
        assert!(c.fresh_queue().is_empty());
    }

    #[test]
    fn uniform_fill_covers_all_keys() {
        let mut c = TierCache::new(3).unwrap();
        for b in 0..5 {
            c.insert(rec(1, b, b as f32, 0));
        }
        c.fresh.clear();
        let mut r = rng::stream(2, "c", &[]);
        let got: BTreeSet<_> = cache_sample(&mut c, 5, &mut r).unwrap().iter().map(|r| r.key).collect();
        assert_eq!(got.len(), 5);
        assert_eq!(c.memory_len(), 3);
        let many = cache_sample(&mut c, 12, &mut r).unwrap();
        assert_eq!(many.len(), 12);
        assert!(c.memory_len() <= 3);
    }

    #[test]
    fn latest_record_wins_and_memory_invalidated() {
        let mut c = TierCache::new(2).unwrap();
        c.insert(rec(0, 0, 1.0, 0));
        let mut r = rng::stream(3, "c", &[]);
        cache_sample(&mut c, 1, &mut r).unwrap();
        assert_eq!(c.memory_len(), 1);
        let old = c.insert(rec(0, 0, 9.0, 4)).unwrap();
        assert_eq!(old.round_received, 0);
        assert_eq!(c.memory_len(), 0);
        assert_eq!(c.get(&CacheKey::new(0, 0)).unwrap(), &rec(0, 0, 9.0, 4));
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn empty_cache_and_stub_policy_fail() {
        let mut c = TierCache::new(2).unwrap();
        let mut r = rng::stream(4, "c", &[]);
        assert!(matches!(cache_sample(&mut c, 1, &mut r), Err(Error::EmptyCache)));
        c.insert(rec(0, 0, 1.0, 0));
        assert!(sample_with(&mut ImportanceSampling::default(), &mut c, 1, &mut r).is_err());
        assert!(TierCache::new(0).is_err());
    }
}
