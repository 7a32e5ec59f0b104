//! Edge overlays: activation replay cache, transmission controller and
//! overlay training from cached activations.

pub mod cache;
pub mod controller;
pub mod store;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::LayerStack;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use cache::{cache_sample, CachePolicy, ImportanceSampling, MixedSampling, TierCache};
pub use controller::{controller_receive, interval_for_score, ControllerState, Decision, KeyState, Receipt};
pub use store::{load_cache, load_manifest, persist_cache, Manifest, ManifestEntry};

/// Identifies one activation batch: the device and its local batch id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub device_id: u32,
    pub batch_id: u32,
}

impl CacheKey {
    pub fn new(device_id: u32, batch_id: u32) -> Self {
        CacheKey {
            device_id,
            batch_id,
        }
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.device_id, self.batch_id)
    }
}

impl FromStr for CacheKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("cache key `{s}` is not `device:batch`"));
        let (d, b) = s.split_once(':').ok_or_else(bad)?;
        Ok(CacheKey::new(
            d.parse().map_err(|_| bad())?,
            b.parse().map_err(|_| bad())?,
        ))
    }
}

/// One batch of tap-layer activations with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub key: CacheKey,
    pub activation: Tensor,
    pub labels: Vec<usize>,
    pub round_received: u32,
}

impl ActivationRecord {
    pub fn new(key: CacheKey, activation: Tensor, labels: Vec<usize>, round_received: u32) -> Result<Self> {
        if activation.ndim() != 2 || activation.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "activation {:?} with {} labels for key {key}",
                activation.shape(),
                labels.len()
            )));
        }
        Ok(ActivationRecord {
            key,
            activation,
            labels,
            round_received,
        })
    }

    pub fn width(&self) -> usize {
        self.activation.cols()
    }
}

/// An overlay model hosted on one edge server.
#[derive(Clone, Debug)]
pub struct OverlaySpec {
    pub edge_server_id: u32,
    pub covered_devices: BTreeSet<u32>,
    /// Maps tap activations to class logits.
    pub model: LayerStack,
    pub tap_layer: usize,
}

impl OverlaySpec {
    /// Checks the overlay input against the width of `base` after `tap_layer` layers.
    pub fn new(
        edge_server_id: u32,
        covered_devices: BTreeSet<u32>,
        model: LayerStack,
        tap_layer: usize,
        base: &LayerStack,
    ) -> Result<Self> {
        let width = base
            .width_after(tap_layer)
            .filter(|_| tap_layer >= 1 && tap_layer < base.len())
            .ok_or(Error::InvalidSplit {
                index: tap_layer,
                layers: base.len(),
            })?;
        if model.in_dim() != width {
            return Err(Error::Shape(format!(
                "overlay {edge_server_id} takes {} inputs but tap layer {tap_layer} emits {width}",
                model.in_dim()
            )));
        }
        Ok(OverlaySpec {
            edge_server_id,
            covered_devices,
            model,
            tap_layer,
        })
    }

    pub fn covers(&self, device: u32) -> bool {
        self.covered_devices.contains(&device)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AflStep {
    pub mean_loss: f32,
    pub keys: Vec<CacheKey>,
}

/// Samples `batches` records from the cache and applies one SGD step per record.
pub fn run_afl_step(
    overlay: &mut OverlaySpec,
    cache: &mut TierCache,
    batches: usize,
    rng: &mut Rng,
    lr: f32,
) -> Result<AflStep> {
    let records = cache_sample(cache, batches, rng)?;
    let mut loss = 0.0f32;
    for r in &records {
        if let Some(&y) = r.labels.iter().find(|&&y| y >= overlay.model.out_dim()) {
            return Err(Error::InvalidInput(format!(
                "label {y} in record {} exceeds the overlay's {} classes",
                r.key,
                overlay.model.out_dim()
            )));
        }
        loss += overlay.model.train_batch(&r.activation, &r.labels, lr)?;
    }
    Ok(AflStep {
        mean_loss: loss / records.len().max(1) as f32,
        keys: records.iter().map(|r| r.key).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn key_strings_round_trip() {
        let k = CacheKey::new(12, 3);
        assert_eq!(k.to_string(), "12:3");
        assert_eq!("12:3".parse::<CacheKey>().unwrap(), k);
        assert!("12-3".parse::<CacheKey>().is_err());
    }

    #[test]
    fn overlay_width_checked() {
        let mut r = rng::stream(1, "ov", &[]);
        let base = LayerStack::mlp(&[4, 6, 5, 3], &mut r).unwrap();
        let good = LayerStack::mlp(&[5, 8, 3], &mut r).unwrap();
        let bad = LayerStack::mlp(&[6, 8, 3], &mut r).unwrap();
        assert!(OverlaySpec::new(0, BTreeSet::new(), good.clone(), 2, &base).is_ok());
        assert!(OverlaySpec::new(0, BTreeSet::new(), bad, 2, &base).is_err());
        assert!(OverlaySpec::new(0, BTreeSet::new(), good, 3, &base).is_err());
    }

    fn separable_cache(r: &mut Rng) -> TierCache {
        use rand::Rng as _;
        let mut cache = TierCache::new(8).unwrap();
        for b in 0..10u32 {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for _ in 0..16 {
                let c = r.random_range(0..2usize);
                let s = if c == 0 { -1.0 } else { 1.0 };
                x.push(s + r.random_range(-0.5..0.5f32));
                x.push(r.random_range(-1.0..1.0f32));
                y.push(c);
            }
            let rec = ActivationRecord::new(CacheKey::new(0, b), Tensor::matrix(16, 2, x).unwrap(), y, 0).unwrap();
            cache.insert(rec);
        }
        cache
    }

    #[test]
    fn afl_learns_from_frozen_cache() {
        let mut r = rng::stream(2, "afl", &[]);
        let mut cache = separable_cache(&mut r);
        let base = LayerStack::mlp(&[3, 2, 2], &mut r).unwrap();
        let model = LayerStack::mlp(&[2, 8, 2], &mut r).unwrap();
        let mut ov = OverlaySpec::new(0, BTreeSet::new(), model, 1, &base).unwrap();
        for _ in 0..200 {
            run_afl_step(&mut ov, &mut cache, 1, &mut r, 0.1).unwrap();
        }
        let (mut hit, mut n) = (0, 0);
        for rec in cache.records() {
            let pred = ov.model.predict(&rec.activation).unwrap().argmax_rows();
            hit += pred.iter().zip(&rec.labels).filter(|(p, y)| p == y).count();
            n += rec.labels.len();
        }
        assert!(hit as f64 / n as f64 >= 0.9);
    }

    #[test]
    fn afl_zero_lr_and_determinism() {
        let mut r = rng::stream(3, "afl", &[]);
        let cache = separable_cache(&mut r);
        let base = LayerStack::mlp(&[3, 2, 2], &mut r).unwrap();
        let model = LayerStack::mlp(&[2, 4, 2], &mut r).unwrap();
        let ov = OverlaySpec::new(0, BTreeSet::new(), model, 1, &base).unwrap();

        let mut frozen = ov.clone();
        let mut c = cache.clone();
        run_afl_step(&mut frozen, &mut c, 3, &mut rng::stream(9, "s", &[]), 0.0).unwrap();
        assert_eq!(frozen.model, ov.model);
        assert!(c.memory_len() > 0);

        let run = || {
            let mut o = ov.clone();
            let mut c = cache.clone();
            let mut s = rng::stream(9, "s", &[]);
            for _ in 0..5 {
                run_afl_step(&mut o, &mut c, 2, &mut s, 0.05).unwrap();
            }
            o.model
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn afl_on_empty_cache_fails() {
        let mut r = rng::stream(4, "afl", &[]);
        let base = LayerStack::mlp(&[3, 2, 2], &mut r).unwrap();
        let model = LayerStack::mlp(&[2, 4, 2], &mut r).unwrap();
        let mut ov = OverlaySpec::new(0, BTreeSet::new(), model, 1, &base).unwrap();
        let mut cache = TierCache::new(4).unwrap();
        assert!(matches!(
            run_afl_step(&mut ov, &mut cache, 1, &mut r, 0.1),
            Err(Error::EmptyCache)
        ));
    }
}
