//! Convergence-aware transmission control.
//!
//! The edge server keeps, per cached key, an interval `i`, a counter `c` and
//! the last similarity score `s`. A device asks before uploading a batch:
//! unknown keys and keys whose counter reached the interval must be sent,
//! anything else is skipped and the counter advances. On receipt the new
//! activation is scored against the cached one with SVCCA and the interval
//! becomes `clamp(round(1 / (1 - s)), 1, max_interval)`.

use std::collections::BTreeMap;

use log::debug;

use super::cache::TierCache;
use super::{ActivationRecord, CacheKey};
use crate::error::{Error, Result};
use crate::svcca::{svcca_score, ActivationMatrix, SvccaConfig};

pub const DEFAULT_MAX_INTERVAL: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    SendRequired,
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyState {
    pub interval: u32,
    pub counter: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    max_interval: u32,
    keys: BTreeMap<CacheKey, KeyState>,
}

/// `clamp(round(1 / (1 - s)), 1, max_interval)`; non-finite scores count as 0.
pub fn interval_for_score(score: f64, max_interval: u32) -> u32 {
    let s = if score.is_finite() { score.clamp(0.0, 1.0) } else { 0.0 };
    if s >= 1.0 {
        return max_interval;
    }
    let raw = (1.0 / (1.0 - s)).round();
    raw.clamp(1.0, f64::from(max_interval)) as u32
}

impl ControllerState {
    pub fn new(max_interval: u32) -> Result<Self> {
        if max_interval == 0 {
            return Err(Error::config("controller.max_interval", "must be >= 1"));
        }
        Ok(ControllerState {
            max_interval,
            keys: BTreeMap::new(),
        })
    }

    pub fn max_interval(&self) -> u32 {
        self.max_interval
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.keys.contains_key(key)
    }

    pub fn get(&self, key: &CacheKey) -> Option<&KeyState> {
        self.keys.get(key)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CacheKey, &KeyState)> {
        self.keys.iter()
    }

    /// Whether the device must upload `key` now. A skip advances the counter.
    pub fn transmission_decision(&mut self, key: CacheKey) -> Decision {
        match self.keys.get_mut(&key) {
            None => Decision::SendRequired,
            Some(st) if st.counter >= st.interval => Decision::SendRequired,
            Some(st) => {
                st.counter += 1;
                Decision::Skip
            }
        }
    }

    /// Records an upload of `key`. `score` is `None` for a key seen for the
    /// first time, which starts at `s = 0`, `i = 1`.
    pub fn record_receipt(&mut self, key: CacheKey, score: Option<f64>) -> KeyState {
        let s = score.unwrap_or(0.0);
        let st = KeyState {
            interval: interval_for_score(s, self.max_interval),
            counter: 0,
            score: if s.is_finite() { s.clamp(0.0, 1.0) } else { 0.0 },
        };
        self.keys.insert(key, st);
        st
    }

    /// Reinstates saved per-key state.
    pub fn restore(&mut self, key: CacheKey, state: KeyState) {
        self.keys.insert(key, state);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Receipt {
    pub score: f64,
    pub interval: u32,
    pub new_key: bool,
}

/// Scores `rec` against the cached activation for its key, stores it as the
/// latest record and updates the key's interval.
///
/// Scores that cannot be computed (for example batches of one sample) count
/// as 0.
pub fn controller_receive(
    rec: ActivationRecord,
    state: &mut ControllerState,
    cache: &mut TierCache,
    cfg: &SvccaConfig,
) -> Result<Receipt> {
    let key = rec.key;
    let score = match cache.get(&key) {
        None => None,
        Some(old) => {
            if old.width() != rec.width() {
                return Err(Error::Shape(format!(
                    "activation width changed from {} to {} for key {key}",
                    old.width(),
                    rec.width()
                )));
            }
            let scored = ActivationMatrix::from_tensor(&old.activation)
                .and_then(|a| {
                    ActivationMatrix::from_tensor(&rec.activation).map(|b| (a, b))
                })
                .and_then(|(a, b)| svcca_score(&a, &b, cfg));
            Some(match scored {
                Ok(s) => s.value,
                Err(e) => {
                    debug!("scoring key {key} failed ({e}); using 0");
                    0.0
                }
            })
        }
    };
    cache.insert(rec);
    let st = state.record_receipt(key, score);
    Ok(Receipt {
        score: st.score,
        interval: st.interval,
        new_key: score.is_none(),
    })
}
