//! Network and timing model.
//!
//! Every transfer and compute step of a simulated round is written to an
//! event trace; round times and byte counts are derived from that trace,
//! never assumed.

pub mod cost;
pub mod metrics;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerStack;

pub use cost::{cost_calculator, AnalyticLayer, AnalyticModel, CostBreakdown, CostInputs};
pub use metrics::RoundMetrics;
pub use trace::{round_time, Action, Actor, PhaseTimes, TraceEvent};

/// Training regimes compared by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// FL with the small (device-sized) model.
    FlSmall,
    /// FL with the large model trained entirely on devices.
    FlLarge,
    /// SFL with the server part on the cloud (WAN).
    SflCloud,
    /// SFL with the server part on an edge server (LAN).
    SflEdge,
    /// FL-small plus edge overlays trained from cached activations.
    Emo,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::FlSmall,
        Regime::FlLarge,
        Regime::SflCloud,
        Regime::SflEdge,
        Regime::Emo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::FlSmall => "fl_small",
            Regime::FlLarge => "fl_large",
            Regime::SflCloud => "sfl_cloud",
            Regime::SflEdge => "sfl_edge",
            Regime::Emo => "emo",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Link classes of the device / edge / cloud topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    /// WAN between devices and the cloud.
    DeviceCloud,
    /// LAN between devices and their edge server.
    DeviceEdge,
    /// WAN between edge servers and the cloud.
    EdgeCloud,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSpec {
    pub lan_mbps: f64,
    pub wan_mbps: f64,
    pub latency_ms: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            lan_mbps: 800.0,
            wan_mbps: 100.0,
            latency_ms: 0.0,
        }
    }
}

impl LinkSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("network.lan_mbps", self.lan_mbps), ("network.wan_mbps", self.wan_mbps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("{v} must be > 0")));
            }
        }
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(Error::config("network.latency_ms", "must be >= 0"));
        }
        Ok(())
    }

    pub fn mbps(&self, class: LinkClass) -> f64 {
        match class {
            LinkClass::DeviceEdge => self.lan_mbps,
            LinkClass::DeviceCloud | LinkClass::EdgeCloud => self.wan_mbps,
        }
    }

    /// Seconds to move `bytes` over a link of this class.
    pub fn transfer_time(&self, bytes: u64, class: LinkClass) -> f64 {
        transfer_time(bytes, self.mbps(class), self.latency_ms)
    }
}

/// `latency + bytes·8 / (mbps·10⁶)` seconds.
pub fn transfer_time(bytes: u64, mbps: f64, latency_ms: f64) -> f64 {
    latency_ms / 1e3 + bytes as f64 * 8.0 / (mbps * 1e6)
}

/// Compute throughput of each tier; times are `flops / throughput`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeSpec {
    pub device_gflops: f64,
    pub edge_gflops: f64,
    pub cloud_gflops: f64,
}

impl Default for ComputeSpec {
    fn default() -> Self {
        ComputeSpec {
            device_gflops: 1.0,
            edge_gflops: 20.0,
            cloud_gflops: 40.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Device,
    Edge,
    Cloud,
}

impl ComputeSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("compute.device_gflops", self.device_gflops),
            ("compute.edge_gflops", self.edge_gflops),
            ("compute.cloud_gflops", self.cloud_gflops),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("{v} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn seconds(&self, flops: f64, tier: Tier) -> f64 {
        let g = match tier {
            Tier::Device => self.device_gflops,
            Tier::Edge => self.edge_gflops,
            Tier::Cloud => self.cloud_gflops,
        };
        flops / (g * 1e9)
    }
}

/// Multiply-add count of a forward pass over `rows` samples.
pub fn forward_flops(model: &LayerStack, rows: usize) -> f64 {
    model
        .layers()
        .iter()
        .map(|l| 2.0 * rows as f64 * l.in_dim() as f64 * l.out_dim() as f64)
        .sum()
}

/// Backward pass cost, taken as twice the forward pass.
pub fn backward_flops(model: &LayerStack, rows: usize) -> f64 {
    2.0 * forward_flops(model, rows)
}

/// Cost of averaging `k` models of `params` parameters.
pub fn aggregation_flops(k: usize, params: usize) -> f64 {
    2.0 * k as f64 * params as f64
}
