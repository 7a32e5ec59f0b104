//! Per-round metrics derived from event traces, with CSV output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trace::{round_time, Action, TraceEvent};
use super::{LinkClass, Regime};
use crate::error::{Error, Result};

/// One CSV row. Byte columns split by link class and by payload kind; both
/// splits sum to `bytes_total`, and the time columns sum to `time_total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub accuracy: f64,
    pub bytes_device_cloud: u64,
    pub bytes_device_edge: u64,
    pub bytes_edge_cloud: u64,
    pub bytes_total: u64,
    pub model_bytes: u64,
    pub activation_bytes: u64,
    pub label_bytes: u64,
    pub time_device_compute: f64,
    pub time_transfer: f64,
    pub time_server_compute: f64,
    pub time_aggregation: f64,
    pub time_total: f64,
    pub sent: u64,
    pub skipped: u64,
}

impl RoundMetrics {
    pub fn from_trace(
        regime: Regime,
        round: u32,
        accuracy: f64,
        events: &[TraceEvent],
        sent: u64,
        skipped: u64,
    ) -> Result<Self> {
        let phases = round_time(regime, events)?;
        let mut m = RoundMetrics {
            round,
            accuracy,
            bytes_device_cloud: 0,
            bytes_device_edge: 0,
            bytes_edge_cloud: 0,
            bytes_total: 0,
            model_bytes: 0,
            activation_bytes: 0,
            label_bytes: 0,
            time_device_compute: phases.device_compute,
            time_transfer: phases.transfer,
            time_server_compute: phases.server_compute,
            time_aggregation: phases.aggregation,
            time_total: phases.total(),
            sent,
            skipped,
        };
        for e in events {
            if e.bytes == 0 {
                continue;
            }
            let Some(link) = e.link else {
                return Err(Error::Trace(format!(
                    "{:?} moves {} bytes without a link class",
                    e.action, e.bytes
                )));
            };
            if e.label_bytes > e.bytes {
                return Err(Error::Trace(format!(
                    "{} label bytes exceed the {} bytes of the event",
                    e.label_bytes, e.bytes
                )));
            }
            match link {
                LinkClass::DeviceCloud => m.bytes_device_cloud += e.bytes,
                LinkClass::DeviceEdge => m.bytes_device_edge += e.bytes,
                LinkClass::EdgeCloud => m.bytes_edge_cloud += e.bytes,
            }
            match e.action {
                Action::ActivationUpload | Action::GradientDownload => {
                    m.activation_bytes += e.bytes - e.label_bytes;
                    m.label_bytes += e.label_bytes;
                }
                _ => m.model_bytes += e.bytes,
            }
        }
        m.bytes_total = m.bytes_device_cloud + m.bytes_device_edge + m.bytes_edge_cloud;
        Ok(m)
    }
}

pub fn write_csv(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
