//! Event traces and round-time composition.
//!
//! A trace is a list of timed events, serialized as JSON lines with the keys
//! `t_start`, `t_end`, `actor`, `action`, `bytes` plus optional context
//! (`round`, `device`, `batch`, `link`, `label_bytes`).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{aggregation_flops, backward_flops, forward_flops, ComputeSpec, LinkClass, LinkSpec, Regime, Tier};
use crate::error::{Error, Result};
use crate::nn::LayerStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Actor {
    Device(u32),
    Edge(u32),
    Cloud,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Device(i) => write!(f, "device:{i}"),
            Actor::Edge(i) => write!(f, "edge:{i}"),
            Actor::Cloud => f.write_str("cloud"),
        }
    }
}

impl FromStr for Actor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cloud" {
            return Ok(Actor::Cloud);
        }
        let bad = || Error::Trace(format!("unknown actor `{s}`"));
        let (kind, id) = s.split_once(':').ok_or_else(bad)?;
        let id: u32 = id.parse().map_err(|_| bad())?;
        match kind {
            "device" => Ok(Actor::Device(id)),
            "edge" => Ok(Actor::Edge(id)),
            _ => Err(bad()),
        }
    }
}

impl From<Actor> for String {
    fn from(a: Actor) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Actor {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ModelDownload,
    ModelUpload,
    /// Forward, backward and update of one local batch (FL).
    LocalTrain,
    /// Device-part forward of one batch (SFL).
    DeviceForward,
    ActivationUpload,
    /// Server-part forward and backward of one batch (SFL).
    ServerCompute,
    GradientDownload,
    /// Device-part backward and update of one batch (SFL).
    DeviceBackward,
    Aggregation,
    /// One overlay training step on an edge server.
    AflStep,
    /// Overlay model shipped from an edge server to the cloud.
    OverlayUpload,
}

impl Action {
    pub fn is_transfer(self) -> bool {
        matches!(
            self,
            Action::ModelDownload
                | Action::ModelUpload
                | Action::ActivationUpload
                | Action::GradientDownload
                | Action::OverlayUpload
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_start: f64,
    pub t_end: f64,
    pub actor: Actor,
    pub action: Action,
    pub bytes: u64,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkClass>,
    /// Portion of `bytes` that carries labels.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub label_bytes: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl TraceEvent {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

pub fn write_jsonl(path: &Path, events: &[TraceEvent]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TraceEvent>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line)
            .map_err(|e| Error::Trace(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(ev);
    }
    Ok(out)
}

/// Round time split by phase. `total()` is the sum of the phases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub device_compute: f64,
    pub transfer: f64,
    pub server_compute: f64,
    pub aggregation: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.device_compute + self.transfer + self.server_compute + self.aggregation
    }
}

fn validate(events: &[TraceEvent]) -> Result<()> {
    let Some(first) = events.first() else {
        return Err(Error::Trace("empty trace".into()));
    };
    for e in events {
        if !(e.t_start.is_finite() && e.t_end.is_finite() && e.t_end >= e.t_start) {
            return Err(Error::Trace(format!(
                "event {:?} on {} has bad times [{}, {}]",
                e.action, e.actor, e.t_start, e.t_end
            )));
        }
        if e.round != first.round {
            return Err(Error::Trace(format!(
                "events from rounds {} and {} mixed",
                first.round, e.round
            )));
        }
        if e.action.is_transfer() && e.link.is_none() {
            return Err(Error::Trace(format!("{:?} without a link class", e.action)));
        }
    }
    Ok(())
}

#[derive(Default)]
struct DeviceTimes {
    download: f64,
    upload: f64,
    compute: f64,
    activation_upload: f64,
}

fn per_device(events: &[TraceEvent]) -> BTreeMap<u32, DeviceTimes> {
    let mut map: BTreeMap<u32, DeviceTimes> = BTreeMap::new();
    for e in events {
        let Some(d) = e.device else { continue };
        let t = map.entry(d).or_default();
        match e.action {
            Action::ModelDownload => t.download += e.duration(),
            Action::ModelUpload => t.upload += e.duration(),
            Action::LocalTrain | Action::DeviceForward | Action::DeviceBackward => {
                t.compute += e.duration()
            }
            Action::ActivationUpload => t.activation_upload += e.duration(),
            _ => {}
        }
    }
    map
}

fn sum_of(events: &[TraceEvent], action: Action) -> f64 {
    events
        .iter()
        .filter(|e| e.action == action)
        .map(TraceEvent::duration)
        .sum()
}

fn max_of(events: &[TraceEvent], action: Action) -> f64 {
    events
        .iter()
        .filter(|e| e.action == action)
        .map(TraceEvent::duration)
        .fold(0.0, f64::max)
}

/// Composes the simulated duration of one round from its trace.
///
/// * FL: slowest device's download + local compute + upload, then aggregation.
/// * SFL: every per-batch locking chain (device forward, activation upload,
///   server compute, gradient download, device backward) in sequence, framed
///   by the model download and the last-served device's upload, then
///   aggregation.
/// * EMO: as FL, except each device's compute overlaps its activation
///   uploads (`max(compute, upload)`); overlay training runs off the critical
///   path and contributes nothing.
pub fn round_time(regime: Regime, events: &[TraceEvent]) -> Result<PhaseTimes> {
    validate(events)?;
    let aggregation = sum_of(events, Action::Aggregation);
    match regime {
        Regime::FlSmall | Regime::FlLarge | Regime::Emo => {
            let overlap = regime == Regime::Emo;
            let mut best: Option<(f64, PhaseTimes)> = None;
            for t in per_device(events).values() {
                let (compute, hidden_transfer) = if overlap {
                    (t.compute, (t.activation_upload - t.compute).max(0.0))
                } else {
                    (t.compute, 0.0)
                };
                let phases = PhaseTimes {
                    device_compute: compute,
                    transfer: t.download + t.upload + hidden_transfer,
                    server_compute: 0.0,
                    aggregation: 0.0,
                };
                if best.is_none_or(|(b, _)| phases.total() > b) {
                    best = Some((phases.total(), phases));
                }
            }
            let (_, mut phases) =
                best.ok_or_else(|| Error::Trace("no device events in round".into()))?;
            phases.aggregation = aggregation;
            phases.transfer += max_of(events, Action::OverlayUpload);
            Ok(phases)
        }
        Regime::SflCloud | Regime::SflEdge => {
            let chain: Vec<&TraceEvent> = events
                .iter()
                .filter(|e| {
                    matches!(
                        e.action,
                        Action::DeviceForward
                            | Action::ActivationUpload
                            | Action::ServerCompute
                            | Action::GradientDownload
                            | Action::DeviceBackward
                    )
                })
                .collect();
            let Some(last) = chain.iter().max_by(|a, b| a.t_end.total_cmp(&b.t_end)) else {
                return Err(Error::Trace("SFL round without batch events".into()));
            };
            let last_upload = events
                .iter()
                .filter(|e| e.action == Action::ModelUpload && e.device == last.device)
                .map(TraceEvent::duration)
                .sum::<f64>();
            let mut phases = PhaseTimes {
                aggregation,
                transfer: max_of(events, Action::ModelDownload) + last_upload,
                ..Default::default()
            };
            for e in chain {
                match e.action {
                    Action::DeviceForward | Action::DeviceBackward => {
                        phases.device_compute += e.duration()
                    }
                    Action::ServerCompute => phases.server_compute += e.duration(),
                    _ => phases.transfer += e.duration(),
                }
            }
            Ok(phases)
        }
    }
}

/// Local work of one device in a round: `(batch_id, rows)` in visit order.
#[derive(Clone, Debug)]
pub struct DeviceWork {
    pub device: u32,
    pub batches: Vec<(u32, usize)>,
}

/// An activation batch a device uploads to its edge server.
#[derive(Clone, Copy, Debug)]
pub struct SentBatch {
    pub device: u32,
    pub batch: u32,
    pub edge: u32,
    pub bytes: u64,
    pub label_bytes: u64,
}

/// Overlay training done by one edge server during a round.
#[derive(Clone, Copy, Debug)]
pub struct AflWork {
    pub edge: u32,
    pub steps: usize,
    pub flops_per_step: f64,
}

/// Event schedule for an FL round, optionally with EMO activation uploads and
/// overlay training. Returns the events and the time the round's critical
/// path (everything but overlay training) ends.
#[allow(clippy::too_many_arguments)]
pub fn schedule_fl_round(
    round: u32,
    t0: f64,
    model: &LayerStack,
    work: &[DeviceWork],
    sent: &[SentBatch],
    afl: &[AflWork],
    link: &LinkSpec,
    compute: &ComputeSpec,
) -> (Vec<TraceEvent>, f64) {
    let mut events = Vec::new();
    let model_bytes = model.param_bytes();
    let ev = |t_start: f64, dur: f64, actor, action, bytes, device, batch, link| TraceEvent {
        t_start,
        t_end: t_start + dur,
        actor,
        action,
        bytes,
        round,
        device,
        batch,
        link,
        label_bytes: 0,
    };

    for a in afl {
        let dur = compute.seconds(a.flops_per_step, Tier::Edge);
        for s in 0..a.steps {
            events.push(ev(
                t0 + s as f64 * dur,
                dur,
                Actor::Edge(a.edge),
                Action::AflStep,
                0,
                None,
                None,
                None,
            ));
        }
    }

    let mut devices_end: f64 = t0;
    for w in work {
        let dev = Some(w.device);
        let actor = Actor::Device(w.device);
        let dl = link.transfer_time(model_bytes, LinkClass::DeviceCloud);
        events.push(ev(t0, dl, actor, Action::ModelDownload, model_bytes, dev, None, Some(LinkClass::DeviceCloud)));
        let mut t = t0 + dl;
        let mut uplink_free = t;
        for &(batch, rows) in &w.batches {
            let dur = compute.seconds(
                forward_flops(model, rows) + backward_flops(model, rows),
                Tier::Device,
            );
            events.push(ev(t, dur, actor, Action::LocalTrain, 0, dev, Some(batch), None));
            t += dur;
            for s in sent.iter().filter(|s| s.device == w.device && s.batch == batch) {
                let start = uplink_free.max(t);
                let up = link.transfer_time(s.bytes, LinkClass::DeviceEdge);
                let mut e = ev(start, up, actor, Action::ActivationUpload, s.bytes, dev, Some(batch), Some(LinkClass::DeviceEdge));
                e.label_bytes = s.label_bytes;
                events.push(e);
                uplink_free = start + up;
            }
        }
        let start = t.max(uplink_free);
        let ul = link.transfer_time(model_bytes, LinkClass::DeviceCloud);
        events.push(ev(start, ul, actor, Action::ModelUpload, model_bytes, dev, None, Some(LinkClass::DeviceCloud)));
        devices_end = devices_end.max(start + ul);
    }

    let agg = compute.seconds(aggregation_flops(work.len(), model.param_count()), Tier::Cloud);
    events.push(ev(devices_end, agg, Actor::Cloud, Action::Aggregation, 0, None, None, None));
    (events, devices_end + agg)
}
