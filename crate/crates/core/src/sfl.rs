//! Split federated learning with sequential device service.
//!
//! Devices are served one after another against a single server part. For
//! every local batch the device runs its layers, uploads the cut activation
//! and labels, waits for the server's forward and backward pass, receives the
//! cut gradient and only then runs its own backward pass. The server part is
//! stepped per batch; the device parts are FedAvg'd at the end of the round.

use log::warn;

use crate::error::{Error, Result};
use crate::fed::{fedavg, visit_order, DevicePopulation, RoundPlan, TrainConfig};
use crate::nn::SplitModel;
use crate::simnet::cost::{LABEL_BYTES, VALUE_BYTES};
use crate::simnet::trace::TraceEvent;
use crate::simnet::{
    aggregation_flops, backward_flops, forward_flops, Action, Actor, ComputeSpec, LinkClass,
    LinkSpec, Regime, Tier,
};
use crate::tensor::Tensor;

/// Gradient of the loss with respect to one uploaded activation batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub device_id: u32,
    pub batch_id: u32,
    pub grad: Tensor,
}

impl GradientRecord {
    /// Fails unless the gradient has the shape of the activation it answers.
    pub fn check_matches(&self, activation: &Tensor) -> Result<()> {
        if self.grad.shape() != activation.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for activation {:?} (device {}, batch {})",
                self.grad.shape(),
                activation.shape(),
                self.device_id,
                self.batch_id
            )));
        }
        Ok(())
    }
}

/// Where the server part runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServerPlacement {
    Edge,
    Cloud,
}

impl ServerPlacement {
    pub fn from_regime(regime: Regime) -> Option<Self> {
        match regime {
            Regime::SflEdge => Some(ServerPlacement::Edge),
            Regime::SflCloud => Some(ServerPlacement::Cloud),
            _ => None,
        }
    }

    fn link(self) -> LinkClass {
        match self {
            ServerPlacement::Edge => LinkClass::DeviceEdge,
            ServerPlacement::Cloud => LinkClass::DeviceCloud,
        }
    }

    fn tier(self) -> Tier {
        match self {
            ServerPlacement::Edge => Tier::Edge,
            ServerPlacement::Cloud => Tier::Cloud,
        }
    }

    fn actor(self) -> Actor {
        match self {
            ServerPlacement::Edge => Actor::Edge(0),
            ServerPlacement::Cloud => Actor::Cloud,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SflEnv<'a> {
    pub placement: ServerPlacement,
    pub link: &'a LinkSpec,
    pub compute: &'a ComputeSpec,
    /// Simulated time at which the round starts.
    pub t0: f64,
}

#[derive(Clone, Debug)]
pub struct SflRound {
    pub split: SplitModel,
    pub events: Vec<TraceEvent>,
    pub gradients: Vec<GradientRecord>,
    /// Activations plus gradients, labels excluded.
    pub activation_bytes: u64,
    pub label_bytes: u64,
    /// Device-part download and upload for every selected device.
    pub model_bytes: u64,
    pub mean_loss: f32,
    /// Simulated time at which aggregation finishes.
    pub t_end: f64,
}

pub fn run_sfl_round(
    split: &SplitModel,
    population: &DevicePopulation,
    plan: &RoundPlan,
    cfg: &TrainConfig,
    env: &SflEnv<'_>,
) -> Result<SflRound> {
    let round = plan.round;
    let dev_bytes = split.device_part.param_bytes();
    let act_link = env.placement.link();
    let mut server = split.server_part.clone();
    let mut events = Vec::new();
    let mut gradients = Vec::new();
    let mut models = Vec::new();
    let mut weights = Vec::new();
    let (mut activation_bytes, mut label_bytes) = (0u64, 0u64);
    let (mut loss_sum, mut loss_n) = (0.0f32, 0usize);

    let event = |t_start: f64, dur: f64, actor, action, bytes, device, batch, link| TraceEvent {
        t_start,
        t_end: t_start + dur,
        actor,
        action,
        bytes,
        round,
        device: Some(device),
        batch,
        link,
        label_bytes: 0,
    };

    let dl = env.link.transfer_time(dev_bytes, LinkClass::DeviceCloud);
    let mut clock = env.t0 + dl;
    let mut uploads_end = clock;

    for &id in &plan.selected {
        let device = population
            .device(id)
            .ok_or_else(|| Error::InvalidInput(format!("round plan selects unknown device {id}")))?;
        let actor = Actor::Device(id);
        events.push(event(
            env.t0,
            dl,
            actor,
            Action::ModelDownload,
            dev_bytes,
            id,
            None,
            Some(LinkClass::DeviceCloud),
        ));
        let mut local = split.device_part.clone();
        match &device.shard {
            None => warn!("device {id} has an empty shard; skipped"),
            Some(shard) => {
                let batches = device.batches(cfg.batch_size, cfg.seed);
                for b in visit_order(device, round, cfg) {
                    let batch = Some(b as u32);
                    let (x, y) = shard.batch(&batches[b])?;
                    let rows = y.len();

                    let (act, dev_tape) = local.forward(&x)?;
                    let t = env.compute.seconds(forward_flops(&local, rows), Tier::Device);
                    events.push(event(clock, t, actor, Action::DeviceForward, 0, id, batch, None));
                    clock += t;

                    let a_bytes = VALUE_BYTES * act.len() as u64;
                    let l_bytes = LABEL_BYTES * rows as u64;
                    let t = env.link.transfer_time(a_bytes + l_bytes, act_link);
                    let mut up = event(
                        clock,
                        t,
                        actor,
                        Action::ActivationUpload,
                        a_bytes + l_bytes,
                        id,
                        batch,
                        Some(act_link),
                    );
                    up.label_bytes = l_bytes;
                    events.push(up);
                    clock += t;

                    let (_, srv_tape) = server.forward(&act)?;
                    let bw = server.backward(&srv_tape, &y)?;
                    server.sgd_step(&bw.grads, cfg.lr)?;
                    let flops = forward_flops(&server, rows) + backward_flops(&server, rows);
                    let t = env.compute.seconds(flops, env.placement.tier());
                    events.push(event(
                        clock,
                        t,
                        env.placement.actor(),
                        Action::ServerCompute,
                        0,
                        id,
                        batch,
                        None,
                    ));
                    clock += t;
                    loss_sum += bw.loss;
                    loss_n += 1;

                    let record = GradientRecord {
                        device_id: id,
                        batch_id: b as u32,
                        grad: bw.input_grad,
                    };
                    record.check_matches(&act)?;
                    let g_bytes = VALUE_BYTES * record.grad.len() as u64;
                    let t = env.link.transfer_time(g_bytes, act_link);
                    events.push(event(
                        clock,
                        t,
                        actor,
                        Action::GradientDownload,
                        g_bytes,
                        id,
                        batch,
                        Some(act_link),
                    ));
                    clock += t;

                    let (grads, _) = local.backward_from(&dev_tape, record.grad.clone())?;
                    local.sgd_step(&grads, cfg.lr)?;
                    let t = env.compute.seconds(backward_flops(&local, rows), Tier::Device);
                    events.push(event(clock, t, actor, Action::DeviceBackward, 0, id, batch, None));
                    clock += t;

                    activation_bytes += a_bytes + g_bytes;
                    label_bytes += l_bytes;
                    gradients.push(record);
                }
                models.push(local);
                weights.push(shard.len() as f64);
            }
        }
        let ul = env.link.transfer_time(dev_bytes, LinkClass::DeviceCloud);
        events.push(event(
            clock,
            ul,
            actor,
            Action::ModelUpload,
            dev_bytes,
            id,
            None,
            Some(LinkClass::DeviceCloud),
        ));
        uploads_end = uploads_end.max(clock + ul);
    }

    let agg = env.compute.seconds(
        aggregation_flops(plan.selected.len(), split.device_part.param_count()),
        Tier::Cloud,
    );
    events.push(TraceEvent {
        t_start: uploads_end,
        t_end: uploads_end + agg,
        actor: Actor::Cloud,
        action: Action::Aggregation,
        bytes: 0,
        round,
        device: None,
        batch: None,
        link: None,
        label_bytes: 0,
    });

    let device_part = if models.is_empty() {
        split.device_part.clone()
    } else {
        fedavg(&models, &weights)?
    };
    Ok(SflRound {
        split: SplitModel {
            device_part,
            server_part: server,
            split_index: split.split_index,
        },
        events,
        gradients,
        activation_bytes,
        label_bytes,
        model_bytes: 2 * dev_bytes * plan.selected.len() as u64,
        mean_loss: loss_sum / loss_n.max(1) as f32,
        t_end: uploads_end + agg,
    })
}

/// Checks per-batch forward and backward locking in an SFL trace: the
/// server starts only after the device forward and the activation upload,
/// and the device backward starts only after the gradient arrives.
pub fn check_locking(events: &[TraceEvent]) -> Result<()> {
    use std::collections::HashMap;
    let mut chains: HashMap<(u32, u32), [Option<&TraceEvent>; 5]> = HashMap::new();
    for e in events {
        let slot = match e.action {
            Action::DeviceForward => 0,
            Action::ActivationUpload => 1,
            Action::ServerCompute => 2,
            Action::GradientDownload => 3,
            Action::DeviceBackward => 4,
            _ => continue,
        };
        let (Some(d), Some(b)) = (e.device, e.batch) else {
            return Err(Error::Trace(format!("{:?} without device and batch", e.action)));
        };
        chains.entry((d, b)).or_default()[slot] = Some(e);
    }
    const TOL: f64 = 1e-12;
    for ((d, b), chain) in chains {
        let Some(chain) = chain.into_iter().collect::<Option<Vec<_>>>() else {
            return Err(Error::Trace(format!("incomplete chain for device {d} batch {b}")));
        };
        for w in chain.windows(2) {
            if w[1].t_start + TOL < w[0].t_end {
                return Err(Error::Trace(format!(
                    "device {d} batch {b}: {:?} starts at {} before {:?} ends at {}",
                    w[1].action, w[1].t_start, w[0].action, w[0].t_end
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::fed::Device;
    use crate::nn::LayerStack;
    use crate::rng;
    use crate::simnet::round_time;

    fn setup(n: usize, batch: usize) -> (LayerStack, DevicePopulation, TrainConfig) {
        let mut r = rng::stream(5, "sfl-test", &[]);
        let model = LayerStack::mlp(&[3, 6, 5, 2], &mut r).unwrap();
        let x: Vec<f32> = (0..n * 3).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let ds = Dataset::new(Tensor::matrix(n, 3, x).unwrap(), y, 2).unwrap();
        let pop = DevicePopulation {
            devices: vec![Device {
                id: 0,
                indices: (0..n).collect(),
                shard: Some(ds),
            }],
        };
        (model, pop, TrainConfig { lr: 0.1, batch_size: batch, seed: 3 })
    }

    fn env<'a>(link: &'a LinkSpec, compute: &'a ComputeSpec) -> SflEnv<'a> {
        SflEnv {
            placement: ServerPlacement::Edge,
            link,
            compute,
            t0: 0.0,
        }
    }

    #[test]
    fn accounting_and_locking() {
        let (model, pop, cfg) = setup(32, 8);
        let split = model.split_at(2).unwrap();
        let plan = RoundPlan {
            round: 0,
            selected: vec![0],
            local_iterations: vec![4],
        };
        let (link, compute) = (LinkSpec::default(), ComputeSpec::default());
        let r = run_sfl_round(&split, &pop, &plan, &cfg, &env(&link, &compute)).unwrap();
        assert_eq!(r.activation_bytes, 4 * 8 * 5 * 8);
        assert_eq!(r.label_bytes, 4 * 8 * 2);
        assert_eq!(r.gradients.len(), 4);
        check_locking(&r.events).unwrap();
        let p = round_time(Regime::SflEdge, &r.events).unwrap();
        assert!((p.total() - r.t_end).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (model, pop, mut cfg) = setup(16, 4);
        cfg.lr = 0.0;
        let split = model.split_at(1).unwrap();
        let plan = RoundPlan {
            round: 2,
            selected: vec![0],
            local_iterations: vec![4],
        };
        let (link, compute) = (LinkSpec::default(), ComputeSpec::default());
        let r = run_sfl_round(&split, &pop, &plan, &cfg, &env(&link, &compute)).unwrap();
        assert_eq!(r.split, split);
        assert_eq!(r.activation_bytes, 4 * 4 * 6 * 8);
    }

    #[test]
    fn shape_drift_is_an_error() {
        let rec = GradientRecord {
            device_id: 1,
            batch_id: 2,
            grad: Tensor::zeros(vec![4, 3]),
        };
        assert!(rec.check_matches(&Tensor::zeros(vec![4, 3])).is_ok());
        assert!(rec.check_matches(&Tensor::zeros(vec![4, 2])).is_err());
    }

    #[test]
    fn locking_violation_detected() {
        let (model, pop, cfg) = setup(8, 8);
        let split = model.split_at(2).unwrap();
        let plan = RoundPlan {
            round: 0,
            selected: vec![0],
            local_iterations: vec![1],
        };
        let (link, compute) = (LinkSpec::default(), ComputeSpec::default());
        let mut r = run_sfl_round(&split, &pop, &plan, &cfg, &env(&link, &compute)).unwrap();
        let srv = r.events.iter_mut().find(|e| e.action == Action::ServerCompute).unwrap();
        srv.t_start -= 1.0;
        assert!(check_locking(&r.events).is_err());
    }
}
