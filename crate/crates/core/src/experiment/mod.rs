//! Runs every configured regime on shared data, partitions and client
//! selections, and writes metrics, traces, models and reports.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{
    CacheConfig, ControllerConfig, DatasetConfig, DevicesConfig, ExperimentConfig, ModelConfig,
    OverlayConfig, PartitionConfig,
};

use crate::data::Dataset;
use crate::ensemble::{EnsembleMode, EnsembleSpec, Member};
use crate::error::{Error, Result};
use crate::fed::{
    dirichlet_partition, evaluate, plan_round, run_fl_round, DevicePopulation, LocalUpdate,
    PartitionSpec, RoundPlan, TrainConfig,
};
use crate::model_io::save_model;
use crate::nn::LayerStack;
use crate::overlay::controller::controller_receive;
use crate::overlay::store::persist_cache;
use crate::overlay::{
    run_afl_step, ActivationRecord, CacheKey, ControllerState, Decision, OverlaySpec, TierCache,
};
use crate::rng;
use crate::sfl::{run_sfl_round, ServerPlacement, SflEnv};
use crate::simnet::cost::{LABEL_BYTES, VALUE_BYTES};
use crate::simnet::metrics::write_csv;
use crate::simnet::trace::{schedule_fl_round, write_jsonl, AflWork, DeviceWork, SentBatch};
use crate::simnet::{
    backward_flops, forward_flops, Action, Actor, LinkClass, PhaseTimes, Regime, RoundMetrics,
    TraceEvent,
};

/// Everything shared by the regimes of one experiment.
#[derive(Clone, Debug)]
pub struct Setup {
    pub train: Dataset,
    pub test: Dataset,
    pub population: DevicePopulation,
    pub plans: Vec<RoundPlan>,
    /// Initial device model.
    pub small: LayerStack,
    /// Initial overlay models, one per configured overlay.
    pub overlays: Vec<LayerStack>,
    /// Devices feeding each overlay.
    pub coverage: Vec<BTreeSet<u32>>,
}

impl Setup {
    /// Initial large model: the device model up to the tap followed by the
    /// first overlay.
    pub fn large(&self, tap_layer: usize) -> Result<LayerStack> {
        let first = self
            .overlays
            .first()
            .ok_or_else(|| Error::config("overlays", "list at least one overlay"))?;
        self.small.prefix(tap_layer)?.concat(first)
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    let population = dirichlet_partition(
        &train,
        &PartitionSpec {
            alpha: cfg.partition.alpha,
            num_devices: cfg.devices.count,
            seed: rng::derive_seed(cfg.seed, "partition", &[]),
        },
    )?;
    let plans = (0..cfg.rounds)
        .map(|r| plan_round(&population, cfg.devices.per_round, r, cfg.batch_size, cfg.seed))
        .collect::<Result<Vec<_>>>()?;

    let classes = train.num_classes();
    let mut dims = vec![train.feature_dim()];
    dims.extend(&cfg.model.hidden);
    dims.push(classes);
    let small = LayerStack::mlp(&dims, &mut rng::stream(cfg.seed, "init-small", &[]))?;
    let tap_width = small.width_after(cfg.tap_layer).unwrap_or_default();
    let overlays = cfg
        .overlays
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let mut dims = vec![tap_width];
            dims.extend(&o.hidden);
            dims.push(classes);
            LayerStack::mlp(&dims, &mut rng::stream(cfg.seed, "init-overlay", &[i as u64]))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = population.len();
    let mut perm: Vec<u32> = population.devices.iter().map(|d| d.id).collect();
    perm.shuffle(&mut rng::stream(cfg.seed, "coverage", &[]));
    let mut offset = 0usize;
    let coverage = cfg
        .overlays
        .iter()
        .map(|o| {
            let take = ((o.coverage * n as f64).ceil() as usize).clamp(1, n);
            let set = (0..take).map(|i| perm[(offset + i) % n]).collect();
            offset += take;
            set
        })
        .collect();

    Ok(Setup {
        train,
        test,
        population,
        plans,
        small,
        overlays,
        coverage,
    })
}

/// Edge-side outcome of an EMO run.
#[derive(Clone, Debug)]
pub struct EmoOutcome {
    pub overlays: Vec<OverlaySpec>,
    pub caches: Vec<TierCache>,
    pub controllers: Vec<ControllerState>,
    pub ensemble: EnsembleSpec,
    /// Accuracy of the FL model alone after each round.
    pub base_accuracy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RegimeResult {
    pub regime: Regime,
    pub rows: Vec<RoundMetrics>,
    /// Event trace of every round.
    pub traces: Vec<Vec<TraceEvent>>,
    /// Final model; for SFL the joined device and server parts.
    pub model: LayerStack,
    pub emo: Option<EmoOutcome>,
}

fn train_cfg(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    }
}

fn device_work(updates: &[LocalUpdate]) -> Vec<DeviceWork> {
    updates
        .iter()
        .map(|u| DeviceWork {
            device: u.device_id,
            batches: u.visits.iter().map(|v| (v.batch_id, v.labels.len())).collect(),
        })
        .collect()
}

fn run_fl(cfg: &ExperimentConfig, setup: &Setup, regime: Regime) -> Result<RegimeResult> {
    let mut global = match regime {
        Regime::FlSmall => setup.small.clone(),
        _ => setup.large(cfg.tap_layer)?,
    };
    let tc = train_cfg(cfg);
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut t0 = 0.0;
    for plan in &setup.plans {
        let fl = run_fl_round(&global, &setup.population, plan, &tc, None)?;
        let work = device_work(&fl.updates);
        let (events, t_end) =
            schedule_fl_round(plan.round, t0, &global, &work, &[], &[], &cfg.network, &cfg.compute);
        global = fl.global;
        let acc = evaluate(&global, &setup.test)?;
        rows.push(RoundMetrics::from_trace(regime, plan.round, acc, &events, 0, 0)?);
        traces.push(events);
        t0 = t_end;
    }
    Ok(RegimeResult {
        regime,
        rows,
        traces,
        model: global,
        emo: None,
    })
}

fn run_sfl(cfg: &ExperimentConfig, setup: &Setup, regime: Regime) -> Result<RegimeResult> {
    let placement = ServerPlacement::from_regime(regime)
        .ok_or_else(|| Error::InvalidInput(format!("{regime} is not an SFL regime")))?;
    let mut split = setup.large(cfg.tap_layer)?.split_at(cfg.split_index)?;
    let tc = train_cfg(cfg);
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut t0 = 0.0;
    for plan in &setup.plans {
        let env = SflEnv {
            placement,
            link: &cfg.network,
            compute: &cfg.compute,
            t0,
        };
        let r = run_sfl_round(&split, &setup.population, plan, &tc, &env)?;
        split = r.split;
        let acc = evaluate(&split.join()?, &setup.test)?;
        rows.push(RoundMetrics::from_trace(regime, plan.round, acc, &r.events, 0, 0)?);
        traces.push(r.events);
        t0 = r.t_end;
    }
    Ok(RegimeResult {
        regime,
        rows,
        traces,
        model: split.join()?,
        emo: None,
    })
}

fn ensemble_of(base: &LayerStack, tap_layer: usize, overlays: &[OverlaySpec], cfg: &ExperimentConfig) -> Result<EnsembleSpec> {
    let members = overlays
        .iter()
        .zip(&cfg.overlays)
        .map(|(o, c)| Member {
            edge_server_id: o.edge_server_id,
            model: o.model.clone(),
            weight: c.coverage,
        })
        .collect();
    EnsembleSpec::new(base.clone(), tap_layer, members)
}

fn run_emo(cfg: &ExperimentConfig, setup: &Setup) -> Result<RegimeResult> {
    let tap = cfg.tap_layer;
    let mut global = setup.small.clone();
    let mut overlays = setup
        .overlays
        .iter()
        .zip(&setup.coverage)
        .enumerate()
        .map(|(e, (m, cov))| OverlaySpec::new(e as u32, cov.clone(), m.clone(), tap, &global))
        .collect::<Result<Vec<_>>>()?;
    let mut caches = (0..overlays.len())
        .map(|_| TierCache::new(cfg.cache.memory_capacity))
        .collect::<Result<Vec<_>>>()?;
    let mut controllers = (0..overlays.len())
        .map(|_| ControllerState::new(cfg.controller.max_interval))
        .collect::<Result<Vec<_>>>()?;
    let svcca = cfg.svcca();
    let tc = train_cfg(cfg);
    let width = global.width_after(tap).unwrap_or_default() as u64;

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut base_accuracy = Vec::new();
    let mut t0 = 0.0;
    let last_round = setup.plans.last().map(|p| p.round);
    for plan in &setup.plans {
        // Overlay training runs on the cache as it stood when the round began.
        let mut afl = Vec::new();
        for (e, ((ov, cache), oc)) in overlays.iter_mut().zip(&mut caches).zip(&cfg.overlays).enumerate() {
            if cache.is_empty() {
                continue;
            }
            let mut r = rng::stream(cfg.seed, "afl", &[u64::from(plan.round), e as u64]);
            let lr = oc.lr.unwrap_or(cfg.lr);
            for _ in 0..oc.afl_steps {
                run_afl_step(ov, cache, oc.sample_size, &mut r, lr)?;
            }
            let rows_per_step = oc.sample_size * cfg.batch_size;
            afl.push(AflWork {
                edge: e as u32,
                steps: oc.afl_steps,
                flops_per_step: forward_flops(&ov.model, rows_per_step)
                    + backward_flops(&ov.model, rows_per_step),
            });
        }

        let fl = run_fl_round(&global, &setup.population, plan, &tc, Some(tap))?;
        let (mut sent_n, mut skipped_n) = (0u64, 0u64);
        let mut sent = Vec::new();
        for u in &fl.updates {
            for v in &u.visits {
                let key = CacheKey::new(u.device_id, v.batch_id);
                for (e, ov) in overlays.iter().enumerate() {
                    if !ov.covers(u.device_id) {
                        continue;
                    }
                    let send = !cfg.controller.enabled
                        || controllers[e].transmission_decision(key) == Decision::SendRequired;
                    if !send {
                        skipped_n += 1;
                        continue;
                    }
                    let act = v.tap.clone().ok_or_else(|| {
                        Error::InvalidInput("local training returned no tap activation".into())
                    })?;
                    let rows = v.labels.len() as u64;
                    let rec = ActivationRecord::new(key, act, v.labels.clone(), plan.round)?;
                    if cfg.controller.enabled {
                        controller_receive(rec, &mut controllers[e], &mut caches[e], &svcca)?;
                    } else {
                        caches[e].insert(rec);
                    }
                    sent_n += 1;
                    sent.push(SentBatch {
                        device: u.device_id,
                        batch: v.batch_id,
                        edge: e as u32,
                        bytes: VALUE_BYTES * rows * width + LABEL_BYTES * rows,
                        label_bytes: LABEL_BYTES * rows,
                    });
                }
            }
        }

        let work = device_work(&fl.updates);
        let (mut events, t_end) =
            schedule_fl_round(plan.round, t0, &global, &work, &sent, &afl, &cfg.network, &cfg.compute);
        global = fl.global;
        if Some(plan.round) == last_round {
            for ov in &overlays {
                let bytes = ov.model.param_bytes();
                let dur = cfg.network.transfer_time(bytes, LinkClass::EdgeCloud);
                events.push(TraceEvent {
                    t_start: t_end,
                    t_end: t_end + dur,
                    actor: Actor::Edge(ov.edge_server_id),
                    action: Action::OverlayUpload,
                    bytes,
                    round: plan.round,
                    device: None,
                    batch: None,
                    link: Some(LinkClass::EdgeCloud),
                    label_bytes: 0,
                });
            }
        }

        let ensemble = ensemble_of(&global, tap, &overlays, cfg)?;
        let acc = evaluate(&ensemble, &setup.test)?;
        base_accuracy.push(evaluate(&global, &setup.test)?);
        rows.push(RoundMetrics::from_trace(Regime::Emo, plan.round, acc, &events, sent_n, skipped_n)?);
        traces.push(events);
        t0 = t_end;
    }

    let ensemble = ensemble_of(&global, tap, &overlays, cfg)?;
    Ok(RegimeResult {
        regime: Regime::Emo,
        rows,
        traces,
        model: global,
        emo: Some(EmoOutcome {
            overlays,
            caches,
            controllers,
            ensemble,
            base_accuracy,
        }),
    })
}

/// Runs one regime on a prepared setup.
pub fn run_regime(cfg: &ExperimentConfig, setup: &Setup, regime: Regime) -> Result<RegimeResult> {
    info!("running {regime} for {} rounds", setup.plans.len());
    match regime {
        Regime::FlSmall | Regime::FlLarge => run_fl(cfg, setup, regime),
        Regime::SflCloud | Regime::SflEdge => run_sfl(cfg, setup, regime),
        Regime::Emo => run_emo(cfg, setup),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub best_accuracy: f64,
    pub best_round: u32,
    pub final_accuracy: f64,
    pub mean_bytes_per_round: f64,
    pub mean_bytes_device_cloud: f64,
    pub mean_bytes_device_edge: f64,
    pub mean_bytes_edge_cloud: f64,
    pub mean_model_bytes: f64,
    pub mean_activation_bytes: f64,
    pub mean_label_bytes: f64,
    pub mean_round_time: f64,
    pub mean_phase_times: PhaseTimes,
    pub total_bytes: u64,
    pub total_time: f64,
    pub sent_per_round: Vec<u64>,
    pub skipped_per_round: Vec<u64>,
}

impl RegimeSummary {
    pub fn from_rows(rows: &[RoundMetrics]) -> Result<Self> {
        let Some(best) = rows.iter().max_by(|a, b| {
            a.accuracy.total_cmp(&b.accuracy).then(b.round.cmp(&a.round))
        }) else {
            return Err(Error::InvalidInput("no rounds to summarize".into()));
        };
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&RoundMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(RegimeSummary {
            best_accuracy: best.accuracy,
            best_round: best.round,
            final_accuracy: rows[rows.len() - 1].accuracy,
            mean_bytes_per_round: mean(&|r| r.bytes_total as f64),
            mean_bytes_device_cloud: mean(&|r| r.bytes_device_cloud as f64),
            mean_bytes_device_edge: mean(&|r| r.bytes_device_edge as f64),
            mean_bytes_edge_cloud: mean(&|r| r.bytes_edge_cloud as f64),
            mean_model_bytes: mean(&|r| r.model_bytes as f64),
            mean_activation_bytes: mean(&|r| r.activation_bytes as f64),
            mean_label_bytes: mean(&|r| r.label_bytes as f64),
            mean_round_time: mean(&|r| r.time_total),
            mean_phase_times: PhaseTimes {
                device_compute: mean(&|r| r.time_device_compute),
                transfer: mean(&|r| r.time_transfer),
                server_compute: mean(&|r| r.time_server_compute),
                aggregation: mean(&|r| r.time_aggregation),
            },
            total_bytes: rows.iter().map(|r| r.bytes_total).sum(),
            total_time: rows.iter().map(|r| r.time_total).sum(),
            sent_per_round: rows.iter().map(|r| r.sent).collect(),
            skipped_per_round: rows.iter().map(|r| r.skipped).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub base_accuracy: f64,
    /// Accuracy of the base prefix composed with each overlay.
    pub horizontal_accuracy: Vec<f64>,
    pub vertical_accuracy: f64,
    pub vertical_with_base_accuracy: f64,
    pub vertical_weighted_accuracy: f64,
}

impl EnsembleReport {
    pub fn measure(ensemble: &EnsembleSpec, test: &Dataset) -> Result<Self> {
        let mut e = ensemble.clone();
        let horizontal_accuracy = (0..e.members().len())
            .map(|i| {
                e.mode = EnsembleMode::HorizontalSingle(i);
                evaluate(&e, test)
            })
            .collect::<Result<Vec<_>>>()?;
        e.mode = EnsembleMode::VerticalAll;
        let vertical_accuracy = evaluate(&e, test)?;
        e.include_base_logits = true;
        let vertical_with_base_accuracy = evaluate(&e, test)?;
        e.include_base_logits = false;
        e.weighted = true;
        let vertical_weighted_accuracy = evaluate(&e, test)?;
        Ok(EnsembleReport {
            base_accuracy: evaluate(e.base(), test)?,
            horizontal_accuracy,
            vertical_accuracy,
            vertical_with_base_accuracy,
            vertical_weighted_accuracy,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub rounds: u32,
    pub regimes: BTreeMap<Regime, RegimeSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleReport>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub results: Vec<RegimeResult>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn result(&self, regime: Regime) -> Option<&RegimeResult> {
        self.results.iter().find(|r| r.regime == regime)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Writes `<out>/<regime>/{metrics.csv, trace.jsonl, model.emod}`; EMO adds
/// `ensemble/` and `cache/edge<i>/`.
pub fn write_regime(out: &Path, result: &RegimeResult) -> Result<()> {
    let dir = out.join(result.regime.name());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_csv(&dir.join("metrics.csv"), &result.rows)?;
    let events: Vec<TraceEvent> = result.traces.iter().flatten().cloned().collect();
    write_jsonl(&dir.join("trace.jsonl"), &events)?;
    save_model(&dir.join("model.emod"), &result.model)?;
    if let Some(emo) = &result.emo {
        let ens_dir = dir.join("ensemble");
        std::fs::create_dir_all(&ens_dir).map_err(|e| Error::io(&ens_dir, e))?;
        emo.ensemble.save(&ens_dir.join("ensemble.json"))?;
        for (e, (cache, ctl)) in emo.caches.iter().zip(&emo.controllers).enumerate() {
            persist_cache(&dir.join("cache").join(format!("edge{e}")), cache, Some(ctl))?;
        }
    }
    Ok(())
}

/// Runs all configured regimes and writes their artifacts under
/// `cfg.output_dir`, together with `config.json`, `test.dset` and
/// `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let setup = prepare(cfg)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("config.json"), cfg.to_json()?).map_err(|e| Error::io(out, e))?;
    setup.test.save(&out.join("test.dset"))?;

    let mut results = Vec::new();
    let mut regimes = BTreeMap::new();
    let mut ensemble = None;
    for &regime in &cfg.regimes {
        let result = run_regime(cfg, &setup, regime)?;
        write_regime(out, &result)?;
        regimes.insert(regime, RegimeSummary::from_rows(&result.rows)?);
        if let Some(emo) = &result.emo {
            let report = EnsembleReport::measure(&emo.ensemble, &setup.test)?;
            write_json(&out.join("ensemble_report.json"), &report)?;
            ensemble = Some(report);
        }
        results.push(result);
    }
    let summary = Summary {
        seed: cfg.seed,
        rounds: cfg.rounds,
        regimes,
        ensemble,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(ExperimentReport { results, summary })
}
