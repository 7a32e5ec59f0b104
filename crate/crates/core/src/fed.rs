//! Classic federated learning: non-IID partitioning, client sampling, local
//! SGD and FedAvg.

use log::warn;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::LayerStack;
use crate::rng;
use crate::tensor::Tensor;

/// Anything that maps a feature batch to class logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for LayerStack {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.predict(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub num_devices: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("partition.alpha", format!("{} must be > 0", self.alpha)));
        }
        if self.num_devices == 0 {
            return Err(Error::config("devices.count", "need at least one device"));
        }
        Ok(())
    }
}

/// One device's local data. `indices` point into the full training set.
#[derive(Clone, Debug)]
pub struct Device {
    pub id: u32,
    pub indices: Vec<usize>,
    pub shard: Option<Dataset>,
}

impl Device {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Fixed mini-batches over the shard (row indices into `shard`).
    ///
    /// Batch composition is fixed per device for the whole run; only the
    /// visiting order changes between rounds.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, "batches", &[u64::from(self.id)]));
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn batch_count(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size.max(1))
    }
}

#[derive(Clone, Debug)]
pub struct DevicePopulation {
    pub devices: Vec<Device>,
}

impl DevicePopulation {
    pub fn device(&self, id: u32) -> Option<&Device> {
        self.devices.get(id as usize).filter(|d| d.id == id)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.devices.iter().map(Device::len).sum()
    }
}

fn largest_remainder(props: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let rest = n.saturating_sub(assigned);
    let mut frac: Vec<(f64, usize)> = props
        .iter()
        .enumerate()
        .map(|(i, p)| (p * n as f64 - (p * n as f64).floor(), i))
        .collect();
    frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in frac.iter().take(rest) {
        counts[i] += 1;
    }
    counts
}

/// Splits `dataset` over devices with per-class Dirichlet(α) proportions.
pub fn dirichlet_partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<DevicePopulation> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot partition an empty dataset".into()));
    }
    let n_dev = spec.num_devices;
    let gamma = Gamma::new(spec.alpha, 1.0)
        .map_err(|e| Error::config("partition.alpha", e.to_string()))?;
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_dev];

    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = dataset
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let c = class as u64;
        members.shuffle(&mut rng::stream(spec.seed, "partition-shuffle", &[c]));
        let mut prng = rng::stream(spec.seed, "partition-dirichlet", &[c]);
        let mut props: Vec<f64> = (0..n_dev).map(|_| gamma.sample(&mut prng)).collect();
        let sum: f64 = props.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            props.iter_mut().for_each(|p| *p /= sum);
        } else {
            // every gamma draw underflowed: all mass on one device
            let winner = (rng::derive_seed(spec.seed, "partition-fallback", &[c]) % n_dev as u64)
                as usize;
            props = (0..n_dev).map(|i| if i == winner { 1.0 } else { 0.0 }).collect();
        }
        let counts = largest_remainder(&props, members.len());
        let mut start = 0;
        for (dev, &cnt) in counts.iter().enumerate() {
            assigned[dev].extend_from_slice(&members[start..start + cnt]);
            start += cnt;
        }
    }

    let devices = assigned
        .into_iter()
        .enumerate()
        .map(|(i, mut idx)| {
            idx.sort_unstable();
            let shard = if idx.is_empty() {
                None
            } else {
                Some(dataset.subset(&idx)?)
            };
            Ok(Device {
                id: i as u32,
                indices: idx,
                shard,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DevicePopulation { devices })
}

/// Shannon entropy (nats) of a device's label histogram.
pub fn label_entropy(device: &Device, num_classes: usize) -> f64 {
    let Some(shard) = &device.shard else {
        return 0.0;
    };
    let n = shard.len() as f64;
    let mut h = vec![0usize; num_classes];
    shard.labels().iter().for_each(|&y| h[y] += 1);
    h.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: u32,
    pub selected: Vec<u32>,
    /// Mini-batches each selected device runs (one local epoch).
    pub local_iterations: Vec<usize>,
}

/// Uniformly samples `k` distinct devices for `round`.
pub fn plan_round(
    population: &DevicePopulation,
    k: usize,
    round: u32,
    batch_size: usize,
    seed: u64,
) -> Result<RoundPlan> {
    let n = population.len();
    if k == 0 || k > n {
        return Err(Error::config(
            "devices.per_round",
            format!("{k} not in 1..={n}"),
        ));
    }
    let mut r = rng::stream(seed, "select", &[u64::from(round)]);
    let mut selected: Vec<u32> = rand::seq::index::sample(&mut r, n, k)
        .into_iter()
        .map(|i| population.devices[i].id)
        .collect();
    selected.sort_unstable();
    let local_iterations = selected
        .iter()
        .map(|&id| population.devices[id as usize].batch_count(batch_size))
        .collect();
    Ok(RoundPlan {
        round,
        selected,
        local_iterations,
    })
}

/// Weighted parameter average `Σ wₖ·pₖ / Σ wₖ`.
pub fn fedavg(models: &[LayerStack], weights: &[f64]) -> Result<LayerStack> {
    let Some(first) = models.first() else {
        return Err(Error::InvalidInput("fedavg over zero models".into()));
    };
    if models.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} models with {} weights",
            models.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput(format!("fedavg weight {w} must be positive")));
    }
    for (m, model) in models.iter().enumerate().skip(1) {
        if model.len() != first.len() {
            return Err(Error::InvalidInput(format!(
                "model {m} has {} layers, expected {}",
                model.len(),
                first.len()
            )));
        }
        for (k, (a, b)) in model.layers().iter().zip(first.layers()).enumerate() {
            if a.in_dim() != b.in_dim() || a.out_dim() != b.out_dim() || a.activation() != b.activation()
            {
                return Err(Error::Layer {
                    layer: k,
                    message: format!("model {m} differs structurally"),
                });
            }
        }
    }
    let total: f64 = weights.iter().sum();
    let mut acc: Vec<f64> = vec![0.0; first.param_count()];
    for (model, &w) in models.iter().zip(weights) {
        for (a, p) in acc.iter_mut().zip(model.param_values()) {
            *a += w * f64::from(p);
        }
    }
    let mut out = first.clone();
    let mut it = acc.into_iter().map(|v| (v / total) as f32);
    for layer in out.layers_mut() {
        for p in layer.weight_mut().data_mut() {
            *p = it.next().expect("param count");
        }
        for p in layer.bias_mut().data_mut() {
            *p = it.next().expect("param count");
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

/// One mini-batch visited during local training.
#[derive(Clone, Debug)]
pub struct BatchVisit {
    pub batch_id: u32,
    pub labels: Vec<usize>,
    /// Output of the tap layer at the time of the visit, when requested.
    pub tap: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub device_id: u32,
    pub model: LayerStack,
    pub samples: usize,
    pub visits: Vec<BatchVisit>,
    pub mean_loss: f32,
}

/// Batch ids in the order a device visits them during `round`.
pub fn visit_order(device: &Device, round: u32, cfg: &TrainConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..device.batch_count(cfg.batch_size)).collect();
    order.shuffle(&mut rng::stream(
        cfg.seed,
        "batch-order",
        &[u64::from(round), u64::from(device.id)],
    ));
    order
}

/// One local epoch of SGD on a device's shard.
pub fn train_local(
    global: &LayerStack,
    device: &Device,
    round: u32,
    cfg: &TrainConfig,
    tap_layer: Option<usize>,
) -> Result<LocalUpdate> {
    let mut model = global.clone();
    let Some(shard) = &device.shard else {
        return Ok(LocalUpdate {
            device_id: device.id,
            model,
            samples: 0,
            visits: Vec::new(),
            mean_loss: 0.0,
        });
    };
    let batches = device.batches(cfg.batch_size, cfg.seed);
    let mut visits = Vec::with_capacity(batches.len());
    let mut loss_sum = 0.0f32;
    for b in visit_order(device, round, cfg) {
        let (x, y) = shard.batch(&batches[b])?;
        let (_, tape) = model.forward(&x)?;
        let tap = match tap_layer {
            Some(t) => Some(
                tape.layer_input(t)
                    .cloned()
                    .ok_or(Error::InvalidSplit {
                        index: t,
                        layers: model.len(),
                    })?,
            ),
            None => None,
        };
        let bw = model.backward(&tape, &y)?;
        model.sgd_step(&bw.grads, cfg.lr)?;
        loss_sum += bw.loss;
        visits.push(BatchVisit {
            batch_id: b as u32,
            labels: y,
            tap,
        });
    }
    let mean_loss = loss_sum / visits.len().max(1) as f32;
    Ok(LocalUpdate {
        device_id: device.id,
        model,
        samples: shard.len(),
        visits,
        mean_loss,
    })
}

#[derive(Clone, Debug)]
pub struct FlRound {
    pub global: LayerStack,
    pub updates: Vec<LocalUpdate>,
    /// Download plus upload of the model for every selected device.
    pub model_bytes: u64,
}

/// Trains every selected device from `global` and FedAvg's the results.
///
/// Devices train in parallel; results are combined in plan order.
pub fn run_fl_round(
    global: &LayerStack,
    population: &DevicePopulation,
    plan: &RoundPlan,
    cfg: &TrainConfig,
    tap_layer: Option<usize>,
) -> Result<FlRound> {
    let devices = plan
        .selected
        .iter()
        .map(|&id| {
            population.device(id).ok_or_else(|| {
                Error::InvalidInput(format!("round plan selects unknown device {id}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let updates = devices
        .par_iter()
        .map(|d| train_local(global, d, plan.round, cfg, tap_layer))
        .collect::<Result<Vec<_>>>()?;

    let (models, weights): (Vec<LayerStack>, Vec<f64>) = updates
        .iter()
        .filter(|u| {
            if u.samples == 0 {
                warn!("device {} has an empty shard; skipped", u.device_id);
            }
            u.samples > 0
        })
        .map(|u| (u.model.clone(), u.samples as f64))
        .unzip();
    let new_global = if models.is_empty() {
        global.clone()
    } else {
        fedavg(&models, &weights)?
    };
    Ok(FlRound {
        global: new_global,
        updates,
        model_bytes: 2 * global.param_bytes() * plan.selected.len() as u64,
    })
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(model: &dyn Classifier, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(512) {
        let (x, y) = test.batch(chunk)?;
        let pred = model.logits(&x)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::nn::{Activation, Dense};

    fn scalar_model(v: f32) -> LayerStack {
        let w = Tensor::from_rows(&[[v]]).unwrap();
        LayerStack::new(vec![Dense::new(w, Tensor::new(vec![1], vec![v]).unwrap(), Activation::Identity).unwrap()])
            .unwrap()
    }

    #[test]
    fn weighted_mean_of_scalars() {
        let avg = fedavg(&[scalar_model(0.0), scalar_model(3.0)], &[1.0, 2.0]).unwrap();
        assert_eq!(avg.layers()[0].weight().data()[0], 2.0);
        assert_eq!(avg.layers()[0].bias().data()[0], 2.0);
    }

    #[test]
    fn fedavg_of_identical_models_is_exact() {
        let mut r = rng::stream(5, "t", &[]);
        let m = LayerStack::mlp(&[4, 6, 3], &mut r).unwrap();
        let avg = fedavg(&[m.clone(), m.clone(), m.clone()], &[3.0, 17.0, 101.0]).unwrap();
        assert_eq!(avg, m);
    }

    #[test]
    fn fedavg_rejects_structural_mismatch() {
        let mut r = rng::stream(5, "t", &[]);
        let a = LayerStack::mlp(&[4, 6, 3], &mut r).unwrap();
        let b = LayerStack::mlp(&[4, 5, 3], &mut r).unwrap();
        assert!(matches!(fedavg(&[a.clone(), b], &[1.0, 1.0]), Err(Error::Layer { layer: 0, .. })));
        assert!(fedavg(std::slice::from_ref(&a), &[0.0]).is_err());
        assert!(fedavg(&[], &[]).is_err());
    }

    #[test]
    fn largest_remainder_is_exact() {
        let c = largest_remainder(&[0.5, 0.3, 0.2], 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
        assert_eq!(c, vec![4, 2, 1]);
        let c = largest_remainder(&[1.0, 0.0], 0);
        assert_eq!(c, vec![0, 0]);
    }

    #[test]
    fn huge_alpha_is_near_uniform() {
        let spec = SyntheticSpec::Blobs {
            classes: 4,
            features: 2,
            clusters_per_class: 1,
            center_scale: 1.0,
            noise: 1.0,
            train: 400,
            test: 4,
        };
        let (train, _) = spec.generate(3).unwrap();
        let pop = dirichlet_partition(
            &train,
            &PartitionSpec {
                alpha: 1e6,
                num_devices: 4,
                seed: 11,
            },
        )
        .unwrap();
        for d in &pop.devices {
            for &c in &d.shard.as_ref().unwrap().class_histogram() {
                assert!((22..=28).contains(&c), "class count {c}");
            }
        }
    }

    #[test]
    fn tiny_alpha_does_not_panic() {
        let spec = SyntheticSpec::Blobs {
            classes: 3,
            features: 2,
            clusters_per_class: 1,
            center_scale: 1.0,
            noise: 1.0,
            train: 30,
            test: 3,
        };
        let (train, _) = spec.generate(3).unwrap();
        let pop = dirichlet_partition(
            &train,
            &PartitionSpec {
                alpha: 1e-4,
                num_devices: 50,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(pop.total_samples(), 30);
        assert!(pop.devices.iter().any(Device::is_empty));
    }

    #[test]
    fn plan_is_distinct_and_seeded() {
        let pop = DevicePopulation {
            devices: (0..10)
                .map(|i| Device {
                    id: i,
                    indices: vec![0; 33],
                    shard: None,
                })
                .collect(),
        };
        let a = plan_round(&pop, 4, 2, 16, 99).unwrap();
        let b = plan_round(&pop, 4, 2, 16, 99).unwrap();
        assert_eq!(a, b);
        let mut s = a.selected.clone();
        s.dedup();
        assert_eq!(s.len(), 4);
        assert_eq!(a.local_iterations, vec![3; 4]);
        assert!(plan_round(&pop, 11, 0, 16, 1).is_err());
    }

    struct Constant(usize, usize);
    impl Classifier for Constant {
        fn logits(&self, x: &Tensor) -> Result<Tensor> {
            let mut t = Tensor::zeros(vec![x.rows(), self.1]);
            for i in 0..x.rows() {
                t.data_mut()[i * self.1 + self.0] = 1.0;
            }
            Ok(t)
        }
    }

    #[test]
    fn constant_classifier_scores_one_over_c() {
        let spec = SyntheticSpec::Blobs {
            classes: 4,
            features: 2,
            clusters_per_class: 1,
            center_scale: 1.0,
            noise: 1.0,
            train: 8,
            test: 400,
        };
        let (_, test) = spec.generate(3).unwrap();
        assert_eq!(evaluate(&Constant(2, 4), &test).unwrap(), 0.25);
    }
}
