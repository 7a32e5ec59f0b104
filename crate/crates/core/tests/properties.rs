mod common;

use std::collections::BTreeSet;

use common::{gaussian, random_batch};
use edgefl_core::data::SyntheticSpec;
use edgefl_core::ensemble::{EnsembleSpec, Member};
use edgefl_core::fed::{dirichlet_partition, fedavg, PartitionSpec};
use edgefl_core::overlay::{cache_sample, ActivationRecord, CacheKey, ControllerState, TierCache};
use edgefl_core::rng;
use edgefl_core::simnet::trace::{schedule_fl_round, AflWork, DeviceWork, SentBatch};
use edgefl_core::simnet::{round_time, ComputeSpec, LinkSpec, Regime, RoundMetrics};
use edgefl_core::svcca::{svcca_score, ActivationMatrix, SvccaConfig};
use edgefl_core::{LayerStack, Tensor};
use proptest::prelude::*;

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..7, 3..6)
}

fn model(dims: &[usize], seed: u64) -> LayerStack {
    LayerStack::mlp(dims, &mut rng::stream(seed, "prop-model", &[])).unwrap()
}

fn scaled_tail(m: &LayerStack, c: f32) -> LayerStack {
    let mut m = m.clone();
    let last = m.layers_mut().last_mut().unwrap();
    last.weight_mut().scale(c);
    last.bias_mut().scale(c);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_then_join_is_identity(dims in dims_strategy(), seed in any::<u64>(), j_frac in 0.0f64..1.0) {
        let m = model(&dims, seed);
        let j = 1 + ((m.len() - 1) as f64 * j_frac) as usize;
        let j = j.min(m.len() - 1);
        let split = m.split_at(j).unwrap();
        prop_assert_eq!(split.join().unwrap(), m.clone());
        let (x, _) = random_batch(3, dims[0], 2, &mut rng::stream(seed, "x", &[]));
        let via = split.server_part.predict(&split.device_part.predict(&x).unwrap()).unwrap();
        prop_assert_eq!(via, m.predict(&x).unwrap());
    }

    #[test]
    fn training_keeps_values_finite(dims in dims_strategy(), seed in any::<u64>(), lr in 0.0f32..0.5) {
        let mut m = model(&dims, seed);
        let classes = *dims.last().unwrap();
        let mut r = rng::stream(seed, "train", &[]);
        for _ in 0..5 {
            let (x, y) = random_batch(4, dims[0], classes, &mut r);
            let loss = m.train_batch(&x, &y, lr).unwrap();
            prop_assert!(loss.is_finite());
        }
        prop_assert!(m.param_values().all(f32::is_finite));
    }

    #[test]
    fn svcca_symmetric_and_scale_invariant(seed in any::<u64>(), c in 0.01f32..100.0) {
        let mut r = rng::stream(seed, "svcca-prop", &[]);
        let (n, p, q) = (40, 4, 3);
        let a = gaussian(n, p, &mut r);
        let b = gaussian(n, q, &mut r);
        let cfg = SvccaConfig::default();
        let s = |x: &[f32], px, y: &[f32], py| {
            svcca_score(
                &ActivationMatrix::new(n, px, x).unwrap(),
                &ActivationMatrix::new(n, py, y).unwrap(),
                &cfg,
            )
            .unwrap()
            .value
        };
        let ab = s(&a, p, &b, q);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - s(&b, q, &a, p)).abs() <= 1e-6);
        let scaled: Vec<f32> = a.iter().map(|v| v * c).collect();
        prop_assert!((ab - s(&scaled, p, &b, q)).abs() <= 1e-6);
    }

    #[test]
    fn partition_assigns_every_sample_once(seed in any::<u64>(), alpha in 0.05f64..5.0, devices in 1usize..30) {
        let (train, _) = SyntheticSpec::Blobs {
            classes: 3,
            features: 2,
            clusters_per_class: 1,
            center_scale: 1.0,
            noise: 1.0,
            train: 150,
            test: 3,
        }
        .generate(seed)
        .unwrap();
        let pop = dirichlet_partition(&train, &PartitionSpec { alpha, num_devices: devices, seed }).unwrap();
        prop_assert_eq!(pop.len(), devices);
        let mut all: Vec<usize> = pop.devices.iter().flat_map(|d| d.indices.iter().copied()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..train.len()).collect::<Vec<_>>());
    }

    #[test]
    fn fedavg_of_copies_is_the_model(dims in dims_strategy(), seed in any::<u64>(), w in prop::collection::vec(0.1f64..10.0, 1..5)) {
        let m = model(&dims, seed);
        let copies = vec![m.clone(); w.len()];
        let avg = fedavg(&copies, &w).unwrap();
        let diff = avg.param_values().zip(m.param_values()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(diff <= 1e-6 * m.param_values().map(f32::abs).fold(1.0, f32::max));
    }

    #[test]
    fn cache_invariants_hold(seed in any::<u64>(), cap in 1usize..10, ops in prop::collection::vec((any::<bool>(), 0u32..12, 1usize..8), 1..80)) {
        let mut r = rng::stream(seed, "cache-prop", &[]);
        let mut cache = TierCache::new(cap).unwrap();
        let mut inserted = BTreeSet::new();
        for (round, (insert, id, n)) in ops.into_iter().enumerate() {
            if insert || cache.is_empty() {
                let key = CacheKey::new(id % 4, id / 4);
                let (t, y) = random_batch(2, 3, 2, &mut r);
                cache.insert(ActivationRecord::new(key, t, y, round as u32).unwrap());
                inserted.insert(key);
                prop_assert_eq!(cache.get(&key).unwrap().round_received, round as u32);
            } else {
                let got = cache_sample(&mut cache, n, &mut r).unwrap();
                prop_assert_eq!(got.len(), n);
                prop_assert!(got.iter().all(|g| cache.contains(&g.key)));
            }
            prop_assert!(cache.memory_len() <= cap);
            prop_assert_eq!(cache.len(), inserted.len());
            let fresh: Vec<CacheKey> = cache.fresh_queue().iter().copied().collect();
            let unique: BTreeSet<CacheKey> = fresh.iter().copied().collect();
            prop_assert_eq!(unique.len(), fresh.len());
            prop_assert!(fresh.iter().all(|k| cache.contains(k)));
        }
    }

    #[test]
    fn controller_interval_stays_in_range(seed in any::<u64>(), max in 1u32..50, steps in 1usize..200) {
        let mut r = rng::stream(seed, "ctl-prop", &[]);
        let mut st = ControllerState::new(max).unwrap();
        for _ in 0..steps {
            use rand::Rng as _;
            let key = CacheKey::new(r.random_range(0..3), 0);
            if st.transmission_decision(key) == edgefl_core::overlay::Decision::SendRequired {
                let prior = st.contains(&key).then(|| r.random::<f64>());
                st.record_receipt(key, prior);
            }
            let k = st.get(&key);
            if let Some(k) = k {
                prop_assert!((1..=max).contains(&k.interval));
                prop_assert!(k.counter <= k.interval);
            }
        }
    }

    #[test]
    fn vertical_ensemble_invariances(seed in any::<u64>(), c in 0.05f32..20.0) {
        let base = model(&[4, 6, 5, 3], seed);
        let members: Vec<Member> = (0..3u32)
            .map(|e| Member { edge_server_id: e, model: model(&[5, 7, 3], seed ^ u64::from(e + 1)), weight: 1.0 })
            .collect();
        let (x, _) = random_batch(6, 4, 3, &mut rng::stream(seed, "ens-x", &[]));
        let spec = EnsembleSpec::new(base.clone(), 2, members.clone()).unwrap();
        let logits = spec.vertical_predict(&x).unwrap();

        let mut reversed = members.clone();
        reversed.reverse();
        let rev = EnsembleSpec::new(base.clone(), 2, reversed).unwrap().vertical_predict(&x).unwrap();
        prop_assert!(rev.max_abs_diff(&logits) <= 1e-6);

        let scaled: Vec<Member> = members
            .iter()
            .map(|m| Member { model: scaled_tail(&m.model, c), ..m.clone() })
            .collect();
        let sc = EnsembleSpec::new(base, 2, scaled).unwrap().vertical_predict(&x).unwrap();
        prop_assert_eq!(sc.argmax_rows(), logits.argmax_rows());
    }

    #[test]
    fn trace_bytes_and_phases_are_conserved(seed in any::<u64>(), devices in 1u32..6, emo in any::<bool>()) {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "trace-prop", &[]);
        let m = model(&[4, 6, 3], seed);
        let work: Vec<DeviceWork> = (0..devices)
            .map(|d| DeviceWork { device: d, batches: (0..r.random_range(1..4u32)).map(|b| (b, 8)).collect() })
            .collect();
        let sent: Vec<SentBatch> = if emo {
            work.iter()
                .flat_map(|w| w.batches.iter().map(move |&(b, _)| (w.device, b)))
                .filter(|_| r.random_bool(0.5))
                .map(|(d, b)| SentBatch { device: d, batch: b, edge: d % 2, bytes: 8 * 26, label_bytes: 16 })
                .collect()
        } else {
            Vec::new()
        };
        let afl = if emo { vec![AflWork { edge: 0, steps: 3, flops_per_step: 1e6 }] } else { Vec::new() };
        let (events, _) = schedule_fl_round(0, 0.0, &m, &work, &sent, &afl, &LinkSpec::default(), &ComputeSpec::default());
        let regime = if emo { Regime::Emo } else { Regime::FlSmall };
        let row = RoundMetrics::from_trace(regime, 0, 0.5, &events, sent.len() as u64, 0).unwrap();
        prop_assert_eq!(row.bytes_total, row.bytes_device_cloud + row.bytes_device_edge + row.bytes_edge_cloud);
        prop_assert_eq!(row.bytes_total, events.iter().map(|e| e.bytes).sum::<u64>());
        prop_assert_eq!(row.bytes_total, row.model_bytes + row.activation_bytes + row.label_bytes);
        let phases = round_time(regime, &events).unwrap();
        let sum = phases.device_compute + phases.transfer + phases.server_compute + phases.aggregation;
        prop_assert!((sum - row.time_total).abs() <= 1e-12 * sum.max(1.0));
    }
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
}
