//! Analytic per-round communication cost, without training.

use serde::{Deserialize, Serialize};

use super::Regime;
use crate::error::{Error, Result};
use crate::nn::LayerStack;

/// Bytes per transmitted value.
pub const VALUE_BYTES: u64 = 4;
/// Bytes per transmitted label.
pub const LABEL_BYTES: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticLayer {
    pub name: String,
    pub params: u64,
    /// Values per sample in this layer's output.
    pub activation_width: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticModel {
    pub layers: Vec<AnalyticLayer>,
}

impl AnalyticModel {
    pub fn from_stack(model: &LayerStack) -> Self {
        let layers = model
            .layers()
            .iter()
            .enumerate()
            .map(|(k, l)| AnalyticLayer {
                name: format!("dense{k}"),
                params: l.param_count() as u64,
                activation_width: l.out_dim() as u64,
            })
            .collect();
        AnalyticModel { layers }
    }

    /// Dense chain over `dims` (`dims[0]` is the input width).
    pub fn dense(dims: &[u64]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| AnalyticLayer {
                name: format!("fc{k}"),
                params: w[0] * w[1] + w[1],
                activation_width: w[1],
            })
            .collect();
        AnalyticModel { layers }
    }

    /// Six-weight-layer VGG for 32×32×3 inputs and 10 classes: four 3×3
    /// conv blocks (64, 128, 256, 512 channels) each followed by 2×2 max
    /// pooling, then fc 2048→1024 and fc 1024→10. 3,659,402 parameters.
    pub fn vgg6_cifar10() -> Self {
        let mut layers = Vec::new();
        let mut side = 32u64;
        let mut ch = 3u64;
        for (k, out) in [64u64, 128, 256, 512].into_iter().enumerate() {
            layers.push(AnalyticLayer {
                name: format!("conv{}", k + 1),
                params: 9 * ch * out + out,
                activation_width: side * side * out,
            });
            side /= 2;
            layers.push(AnalyticLayer {
                name: format!("pool{}", k + 1),
                params: 0,
                activation_width: side * side * out,
            });
            ch = out;
        }
        let flat = side * side * ch;
        layers.push(AnalyticLayer {
            name: "fc1".into(),
            params: flat * 1024 + 1024,
            activation_width: 1024,
        });
        layers.push(AnalyticLayer {
            name: "fc2".into(),
            params: 1024 * 10 + 10,
            activation_width: 10,
        });
        AnalyticModel { layers }
    }

    pub fn params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    /// Parameters in the first `j` layers.
    pub fn prefix_params(&self, j: usize) -> u64 {
        self.layers[..j.min(self.layers.len())]
            .iter()
            .map(|l| l.params)
            .sum()
    }

    /// Output width of layer `j - 1`, i.e. the activation crossing a cut at `j`.
    pub fn width_at(&self, j: usize) -> Result<u64> {
        if j == 0 || j > self.layers.len() {
            return Err(Error::InvalidSplit {
                index: j,
                layers: self.layers.len(),
            });
        }
        Ok(self.layers[j - 1].activation_width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Device model of FL-small and EMO.
    pub small: AnalyticModel,
    /// Model of FL-large and SFL.
    pub large: AnalyticModel,
    /// SFL cut: devices hold `large[..split_index]`.
    pub split_index: usize,
    /// EMO tap: activations leave after `small[..tap_layer]`.
    pub tap_layer: usize,
    /// Devices per round.
    pub k: u64,
    pub batches_per_device: u64,
    pub batch_size: u64,
    /// Activation batches EMO sends per round; `None` means every batch.
    pub emo_sent_batches: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub model_bytes: u64,
    /// Activations and gradients, labels excluded.
    pub activation_bytes: u64,
    pub label_bytes: u64,
    pub total: u64,
}

impl CostBreakdown {
    fn new(model_bytes: u64, activation_bytes: u64, label_bytes: u64) -> Self {
        CostBreakdown {
            model_bytes,
            activation_bytes,
            label_bytes,
            total: model_bytes + activation_bytes + label_bytes,
        }
    }
}

/// Predicted bytes per round.
///
/// * FL: `k·2·4·P` (download and upload of the whole model).
/// * SFL: device-part sync `k·2·4·P_dev` plus `k·B·2·4·m·W_j` for the
///   activations and equal-sized gradients, plus `2·m` label bytes per batch.
/// * EMO: FL-small sync plus `4·m·W_t` activation bytes and `2·m` label bytes
///   per sent batch.
pub fn cost_calculator(regime: Regime, inputs: &CostInputs) -> Result<CostBreakdown> {
    let CostInputs {
        k,
        batches_per_device: b,
        batch_size: m,
        ..
    } = *inputs;
    let sync = |p: u64| k * 2 * VALUE_BYTES * p;
    Ok(match regime {
        Regime::FlSmall => CostBreakdown::new(sync(inputs.small.params()), 0, 0),
        Regime::FlLarge => CostBreakdown::new(sync(inputs.large.params()), 0, 0),
        Regime::SflCloud | Regime::SflEdge => {
            let j = inputs.split_index;
            if j >= inputs.large.layers.len() {
                return Err(Error::InvalidSplit {
                    index: j,
                    layers: inputs.large.layers.len(),
                });
            }
            let w = inputs.large.width_at(j)?;
            CostBreakdown::new(
                sync(inputs.large.prefix_params(j)),
                k * b * 2 * VALUE_BYTES * m * w,
                k * b * LABEL_BYTES * m,
            )
        }
        Regime::Emo => {
            let w = inputs.small.width_at(inputs.tap_layer)?;
            let sent = inputs.emo_sent_batches.unwrap_or(k * b);
            CostBreakdown::new(
                sync(inputs.small.params()),
                VALUE_BYTES * m * w * sent,
                LABEL_BYTES * m * sent,
            )
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(small: AnalyticModel) -> CostInputs {
        CostInputs {
            large: small.clone(),
            small,
            split_index: 1,
            tap_layer: 1,
            k: 20,
            batches_per_device: 3,
            batch_size: 16,
            emo_sent_batches: None,
        }
    }

    #[test]
    fn fl_bytes_per_million_params() {
        let model = AnalyticModel {
            layers: vec![AnalyticLayer {
                name: "x".into(),
                params: 1_000_000,
                activation_width: 1,
            }],
        };
        let c = cost_calculator(Regime::FlSmall, &inputs(model)).unwrap();
        assert_eq!(c.total, 160_000_000);
    }

    #[test]
    fn vgg6_parameter_count() {
        assert_eq!(AnalyticModel::vgg6_cifar10().params(), 3_659_402);
    }

    #[test]
    fn dense_matches_stack() {
        let mut rng = crate::rng::stream(1, "t", &[]);
        let s = LayerStack::mlp(&[5, 7, 3], &mut rng).unwrap();
        let a = AnalyticModel::from_stack(&s);
        assert_eq!(a, {
            let mut d = AnalyticModel::dense(&[5, 7, 3]);
            d.layers[0].name = "dense0".into();
            d.layers[1].name = "dense1".into();
            d
        });
        assert_eq!(a.params(), s.param_count() as u64);
    }

    #[test]
    fn sfl_and_emo_formulas() {
        let m = AnalyticModel::dense(&[10, 8, 4]);
        let mut i = inputs(m);
        let sfl = cost_calculator(Regime::SflEdge, &i).unwrap();
        assert_eq!(sfl.model_bytes, 20 * 8 * 88);
        assert_eq!(sfl.activation_bytes, 20 * 3 * 16 * 8 * 8);
        assert_eq!(sfl.label_bytes, 20 * 3 * 32);
        i.emo_sent_batches = Some(7);
        let emo = cost_calculator(Regime::Emo, &i).unwrap();
        assert_eq!(emo.activation_bytes, 4 * 16 * 8 * 7);
        assert_eq!(emo.label_bytes, 2 * 16 * 7);
        i.split_index = 2;
        assert!(cost_calculator(Regime::SflCloud, &i).is_err());
    }
}
