//! Ensembles of the FL model and edge overlays.
//!
//! Horizontal aggregation stacks one overlay on the FL model's first
//! `tap_layer` layers. Vertical aggregation averages the raw logits of all
//! such stacks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::Classifier;
use crate::model_io::{load_model, save_model};
use crate::nn::LayerStack;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Base prefix followed by member `i`.
    HorizontalSingle(usize),
    /// Mean logits over all members.
    VerticalAll,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub edge_server_id: u32,
    pub model: LayerStack,
    /// Used only when the ensemble is weighted.
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    base: LayerStack,
    tap_layer: usize,
    members: Vec<Member>,
    pub mode: EnsembleMode,
    pub include_base_logits: bool,
    pub weighted: bool,
}

impl EnsembleSpec {
    pub fn new(base: LayerStack, tap_layer: usize, members: Vec<Member>) -> Result<Self> {
        if tap_layer == 0 || tap_layer >= base.len() {
            return Err(Error::InvalidSplit {
                index: tap_layer,
                layers: base.len(),
            });
        }
        if members.is_empty() {
            return Err(Error::InvalidInput("ensemble needs at least one member".into()));
        }
        let width = base.width_after(tap_layer).unwrap_or_default();
        for (i, m) in members.iter().enumerate() {
            if m.model.in_dim() != width {
                return Err(Error::Shape(format!(
                    "member {i} takes {} inputs, tap layer {tap_layer} emits {width}",
                    m.model.in_dim()
                )));
            }
            if m.model.out_dim() != base.out_dim() {
                return Err(Error::Shape(format!(
                    "member {i} emits {} logits, base emits {}",
                    m.model.out_dim(),
                    base.out_dim()
                )));
            }
            if !(m.weight > 0.0 && m.weight.is_finite()) {
                return Err(Error::InvalidInput(format!("member {i} weight {}", m.weight)));
            }
        }
        Ok(EnsembleSpec {
            base,
            tap_layer,
            members,
            mode: EnsembleMode::VerticalAll,
            include_base_logits: false,
            weighted: false,
        })
    }

    pub fn base(&self) -> &LayerStack {
        &self.base
    }

    pub fn tap_layer(&self) -> usize {
        self.tap_layer
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    fn tap(&self, x: &Tensor) -> Result<Tensor> {
        self.base.forward_prefix(x, self.tap_layer)
    }

    /// Logits of the base prefix composed with member `i`.
    pub fn horizontal_predict(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let m = self.members.get(i).ok_or_else(|| {
            Error::InvalidInput(format!("member {i} of {}", self.members.len()))
        })?;
        m.model.predict(&self.tap(x)?)
    }

    /// Mean member logits, plus the base model's when `include_base_logits`.
    pub fn vertical_predict(&self, x: &Tensor) -> Result<Tensor> {
        let tap = self.tap(x)?;
        let mut outputs = Vec::with_capacity(self.members.len() + 1);
        for m in &self.members {
            let w = if self.weighted { m.weight } else { 1.0 };
            outputs.push((m.model.predict(&tap)?, w));
        }
        if self.include_base_logits {
            outputs.push((self.base.predict(x)?, 1.0));
        }
        let total: f64 = outputs.iter().map(|(_, w)| w).sum();
        let mut acc = vec![0.0f64; outputs[0].0.len()];
        for (t, w) in &outputs {
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += w * f64::from(v);
            }
        }
        let shape = outputs[0].0.shape().to_vec();
        Tensor::new(shape, acc.into_iter().map(|v| (v / total) as f32).collect())
    }
}

impl Classifier for EnsembleSpec {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            EnsembleMode::HorizontalSingle(i) => self.horizontal_predict(i, x),
            EnsembleMode::VerticalAll => self.vertical_predict(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberFile {
    pub edge_server_id: u32,
    pub model: PathBuf,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// JSON description of an ensemble; model paths are relative to the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleFile {
    pub base: PathBuf,
    pub tap_layer: usize,
    pub members: Vec<MemberFile>,
    #[serde(default = "vertical")]
    pub mode: EnsembleMode,
    #[serde(default)]
    pub include_base_logits: bool,
    #[serde(default)]
    pub weighted: bool,
}

fn vertical() -> EnsembleMode {
    EnsembleMode::VerticalAll
}

impl EnsembleSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: EnsembleFile = serde_json::from_slice(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let base = load_model(&dir.join(&file.base))?;
        let members = file
            .members
            .iter()
            .map(|m| {
                Ok(Member {
                    edge_server_id: m.edge_server_id,
                    model: load_model(&dir.join(&m.model))?,
                    weight: m.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut spec = EnsembleSpec::new(base, file.tap_layer, members)?;
        spec.mode = file.mode;
        spec.include_base_logits = file.include_base_logits;
        spec.weighted = file.weighted;
        Ok(spec)
    }

    /// Writes `base.emod`, one `overlay_<edge>.emod` per member and the JSON
    /// description at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        save_model(&dir.join("base.emod"), &self.base)?;
        let mut members = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            let name = PathBuf::from(format!("overlay_{i}_edge{}.emod", m.edge_server_id));
            save_model(&dir.join(&name), &m.model)?;
            members.push(MemberFile {
                edge_server_id: m.edge_server_id,
                model: name,
                weight: m.weight,
            });
        }
        let file = EnsembleFile {
            base: "base.emod".into(),
            tap_layer: self.tap_layer,
            members,
            mode: self.mode,
            include_base_logits: self.include_base_logits,
            weighted: self.weighted,
        };
        let json = serde_json::to_vec_pretty(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}
