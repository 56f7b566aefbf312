//! Full network: configuration, parameters, and the per-frame forward pieces.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorConfig, AnchorGrid, BBox};
use crate::backbone::{self, BackboneConfig};
use crate::error::{ensure, DmvError, Result};
use crate::head::{self, HeadConfig, PredictionVars};
use crate::memory::{self, MemorySlot, ValueConfig};
use crate::numerics::rng::{derive_seed, stream};
use crate::numerics::{Container, ParamSet, Tape, Tensor, Var};
use crate::retrieval::{self, RetrievalConfig};

/// Per-channel pixel statistics applied to raw `0..255` crops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [123.675, 116.28, 103.53], std: [58.395, 57.12, 57.375] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub value: ValueConfig,
    pub retrieval: RetrievalConfig,
    pub head: HeadConfig,
    pub normalization: Normalization,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.retrieval.validate()?;
        ensure!(
            self.anchors.grid == self.backbone.output_size(),
            "anchor grid {} does not match backbone output size {}",
            self.anchors.grid,
            self.backbone.output_size()
        );
        ensure!(
            (self.anchors.stride - self.backbone.output_stride() as f64).abs() < 1e-12,
            "anchor stride {} does not match backbone stride {}",
            self.anchors.stride,
            self.backbone.output_stride()
        );
        ensure!(self.normalization.std.iter().all(|s| *s > 0.0), "normalization std must be positive");
        ensure!(self.value.channels > 0 && self.head.width > 0, "value and head widths must be positive");
        AnchorGrid::new(self.anchors.clone())?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    grid: AnchorGrid,
}

pub const MODEL_KIND: &str = "dmv_model";

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let grid = AnchorGrid::new(config.anchors.clone())?;
        let a = grid.num_anchors();
        let ck = config.backbone.key_channels;
        let cv = config.value.channels;
        let mut params = ParamSet::new();
        backbone::init_params(&mut params, &config.backbone, &mut stream(derive_seed(seed, 1), 0));
        memory::init_params(&mut params, &config.value, ck, a, &mut stream(derive_seed(seed, 2), 0));
        retrieval::init_params(&mut params, &config.retrieval, ck, cv, &mut stream(derive_seed(seed, 3), 0));
        head::init_params(&mut params, &config.head, ck + cv, a, &mut stream(derive_seed(seed, 4), 0));
        Ok(Model { config, params, grid })
    }

    /// Rebuild from a config and a full parameter set (names and shapes are checked).
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Model> {
        let reference = Model::new(config, 0)?;
        ensure!(
            reference.params.len() == params.len(),
            "parameter set has {} tensors, model expects {}",
            params.len(),
            reference.params.len()
        );
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            ensure!(got.shape() == t.shape(), "parameter {name}: shape {:?}, expected {:?}", got.shape(), t.shape());
        }
        Ok(Model { params, ..reference })
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    pub fn input_size(&self) -> usize {
        self.config.backbone.input_size
    }

    pub fn normalize(&self, crop: &Tensor) -> Result<Tensor> {
        let s = self.input_size();
        ensure!(crop.shape() == [3, s, s], "crop must be [3, {s}, {s}], got {:?}", crop.shape());
        let n = &self.config.normalization;
        let plane = s * s;
        Ok(Tensor::from_fn(crop.shape(), |i| {
            let c = i / plane;
            (crop.data()[i] - n.mean[c]) / n.std[c]
        }))
    }

    /// Query/key embedding of a raw crop.
    pub fn embed(&self, tape: &mut Tape, crop: &Tensor) -> Result<Var> {
        let x = tape.constant(self.normalize(crop)?);
        backbone::extract(tape, &self.params, &self.config.backbone, x)
    }

    pub fn embed_value(&self, crop: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let k = self.embed(&mut tape, crop)?;
        Ok(tape.value(k).clone())
    }

    /// Slot 0 from the first crop and its ground-truth box in crop coordinates.
    pub fn initial_slot(&self, crop: &Tensor, gt: &BBox) -> Result<MemorySlot> {
        let key = self.embed_value(crop)?;
        memory::encode_initial(&self.params, gt, &key, &self.grid)
    }

    pub fn encode_value(&self, tape: &mut Tape, key: Var, score: Var, reg: Var) -> Result<Var> {
        memory::encode_value(tape, &self.params, key, score, reg)
    }

    /// Retrieve from memory and predict score and regression maps.
    pub fn predict(
        &self,
        tape: &mut Tape,
        retrieval: &RetrievalConfig,
        query: Var,
        keys: &[Var],
        values: &[Var],
    ) -> Result<PredictionVars> {
        let r = retrieval::retrieve(tape, &self.params, retrieval, query, keys, values)?;
        head::predict(tape, &self.params, query, r)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(MODEL_KIND, serde_json::json!({ "config": self.config }));
        for (name, t) in self.params.iter() {
            c.tensors.insert(format!("param.{name}"), t.clone());
        }
        Ok(c)
    }

    /// Accepts both bare model files and training checkpoints.
    pub fn from_container(c: &Container) -> Result<Model> {
        let cfg = c
            .meta
            .get("config")
            .or_else(|| c.meta.get("model"))
            .ok_or_else(|| DmvError::Container(format!("{} container has no model config", c.kind)))?;
        let config: ModelConfig = serde_json::from_value(cfg.clone())?;
        let mut params = ParamSet::new();
        for (name, t) in &c.tensors {
            if let Some(p) = name.strip_prefix("param.") {
                params.insert(p, t.clone());
            }
        }
        Model::from_parts(config, params).map_err(|e| DmvError::Container(e.to_string()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Small but complete configuration used across unit tests.
    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig { input_size: 32, widths: vec![4, 6, 8], strides: vec![2, 2, 2], key_channels: 6 },
            anchors: AnchorConfig { ratios: vec![0.5, 1.0, 2.0], base_size: 8.0, stride: 8.0, grid: 4, ..AnchorConfig::default() },
            value: ValueConfig { channels: 6, hidden: 6 },
            retrieval: RetrievalConfig { k: 2, heads: 2, attn_width: 8, ffn_width: 8, mlp_width: 8, ..RetrievalConfig::default() },
            head: HeadConfig { width: 6 },
            normalization: Normalization::default(),
        }
    }

    #[test]
    fn default_config_is_consistent() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn grid_mismatch_rejected() {
        let mut c = tiny_config();
        c.anchors.grid = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shapes() {
        let m = Model::new(tiny_config(), 3).unwrap();
        let crop = Tensor::from_fn(&[3, 32, 32], |i| (i % 255) as f64);
        let gt = BBox::new(16.0, 16.0, 8.0, 8.0).unwrap();
        let slot = m.initial_slot(&crop, &gt).unwrap();
        let mut t = Tape::new();
        let q = m.embed(&mut t, &crop).unwrap();
        let k = t.constant(slot.key.clone());
        let v = t.constant(slot.value.clone());
        let p = m.predict(&mut t, &m.config.retrieval, q, &[k], &[v]).unwrap();
        assert_eq!(t.shape(p.score), &[3, 4, 4]);
        assert_eq!(t.shape(p.reg), &[12, 4, 4]);
    }

    #[test]
    fn container_round_trip() {
        let m = Model::new(tiny_config(), 3).unwrap();
        let c = m.to_container().unwrap();
        let back = Model::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        for (n, t) in m.params.iter() {
            assert_eq!(back.params.get(n).unwrap(), t);
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::new(tiny_config(), 11).unwrap();
        let b = Model::new(tiny_config(), 11).unwrap();
        let c = Model::new(tiny_config(), 12).unwrap();
        assert_eq!(a.params.get("head.score.c1.w").unwrap(), b.params.get("head.score.c1.w").unwrap());
        assert_ne!(a.params.get("head.score.c1.w").unwrap(), c.params.get("head.score.c1.w").unwrap());
    }
}
