//! External key/value memory: value encoding and the write/eviction policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_labels, AnchorGrid, BBox};
use crate::backbone::conv;
use crate::error::{ensure, DmvError, Result};
use crate::numerics::{init_conv, Container, ParamSet, Tape, Tensor, Var};

/// Scores below this are zeroed before value encoding.
pub const SCORE_FLOOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Maximum number of slots, the pinned initial frame included.
    pub capacity: usize,
    /// Minimum frame distance between two writes.
    pub interval: usize,
    /// Minimum peak center score for a write.
    pub threshold: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { capacity: 32, interval: 30, threshold: 0.7 }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.capacity >= 1, "memory capacity must be at least 1");
        ensure!((0.0..=1.0).contains(&self.threshold), "memory threshold {} outside [0,1]", self.threshold);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySlot {
    pub key: Tensor,
    pub value: Tensor,
    pub frame_index: usize,
    pub peak_score: f64,
}

/// Why a frame was or was not written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision")]
pub enum WriteDecision {
    Written,
    /// Written after dropping the oldest non-initial slot.
    WrittenEvicting { evicted_frame: usize },
    SkippedLowScore,
    SkippedInterval,
    /// Capacity 1: only the pinned initial frame fits.
    SkippedCapacity,
}

impl WriteDecision {
    pub fn wrote(&self) -> bool {
        matches!(self, WriteDecision::Written | WriteDecision::WrittenEvicting { .. })
    }
}

/// Ordered slots; slot 0 is the initial frame and is never evicted.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    config: MemoryConfig,
    slots: Vec<MemorySlot>,
}

impl Memory {
    pub fn new(config: MemoryConfig, initial: MemorySlot) -> Result<Self> {
        config.validate()?;
        ensure!(initial.key.rank() == 3 && initial.value.rank() == 3, "memory tensors must be [C, H, W]");
        ensure!(
            initial.key.shape()[1..] == initial.value.shape()[1..],
            "key {:?} and value {:?} differ spatially",
            initial.key.shape(),
            initial.value.shape()
        );
        Ok(Memory { config, slots: vec![initial] })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.frame_index).collect()
    }

    pub fn last_written(&self) -> usize {
        self.slots.last().map_or(0, |s| s.frame_index)
    }

    /// Apply the write rule without touching the memory.
    pub fn decide(&self, frame_index: usize, peak_score: f64) -> Result<WriteDecision> {
        let last = self.last_written();
        ensure!(
            frame_index > last,
            "frame index {frame_index} is not after the last written frame {last}"
        );
        if frame_index - last < self.config.interval {
            return Ok(WriteDecision::SkippedInterval);
        }
        if peak_score < self.config.threshold {
            return Ok(WriteDecision::SkippedLowScore);
        }
        if self.slots.len() >= self.config.capacity {
            if self.slots.len() == 1 {
                return Ok(WriteDecision::SkippedCapacity);
            }
            return Ok(WriteDecision::WrittenEvicting { evicted_frame: self.slots[1].frame_index });
        }
        Ok(WriteDecision::Written)
    }

    /// Write a slot if the policy allows. `make_slot` runs only when writing.
    pub fn maybe_write(
        &mut self,
        frame_index: usize,
        peak_score: f64,
        make_slot: impl FnOnce() -> Result<MemorySlot>,
    ) -> Result<WriteDecision> {
        let decision = self.decide(frame_index, peak_score)?;
        if decision.wrote() {
            let slot = make_slot()?;
            ensure!(slot.frame_index == frame_index, "slot frame index {} != {}", slot.frame_index, frame_index);
            ensure!(
                slot.key.shape() == self.slots[0].key.shape() && slot.value.shape() == self.slots[0].value.shape(),
                "slot tensors do not match memory layout"
            );
            if let WriteDecision::WrittenEvicting { .. } = decision {
                self.slots.remove(1);
            }
            self.slots.push(slot);
        }
        Ok(decision)
    }

    /// Debug dump in the tensor container format.
    pub fn snapshot(&self) -> Container {
        let meta = serde_json::json!({
            "config": self.config,
            "slots": self.slots.iter().map(|s| serde_json::json!({
                "frame_index": s.frame_index,
                "peak_score": s.peak_score,
            })).collect::<Vec<_>>(),
        });
        let mut c = Container::new("memory_snapshot", meta);
        for (i, s) in self.slots.iter().enumerate() {
            c.tensors.insert(format!("slot{i:03}.key"), s.key.clone());
            c.tensors.insert(format!("slot{i:03}.value"), s.value.clone());
        }
        c
    }

    pub fn from_snapshot(c: &Container) -> Result<Self> {
        if c.kind != "memory_snapshot" {
            return Err(DmvError::Container(format!("expected a memory snapshot, found `{}`", c.kind)));
        }
        let config: MemoryConfig = serde_json::from_value(c.meta["config"].clone())?;
        let metas = c.meta["slots"]
            .as_array()
            .ok_or_else(|| DmvError::Container("snapshot has no slot list".into()))?;
        let mut slots = Vec::with_capacity(metas.len());
        for (i, m) in metas.iter().enumerate() {
            slots.push(MemorySlot {
                key: c.tensor(&format!("slot{i:03}.key"))?.clone(),
                value: c.tensor(&format!("slot{i:03}.value"))?.clone(),
                frame_index: m["frame_index"].as_u64().unwrap_or(0) as usize,
                peak_score: m["peak_score"].as_f64().unwrap_or(0.0),
            });
        }
        ensure!(!slots.is_empty(), "snapshot holds no slots");
        Ok(Memory { config, slots })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    pub channels: usize,
    pub hidden: usize,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig { channels: 64, hidden: 64 }
    }
}

pub fn init_params(params: &mut ParamSet, cfg: &ValueConfig, key_channels: usize, num_anchors: usize, rng: &mut impl Rng) {
    let cin = key_channels + 5 * num_anchors;
    init_conv(params, "value.c1", cin, cfg.hidden, 3, rng);
    init_conv(params, "value.c2", cfg.hidden, cfg.channels, 3, rng);
}

/// Value map from `[key ∥ thresholded scores ∥ regressions]` through conv → ReLU → conv.
///
/// Every cell is encoded, background included.
pub fn encode_value(tape: &mut Tape, params: &ParamSet, key: Var, score: Var, reg: Var) -> Result<Var> {
    let (ks, ss, rs) = (tape.shape(key).to_vec(), tape.shape(score).to_vec(), tape.shape(reg).to_vec());
    ensure!(ks.len() == 3 && ss.len() == 3 && rs.len() == 3, "value inputs must be [C,H,W]");
    ensure!(
        ks[1..] == ss[1..] && ks[1..] == rs[1..],
        "value inputs differ spatially: {:?}, {:?}, {:?}",
        ks,
        ss,
        rs
    );
    ensure!(rs[0] == 4 * ss[0], "regression map has {} channels for {} anchors", rs[0], ss[0]);
    let w = params.get("value.c1.w")?;
    ensure!(
        w.dim(1) == ks[0] + ss[0] + rs[0],
        "value encoder expects {} input channels, got {}",
        w.dim(1),
        ks[0] + ss[0] + rs[0]
    );
    ensure!(
        tape.value(score).data().iter().all(|v| (0.0..=1.0).contains(v)),
        "score map values must lie in [0, 1]"
    );
    let mask = tape.value(score).map(|v| if v < SCORE_FLOOR { 0.0 } else { 1.0 });
    let mask = tape.constant(mask);
    let kept = tape.mul(score, mask)?;
    let x = tape.concat(&[key, kept, reg], 0)?;
    let h = conv(tape, params, "value.c1", x, 1)?;
    let h = tape.relu(h)?;
    conv(tape, params, "value.c2", h, 1)
}

/// Score and regression maps of a hard box: one-hot positives with exact displacements.
pub fn initial_maps(gt: &BBox, grid: &AnchorGrid) -> Result<(Tensor, Tensor)> {
    let cfg = grid.config();
    let labels = assign_labels(gt, grid, cfg.pos_iou, cfg.neg_iou)?;
    Ok((labels.score_map(grid), labels.reg_map(grid)))
}

/// Slot 0 from a ground-truth box (in search-region coordinates) and its key.
pub fn encode_initial(params: &ParamSet, gt: &BBox, key: &Tensor, grid: &AnchorGrid) -> Result<MemorySlot> {
    let (score, reg) = initial_maps(gt, grid)?;
    let mut tape = Tape::new();
    let k = tape.constant(key.clone());
    let s = tape.constant(score);
    let r = tape.constant(reg);
    let v = encode_value(&mut tape, params, k, s, r)?;
    Ok(MemorySlot { key: key.clone(), value: tape.value(v).clone(), frame_index: 0, peak_score: 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::AnchorConfig;
    use crate::numerics::rng::stream;

    fn slot(frame: usize, score: f64) -> MemorySlot {
        MemorySlot { key: Tensor::zeros(&[2, 3, 3]), value: Tensor::zeros(&[4, 3, 3]), frame_index: frame, peak_score: score }
    }

    fn mem() -> Memory {
        Memory::new(MemoryConfig::default(), slot(0, 1.0)).unwrap()
    }

    #[test]
    fn writes_at_interval_boundary() {
        let mut m = mem();
        assert_eq!(m.maybe_write(30, 0.9, || Ok(slot(30, 0.9))).unwrap(), WriteDecision::Written);
        assert_eq!(m.frame_indices(), vec![0, 30]);
    }

    #[test]
    fn skips_one_frame_early() {
        let mut m = mem();
        assert_eq!(m.maybe_write(29, 0.99, || Ok(slot(29, 0.99))).unwrap(), WriteDecision::SkippedInterval);
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn skips_low_score() {
        let mut m = mem();
        assert_eq!(m.maybe_write(40, 0.6, || Ok(slot(40, 0.6))).unwrap(), WriteDecision::SkippedLowScore);
        assert_eq!(m.maybe_write(41, 0.7, || Ok(slot(41, 0.7))).unwrap(), WriteDecision::Written);
    }

    #[test]
    fn full_memory_evicts_oldest_non_initial() {
        let mut m = mem();
        for i in 1..32 {
            m.maybe_write(30 * i, 0.9, || Ok(slot(30 * i, 0.9))).unwrap();
        }
        assert_eq!(m.len(), 32);
        let d = m.maybe_write(30 * 32, 0.9, || Ok(slot(30 * 32, 0.9))).unwrap();
        assert_eq!(d, WriteDecision::WrittenEvicting { evicted_frame: 30 });
        assert_eq!(m.len(), 32);
        assert_eq!(m.slots()[0].frame_index, 0);
        assert_eq!(m.slots()[1].frame_index, 60);
    }

    #[test]
    fn non_monotone_frame_is_rejected() {
        let mut m = mem();
        m.maybe_write(30, 0.9, || Ok(slot(30, 0.9))).unwrap();
        assert!(matches!(m.decide(30, 0.9), Err(DmvError::Contract(_))));
        assert!(m.decide(12, 0.9).is_err());
    }

    #[test]
    fn slot_factory_not_called_on_skip() {
        let mut m = mem();
        let d = m.maybe_write(5, 0.9, || panic!("must not encode")).unwrap();
        assert_eq!(d, WriteDecision::SkippedInterval);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut m = mem();
        m.maybe_write(30, 0.8, || Ok(slot(30, 0.8))).unwrap();
        let bytes = m.snapshot().to_bytes().unwrap();
        let back = Memory::from_snapshot(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    fn value_setup() -> (ParamSet, AnchorGrid) {
        let grid = AnchorGrid::new(AnchorConfig { grid: 6, base_size: 16.0, stride: 8.0, ratios: vec![0.5, 1.0, 2.0], ..AnchorConfig::default() }).unwrap();
        let mut p = ParamSet::new();
        init_params(&mut p, &ValueConfig { channels: 5, hidden: 4 }, 3, 3, &mut stream(3, 0));
        (p, grid)
    }

    fn run_value(p: &ParamSet, key: &Tensor, score: &Tensor, reg: &Tensor) -> Tensor {
        let mut t = Tape::new();
        let (k, s, r) = (t.constant(key.clone()), t.constant(score.clone()), t.constant(reg.clone()));
        let v = encode_value(&mut t, p, k, s, r).unwrap();
        t.value(v).clone()
    }

    #[test]
    fn sub_threshold_scores_are_ignored() {
        let (p, _) = value_setup();
        let key = Tensor::from_fn(&[3, 6, 6], |i| (i as f64 * 0.3).sin());
        let reg = Tensor::from_fn(&[12, 6, 6], |i| (i as f64 * 0.1).cos());
        let a = run_value(&p, &key, &Tensor::full(&[3, 6, 6], 0.4), &reg);
        let b = run_value(&p, &key, &Tensor::zeros(&[3, 6, 6]), &reg);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[5, 6, 6]);
    }

    #[test]
    fn perturbation_stays_in_receptive_field() {
        let (p, _) = value_setup();
        let key = Tensor::from_fn(&[3, 6, 6], |i| (i as f64 * 0.3).sin());
        let reg = Tensor::zeros(&[12, 6, 6]);
        let full = Tensor::full(&[3, 6, 6], 0.9);
        let (ci, cj) = (1usize, 4usize);
        let holed = Tensor::from_fn(&[3, 6, 6], |i| if (i % 36) / 6 == ci && i % 6 == cj { 0.0 } else { 0.9 });
        let a = run_value(&p, &key, &full, &reg);
        let b = run_value(&p, &key, &holed, &reg);
        // Two stacked 3x3 convolutions reach at most 2 cells away.
        for c in 0..5 {
            for y in 0..6usize {
                for x in 0..6usize {
                    let far = y.abs_diff(ci) > 2 || x.abs_diff(cj) > 2;
                    if far {
                        assert_eq!(a.at(&[c, y, x]), b.at(&[c, y, x]));
                    }
                }
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn initial_slot_is_one_hot_at_positives() {
        let (p, grid) = value_setup();
        let gt = *grid.anchor(grid.cells() + 14);
        let (score, reg) = initial_maps(&gt, &grid).unwrap();
        let labels = assign_labels(&gt, &grid, 0.6, 0.3).unwrap();
        for (i, l) in labels.labels.iter().enumerate() {
            assert_eq!(score.data()[i], if *l == crate::anchors::Label::Positive { 1.0 } else { 0.0 });
        }
        for pos in labels.positives() {
            let back = grid.decode_at(&reg, pos).unwrap();
            assert!((back.cx - gt.cx).abs() < 1e-9 && (back.h - gt.h).abs() < 1e-9);
        }
        let key = Tensor::zeros(&[3, 6, 6]);
        let s = encode_initial(&p, &gt, &key, &grid).unwrap();
        assert_eq!(s.frame_index, 0);
        assert_eq!(s.value.shape(), &[5, 6, 6]);
    }
}
