//! Inference: per-frame crop, retrieval, prediction, box selection, and memory update.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::anchors::BBox;
use crate::data::{crop_search_region, Sequence};
use crate::error::{ensure, DmvError, Result};
use crate::memory::{Memory, MemoryConfig, MemorySlot, WriteDecision};
use crate::model::Model;
use crate::numerics::Tape;
use crate::retrieval::RetrievalMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Overrides the model's retrieval mode when set.
    pub mode: Option<RetrievalMode>,
    /// Overrides the model's K when set.
    pub k: Option<usize>,
    /// Blend weight of the cosine window in box selection; 0 is a plain argmax.
    pub window_weight: f64,
    /// False keeps only the initial frame in memory.
    pub use_memory: bool,
    pub memory: MemoryConfig,
    pub context_factor: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { mode: None, k: None, window_weight: 0.3, use_memory: true, memory: MemoryConfig::default(), context_factor: 2.0 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.window_weight), "window weight must be in [0, 1]");
        ensure!(self.context_factor > 0.0, "context factor must be positive");
        ensure!(self.k.is_none_or(|k| k >= 1), "K must be at least 1");
        self.memory.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub estimate: BBox,
    pub memory: Memory,
    pub frame: usize,
    frame_size: (u32, u32),
}

/// Result of one tracked frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub frame_index: usize,
    pub bbox: BBox,
    pub score: f64,
    pub decision: Option<WriteDecision>,
    /// True when the prediction was non-finite and the previous box was kept.
    pub fail_safe: bool,
}

/// Separable `sin²` window over a `g × g` grid, peaking at the center.
pub fn cosine_window(g: usize) -> Vec<f64> {
    let h: Vec<f64> = (0..g).map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / g as f64).sin().powi(2)).collect();
    (0..g * g).map(|i| h[i / g] * h[i % g]).collect()
}

/// Index maximising `(1 − w)·score + w·window`, lowest index on ties.
pub fn select_anchor(score: &[f64], grid: usize, window_weight: f64) -> usize {
    let win = cosine_window(grid);
    let cells = grid * grid;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in score.iter().enumerate() {
        let v = if window_weight == 0.0 { *s } else { (1.0 - window_weight) * s + window_weight * win[i % cells] };
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub struct Tracker<'a> {
    pub model: &'a Model,
    pub config: TrackerConfig,
}

impl<'a> Tracker<'a> {
    pub fn new(model: &'a Model, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Tracker { model, config })
    }

    fn retrieval(&self) -> crate::retrieval::RetrievalConfig {
        let mut r = self.model.config.retrieval.clone();
        if let Some(m) = self.config.mode {
            r.mode = m;
        }
        if let Some(k) = self.config.k {
            r.k = k;
        }
        r
    }

    pub fn init(&self, frame: &RgbImage, gt: &BBox) -> Result<TrackerState> {
        gt.validate()?;
        let (w, h) = (frame.width() as f64, frame.height() as f64);
        ensure!(
            gt.cx >= 0.0 && gt.cy >= 0.0 && gt.cx <= w && gt.cy <= h,
            "initial box center ({}, {}) lies outside the {w}x{h} frame",
            gt.cx,
            gt.cy
        );
        let (crop, tf) = crop_search_region(frame, gt, self.model.input_size(), self.config.context_factor)?;
        let slot = self.model.initial_slot(&crop, &tf.box_to_crop(gt))?;
        let memory = Memory::new(self.config.memory.clone(), slot)?;
        Ok(TrackerState { estimate: *gt, memory, frame: 0, frame_size: (frame.width(), frame.height()) })
    }

    fn clamp_to_frame(&self, b: BBox, size: (u32, u32)) -> BBox {
        let (w, h) = (size.0 as f64, size.1 as f64);
        BBox { cx: b.cx.clamp(0.0, w), cy: b.cy.clamp(0.0, h), w: b.w.clamp(1.0, w), h: b.h.clamp(1.0, h) }
    }

    pub fn step(&self, state: &mut TrackerState, frame: &RgbImage) -> Result<StepOutput> {
        let frame_index = state.frame + 1;
        match self.predict_frame(state, frame, frame_index) {
            Ok(out) => {
                state.frame = frame_index;
                state.estimate = out.bbox;
                Ok(out)
            }
            Err(DmvError::NumericFault(m)) => {
                log::warn!("frame {frame_index}: {m}; keeping the previous box");
                state.frame = frame_index;
                Ok(StepOutput { frame_index, bbox: state.estimate, score: 0.0, decision: None, fail_safe: true })
            }
            Err(e) => Err(e),
        }
    }

    fn predict_frame(&self, state: &mut TrackerState, frame: &RgbImage, frame_index: usize) -> Result<StepOutput> {
        let model = self.model;
        let (crop, tf) = crop_search_region(frame, &state.estimate, model.input_size(), self.config.context_factor)?;
        let mut tape = Tape::new();
        let q = model.embed(&mut tape, &crop)?;
        let keys: Vec<_> = state.memory.slots().iter().map(|s| tape.constant(s.key.clone())).collect();
        let values: Vec<_> = state.memory.slots().iter().map(|s| tape.constant(s.value.clone())).collect();
        let pred = model.predict(&mut tape, &self.retrieval(), q, &keys, &values)?;
        let score = tape.value(pred.score).clone();
        let reg = tape.value(pred.reg).clone();
        let idx = select_anchor(score.data(), model.grid().grid(), self.config.window_weight);
        let peak = score.data()[idx];
        let crop_box = model.grid().decode_at(&reg, idx)?;
        let bbox = self.clamp_to_frame(tf.box_to_image(&crop_box), state.frame_size);
        bbox.validate()?;

        let decision = if self.config.use_memory {
            let key = tape.value(q).clone();
            Some(state.memory.maybe_write(frame_index, peak, || {
                let v = model.encode_value(&mut tape, q, pred.score, pred.reg)?;
                Ok(MemorySlot { key, value: tape.value(v).clone(), frame_index, peak_score: peak })
            })?)
        } else {
            None
        };
        Ok(StepOutput { frame_index, bbox, score: peak, decision, fail_safe: false })
    }
}

/// One line of a prediction file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub frame_index: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct TrackResult {
    pub predictions: Vec<FramePrediction>,
    pub seconds: f64,
    pub fail_safes: usize,
}

impl TrackResult {
    /// Tracked frames per second, the initial frame excluded.
    pub fn fps(&self) -> f64 {
        (self.predictions.len().saturating_sub(1)) as f64 / self.seconds.max(1e-9)
    }
}

/// Track a whole sequence from its first ground-truth box.
pub fn track_sequence(model: &Model, config: &TrackerConfig, seq: &Sequence) -> Result<TrackResult> {
    let tracker = Tracker::new(model, config.clone())?;
    let t0 = Instant::now();
    let mut state = tracker.init(&seq.frames[0], &seq.boxes[0])?;
    let mut predictions = vec![FramePrediction { frame_index: 0, bbox: seq.boxes[0], score: 1.0 }];
    let mut fail_safes = 0;
    for f in &seq.frames[1..] {
        let out = tracker.step(&mut state, f)?;
        fail_safes += usize::from(out.fail_safe);
        predictions.push(FramePrediction { frame_index: out.frame_index, bbox: out.bbox, score: out.score });
    }
    Ok(TrackResult { predictions, seconds: t0.elapsed().as_secs_f64(), fail_safes })
}

/// `frame_index, x, y, w, h, score` per line, top-left box convention.
pub fn format_predictions(preds: &[FramePrediction]) -> String {
    let mut s = String::new();
    for p in preds {
        let [x, y, w, h] = p.bbox.to_top_left();
        writeln!(s, "{}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}", p.frame_index, x, y, w, h, p.score).expect("string write");
    }
    s
}

pub fn write_predictions(path: &Path, preds: &[FramePrediction]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, format_predictions(preds))?;
    Ok(())
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<FramePrediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DmvError::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", parts.len())));
        }
        let frame_index = parts[0].parse::<usize>().map_err(|e| err(format!("frame index: {e}")))?;
        let mut v = [0.0; 5];
        for (slot, p) in v.iter_mut().zip(&parts[1..]) {
            *slot = p.parse::<f64>().map_err(|e| err(format!("{p:?}: {e}")))?;
        }
        let bbox = BBox::from_top_left(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
        out.push(FramePrediction { frame_index, bbox, score: v[4] });
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<FramePrediction>> {
    parse_predictions(&std::fs::read_to_string(path)?, path)
}

/// Debug view of the memory contents as a tensor container.
pub fn memory_snapshot(state: &TrackerState) -> crate::numerics::Container {
    state.memory.snapshot()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::assign_labels;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::tests::tiny_config;

    fn setup() -> (Model, Sequence) {
        let m = Model::new(tiny_config(), 2).unwrap();
        let s = generate_synthetic(&SynthConfig { length: 6, width: 64, height: 64, target_size: [8.0, 12.0], ..SynthConfig::default() }).unwrap();
        (m, s)
    }

    #[test]
    fn init_pins_ground_truth() {
        let (m, s) = setup();
        let t = Tracker::new(&m, TrackerConfig::default()).unwrap();
        let st = t.init(&s.frames[0], &s.boxes[0]).unwrap();
        assert_eq!(st.memory.len(), 1);
        assert_eq!(st.memory.frame_indices(), vec![0]);
        assert_eq!(st.estimate, s.boxes[0]);
        let (crop, tf) = crop_search_region(&s.frames[0], &s.boxes[0], 32, 2.0).unwrap();
        let gt_c = tf.box_to_crop(&s.boxes[0]);
        let labels = assign_labels(&gt_c, m.grid(), 0.6, 0.3).unwrap();
        let expected = m.initial_slot(&crop, &gt_c).unwrap();
        assert_eq!(st.memory.slots()[0].value, expected.value);
        assert!(!labels.positives().is_empty());
    }

    #[test]
    fn init_rejects_box_outside_frame() {
        let (m, s) = setup();
        let t = Tracker::new(&m, TrackerConfig::default()).unwrap();
        assert!(t.init(&s.frames[0], &BBox::new(500.0, 10.0, 5.0, 5.0).unwrap()).is_err());
    }

    #[test]
    fn zero_window_is_plain_argmax() {
        let score = vec![0.1, 0.9, 0.3, 0.2];
        assert_eq!(select_anchor(&score, 2, 0.0), 1);
        // Anchors beyond the first share the window of their cell.
        let s2 = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.4];
        assert_eq!(select_anchor(&s2, 2, 0.0), 7);
        let win = cosine_window(3);
        assert_eq!(select_anchor(&vec![0.5; 9], 3, 0.3), win.iter().enumerate().fold(0, |b, (i, v)| if *v > win[b] { i } else { b }));
        assert_eq!(select_anchor(&vec![0.5; 9], 3, 0.3), 4);
    }

    #[test]
    fn low_score_frame_is_not_written() {
        let (m, s) = setup();
        let cfg = TrackerConfig { memory: MemoryConfig { interval: 1, threshold: 0.7, capacity: 32 }, ..TrackerConfig::default() };
        let t = Tracker::new(&m, cfg).unwrap();
        let mut st = t.init(&s.frames[0], &s.boxes[0]).unwrap();
        // An untrained head scores about sigmoid(-2) everywhere.
        let out = t.step(&mut st, &s.frames[1]).unwrap();
        assert!(out.score < 0.7);
        assert_eq!(out.decision, Some(WriteDecision::SkippedLowScore));
        assert_eq!(st.memory.len(), 1);
    }

    #[test]
    fn memory_off_never_writes() {
        let (m, s) = setup();
        let cfg = TrackerConfig { use_memory: false, memory: MemoryConfig { interval: 1, threshold: 0.0, capacity: 32 }, ..TrackerConfig::default() };
        let r = track_sequence(&m, &cfg, &s).unwrap();
        assert_eq!(r.predictions.len(), s.len());
        let on = TrackerConfig { use_memory: true, ..cfg };
        let t = Tracker::new(&m, on).unwrap();
        let mut st = t.init(&s.frames[0], &s.boxes[0]).unwrap();
        for f in &s.frames[1..] {
            t.step(&mut st, f).unwrap();
        }
        assert_eq!(st.memory.len(), s.len());
    }

    #[test]
    fn prediction_file_round_trip_and_determinism() {
        let (m, s) = setup();
        let a = track_sequence(&m, &TrackerConfig::default(), &s).unwrap();
        let b = track_sequence(&m, &TrackerConfig::default(), &s).unwrap();
        let (ta, tb) = (format_predictions(&a.predictions), format_predictions(&b.predictions));
        assert_eq!(ta, tb);
        assert_eq!(ta.lines().count(), s.len());
        let back = parse_predictions(&ta, Path::new("p.txt")).unwrap();
        assert_eq!(back.len(), s.len());
        assert!((back[0].bbox.cx - s.boxes[0].cx).abs() < 1e-5);
        assert!(parse_predictions("0, 1, 2, 3\n", Path::new("p.txt")).is_err());
    }
}
