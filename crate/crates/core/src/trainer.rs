//! Clip-level training: roll the tracker over sampled frames, accumulate the
//! temporally weighted loss, and apply SGD with momentum and weight decay.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_training_clip, SampleConfig, Sequence, TrainFrame};
use crate::error::{ensure, DmvError, Result};
use crate::loss::{frame_loss, total_loss, LossReport};
use crate::model::{Model, ModelConfig};
use crate::numerics::rng::{derive_seed, stream};
use crate::numerics::{Container, ParamSet, Tape, Tensor};

pub const CHECKPOINT_KIND: &str = "dmv_checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub start: usize,
    pub end: usize,
    /// Steps between increments of the clip length; 0 means `iterations / 5`.
    pub every: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig { start: 2, end: 5, every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative decay reached after `steps_per_decay` steps.
    pub lr_decay: f64,
    /// 0 means `iterations / 5`.
    pub steps_per_decay: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the regression loss.
    pub lambda: f64,
    pub curriculum: CurriculumConfig,
    pub sample: SampleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iterations: 2000,
            batch_size: 4,
            lr: 1e-3,
            lr_decay: 0.05,
            steps_per_decay: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: 1.0,
            curriculum: CurriculumConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), "learning rate must be non-negative");
        ensure!(self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr decay must be in (0, 1]");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)");
        ensure!(self.weight_decay >= 0.0 && self.lambda >= 0.0, "weight decay and lambda must be non-negative");
        ensure!(
            self.curriculum.start >= 2 && self.curriculum.start <= self.curriculum.end,
            "curriculum must satisfy 2 <= start <= end"
        );
        Ok(())
    }

    pub fn steps_per_decay(&self) -> usize {
        if self.steps_per_decay > 0 {
            self.steps_per_decay
        } else {
            (self.iterations / 5).max(1)
        }
    }

    /// Learning rate at `step` before any fault-recovery reductions.
    pub fn scheduled_lr(&self, step: usize) -> f64 {
        self.lr * self.lr_decay.powf(step as f64 / self.steps_per_decay() as f64)
    }

    /// Clip length (initial frame included) at `step`.
    pub fn clip_len(&self, step: usize) -> usize {
        let c = &self.curriculum;
        let every = if c.every > 0 { c.every } else { (self.iterations / 5).max(1) };
        (c.start + step / every).min(c.end)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: usize,
    pub lr: f64,
    pub clip_len: usize,
    pub l_c: f64,
    pub l_b: f64,
    pub loss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// False when the step was aborted on a numeric fault.
    pub applied: bool,
    pub seconds: f64,
}

/// Loss and parameter gradients of one clip.
pub fn clip_gradients(model: &Model, clip: &[TrainFrame], lambda: f64) -> Result<(BTreeMap<String, Tensor>, LossReport)> {
    ensure!(clip.len() >= 2, "a training clip needs an initial and at least one instance frame");
    let grid = model.grid();
    let mut tape = Tape::new();
    let first = &clip[0];
    let key0 = model.embed(&mut tape, &first.crop)?;
    let s0 = tape.constant(first.labels.score_map(grid));
    let r0 = tape.constant(first.labels.reg_map(grid));
    let v0 = model.encode_value(&mut tape, key0, s0, r0)?;
    let (mut keys, mut values) = (vec![key0], vec![v0]);
    let mut frames = Vec::with_capacity(clip.len() - 1);
    for f in &clip[1..] {
        let q = model.embed(&mut tape, &f.crop)?;
        let pred = model.predict(&mut tape, &model.config.retrieval, q, &keys, &values)?;
        frames.push(frame_loss(&mut tape, pred.score, pred.reg, grid, &f.labels)?);
        // Training memory takes every intermediate prediction.
        let v = model.encode_value(&mut tape, q, pred.score, pred.reg)?;
        keys.push(q);
        values.push(v);
    }
    let (loss, report) = total_loss(&mut tape, &frames, lambda)?;
    let grads = tape.backward(loss)?.params(&tape);
    Ok((grads, report))
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    velocity: ParamSet,
    step: usize,
    /// Product of all fault-recovery halvings.
    lr_scale: f64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut velocity = ParamSet::new();
        for (n, t) in model.params.iter() {
            velocity.insert(n.clone(), Tensor::zeros(t.shape()));
        }
        Ok(Trainer { model, config, velocity, step: 0, lr_scale: 1.0 })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.scheduled_lr(self.step) * self.lr_scale
    }

    /// Sample this step's batch; the draw depends only on the seed and step number.
    pub fn sample_batch(&self, seqs: &[Sequence]) -> Result<Vec<Vec<TrainFrame>>> {
        ensure!(!seqs.is_empty(), "no training sequences");
        let n = self.config.clip_len(self.step);
        let mut rng = stream(derive_seed(self.config.seed, 0x5eed), self.step as u64);
        let mut batch = Vec::with_capacity(self.config.batch_size);
        let mut misses = 0;
        while batch.len() < self.config.batch_size {
            let seq = &seqs[rng.random_range(0..seqs.len())];
            if seq.len() < n {
                log::warn!("sequence {} has {} frames, shorter than clip length {n}; skipped", seq.name, seq.len());
                misses += 1;
                ensure!(misses < 100 * seqs.len(), "no sequence is long enough for clips of {n} frames");
                continue;
            }
            let clip = sample_training_clip(seq, n, self.model.grid(), self.model.input_size(), &self.config.sample, &mut rng)?;
            batch.push(clip);
        }
        Ok(batch)
    }

    /// Summed-gradient update over the clips of one batch.
    pub fn step_on(&mut self, batch: &[Vec<TrainFrame>]) -> Result<StepReport> {
        ensure!(!batch.is_empty(), "empty batch");
        let t0 = Instant::now();
        let lr = self.lr();
        let clip_len = batch[0].len();
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut l_c, mut l_b, mut loss, mut n_pos, mut n_neg) = (0.0, 0.0, 0.0, 0, 0);
        let mut fault = None;
        for clip in batch {
            match clip_gradients(&self.model, clip, self.config.lambda) {
                Ok((g, r)) => {
                    for (name, t) in g {
                        match sum.get_mut(&name) {
                            Some(acc) => acc.accumulate(&t),
                            None => {
                                sum.insert(name, t);
                            }
                        }
                    }
                    l_c += r.center;
                    l_b += r.regression;
                    loss += r.total;
                    n_pos += r.frames.iter().map(|f| f.n_pos).sum::<usize>();
                    n_neg += r.frames.iter().map(|f| f.n_neg).sum::<usize>();
                }
                Err(DmvError::NumericFault(m)) => {
                    fault = Some(m);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if fault.is_none() && !(loss.is_finite() && sum.values().all(Tensor::is_finite)) {
            fault = Some("non-finite loss or gradient".into());
        }
        let applied = fault.is_none();
        if let Some(m) = fault {
            log::warn!("step {}: {m}; update skipped, learning rate halved", self.step);
            self.lr_scale *= 0.5;
        } else {
            self.apply(&sum, lr)?;
        }
        let report = StepReport {
            iter: self.step,
            lr,
            clip_len,
            l_c,
            l_b,
            loss,
            n_pos,
            n_neg,
            applied,
            seconds: t0.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(report)
    }

    /// `v ← μ v + (g + wd·p)`, `p ← p − lr · v`.
    fn apply(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        let names: Vec<String> = self.model.params.names().cloned().collect();
        for name in names {
            let p = self.model.params.get_mut(&name).expect("listed");
            let v = self.velocity.get_mut(&name).ok_or_else(|| DmvError::Contract(format!("no velocity for {name}")))?;
            let g = grads.get(&name);
            let pd = p.data().to_vec();
            let mut vd = v.data().to_vec();
            for (i, vi) in vd.iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                *vi = mu * *vi + gi + wd * pd[i];
            }
            let np: Vec<f64> = pd.iter().zip(&vd).map(|(p, v)| p - lr * v).collect();
            *v = Tensor::new(v.shape(), vd)?;
            *p = Tensor::new(p.shape(), np)?;
        }
        Ok(())
    }

    pub fn train_step(&mut self, seqs: &[Sequence]) -> Result<StepReport> {
        let batch = self.sample_batch(seqs)?;
        self.step_on(&batch)
    }

    /// Train until `config.iterations`, writing one JSON line per step to `log`.
    pub fn run(&mut self, seqs: &[Sequence], mut log: Option<&mut dyn Write>) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while self.step < self.config.iterations {
            let r = self.train_step(seqs)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&r)?)?;
            }
            log::debug!("iter {} loss {:.4} lr {:.2e}", r.iter, r.loss, r.lr);
            reports.push(r);
        }
        Ok(reports)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "model": self.model.config,
            "train": self.config,
            "step": self.step,
            "lr_scale": self.lr_scale,
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        for (n, t) in self.model.params.iter() {
            c.tensors.insert(format!("param.{n}"), t.clone());
        }
        for (n, t) in self.velocity.iter() {
            c.tensors.insert(format!("velocity.{n}"), t.clone());
        }
        Ok(c)
    }

    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn from_container(c: &Container) -> Result<Trainer> {
        if c.kind != CHECKPOINT_KIND {
            return Err(DmvError::Container(format!("expected a {CHECKPOINT_KIND} container, found {}", c.kind)));
        }
        let bad = |what: &str| DmvError::Container(format!("checkpoint meta lacks {what}"));
        let model = Model::from_container(c)?;
        let config: TrainConfig = serde_json::from_value(c.meta.get("train").cloned().ok_or_else(|| bad("train"))?)?;
        let step = c.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| bad("step"))? as usize;
        let lr_scale = c.meta.get("lr_scale").and_then(|v| v.as_f64()).ok_or_else(|| bad("lr_scale"))?;
        let mut velocity = ParamSet::new();
        for (n, t) in model.params.iter() {
            let v = c.tensor(&format!("velocity.{n}")).map_err(|e| DmvError::Container(e.to_string()))?;
            ensure!(v.shape() == t.shape(), "velocity {n} has the wrong shape");
            velocity.insert(n.clone(), v.clone());
        }
        config.validate()?;
        Ok(Trainer { model, config, velocity, step, lr_scale })
    }

    pub fn restore(path: &Path) -> Result<Trainer> {
        Trainer::from_container(&Container::read(path)?)
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model.config
    }
}
