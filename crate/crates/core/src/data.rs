//! Sequences, search-region cropping, clip sampling, augmentation, the
//! synthetic generator, and OTB-format ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_labels, AnchorGrid, BBox, LabelMaps};
use crate::error::{ensure, DmvError, Result};
use crate::numerics::rng::{stream, DetRng};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceSource {
    Synthetic,
    Disk,
}

/// Frames with one ground-truth box (center convention, image pixels) each.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub boxes: Vec<BBox>,
    pub source: SequenceSource,
}

impl Sequence {
    pub fn new(name: impl Into<String>, frames: Vec<RgbImage>, boxes: Vec<BBox>, source: SequenceSource) -> Result<Self> {
        let s = Sequence { name: name.into(), frames, boxes, source };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.frames.len() >= 2, "sequence {} has {} frames, need at least 2", self.name, self.frames.len());
        ensure!(
            self.frames.len() == self.boxes.len(),
            "sequence {}: {} frames but {} boxes",
            self.name,
            self.frames.len(),
            self.boxes.len()
        );
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Maps image coordinates to crop coordinates: `crop = (img − origin) · scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub origin: [f64; 2],
    pub scale: f64,
}

impl CropTransform {
    pub fn to_crop(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.origin[0]) * self.scale, (p[1] - self.origin[1]) * self.scale]
    }

    pub fn to_image(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] / self.scale + self.origin[0], p[1] / self.scale + self.origin[1]]
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let [cx, cy] = self.to_crop([b.cx, b.cy]);
        BBox { cx, cy, w: b.w * self.scale, h: b.h * self.scale }
    }

    pub fn box_to_image(&self, b: &BBox) -> BBox {
        let [cx, cy] = self.to_image([b.cx, b.cy]);
        BBox { cx, cy, w: b.w / self.scale, h: b.h / self.scale }
    }
}

/// Side of the square search region around `b` before resizing.
pub fn search_side(b: &BBox, context_factor: f64) -> f64 {
    let p = (b.w + b.h) / 2.0;
    context_factor * ((b.w + p) * (b.h + p)).sqrt()
}

pub fn channel_means(img: &RgbImage) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for px in img.pixels() {
        for c in 0..3 {
            acc[c] += px.0[c] as f64;
        }
    }
    let n = (img.width() as f64 * img.height() as f64).max(1.0);
    acc.map(|v| v / n)
}

/// Raw `[3, out, out]` crop (values 0..255) centered on `center` with the given side.
///
/// Bilinear sampling; samples outside the image take the channel mean.
pub fn crop_square(frame: &RgbImage, center: [f64; 2], side: f64, out: usize) -> Result<(Tensor, CropTransform)> {
    ensure!(side.is_finite() && side > 0.0, "crop side must be positive, got {side}");
    ensure!(out > 0, "crop output size must be positive");
    let tf = CropTransform { origin: [center[0] - side / 2.0, center[1] - side / 2.0], scale: out as f64 / side };
    let mean = channel_means(frame);
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let fetch = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            mean[c]
        } else {
            frame.get_pixel(x as u32, y as u32).0[c] as f64
        }
    };
    let plane = out * out;
    let mut data = vec![0.0; 3 * plane];
    for v in 0..out {
        let iy = tf.to_image([0.0, v as f64 + 0.5])[1] - 0.5;
        let y0 = iy.floor();
        let fy = iy - y0;
        for u in 0..out {
            let ix = tf.to_image([u as f64 + 0.5, 0.0])[0] - 0.5;
            let x0 = ix.floor();
            let fx = ix - x0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for c in 0..3 {
                let top = fetch(x0, y0, c) * (1.0 - fx) + fetch(x0 + 1, y0, c) * fx;
                let bot = fetch(x0, y0 + 1, c) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, c) * fx;
                data[c * plane + v * out + u] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok((Tensor::new(&[3, out, out], data)?, tf))
}

/// Context-inflated square crop around `prior`, resized to `out × out`.
pub fn crop_search_region(frame: &RgbImage, prior: &BBox, out: usize, context_factor: f64) -> Result<(Tensor, CropTransform)> {
    prior.validate()?;
    ensure!(context_factor > 0.0, "context factor must be positive");
    crop_square(frame, [prior.cx, prior.cy], search_side(prior, context_factor), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub stretch_prob: f64,
    /// Maximum relative stretch per axis.
    pub stretch_max: f64,
    pub blur_prob: f64,
    pub gray_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.25, stretch_prob: 0.3, stretch_max: 0.1, blur_prob: 0.1, gray_prob: 0.05 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { flip_prob: 0.0, stretch_prob: 0.0, stretch_max: 0.0, blur_prob: 0.0, gray_prob: 0.0 }
    }
}

/// Mirror the crop horizontally.
pub fn flip(crop: &Tensor, b: &BBox) -> (Tensor, BBox) {
    let (c, h, w) = (crop.dim(0), crop.dim(1), crop.dim(2));
    let t = Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        crop.data()[i - x + (w - 1 - x)]
    });
    (t, BBox { cx: w as f64 - b.cx, ..*b })
}

/// Scale content about the crop center by `(sx, sy)`; boxes scale accordingly.
pub fn stretch(crop: &Tensor, b: &BBox, sx: f64, sy: f64) -> Result<(Tensor, BBox)> {
    ensure!(sx > 0.0 && sy > 0.0, "stretch factors must be positive");
    let (c, h, w) = (crop.dim(0), crop.dim(1), crop.dim(2));
    let (mx, my) = (w as f64 / 2.0, h as f64 / 2.0);
    let plane = h * w;
    let fill: Vec<f64> = (0..c).map(|ch| crop.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
    let sample = |ch: usize, x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            fill[ch]
        } else {
            crop.data()[ch * plane + y as usize * w + x as usize]
        }
    };
    let t = Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / plane;
        let (y, x) = ((i % plane) / w, i % w);
        let sxp = mx + (x as f64 + 0.5 - mx) / sx - 0.5;
        let syp = my + (y as f64 + 0.5 - my) / sy - 0.5;
        let (x0, y0) = (sxp.floor(), syp.floor());
        let (fx, fy) = (sxp - x0, syp - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let top = sample(ch, x0, y0) * (1.0 - fx) + sample(ch, x0 + 1, y0) * fx;
        let bot = sample(ch, x0, y0 + 1) * (1.0 - fx) + sample(ch, x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    });
    let nb = BBox { cx: mx + (b.cx - mx) * sx, cy: my + (b.cy - my) * sy, w: b.w * sx, h: b.h * sy };
    Ok((t, nb))
}

/// 3×3 binomial blur with edge clamping.
pub fn blur(crop: &Tensor) -> Tensor {
    let (c, h, w) = (crop.dim(0), crop.dim(1), crop.dim(2));
    let k = [0.25, 0.5, 0.25];
    let plane = h * w;
    let d = crop.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / plane;
        let (y, x) = ((i % plane) / w, i % w);
        let mut acc = 0.0;
        for (dy, ky) in k.iter().enumerate() {
            let yy = (y + dy).saturating_sub(1).min(h - 1);
            for (dx, kx) in k.iter().enumerate() {
                let xx = (x + dx).saturating_sub(1).min(w - 1);
                acc += ky * kx * d[ch * plane + yy * w + xx];
            }
        }
        acc
    })
}

/// Luminance replicated on all channels.
pub fn gray(crop: &Tensor) -> Tensor {
    let plane = crop.dim(1) * crop.dim(2);
    let d = crop.data();
    Tensor::from_fn(crop.shape(), |i| {
        let p = i % plane;
        0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p]
    })
}

/// Random flip, stretch, blur and gray, each with its own probability.
pub fn augment(crop: &Tensor, b: &BBox, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Tensor, BBox)> {
    let (mut t, mut b) = (crop.clone(), *b);
    if rng.random::<f64>() < cfg.flip_prob {
        (t, b) = flip(&t, &b);
    }
    if rng.random::<f64>() < cfg.stretch_prob {
        let sx = 1.0 + rng.random_range(-1.0..=1.0) * cfg.stretch_max;
        let sy = 1.0 + rng.random_range(-1.0..=1.0) * cfg.stretch_max;
        (t, b) = stretch(&t, &b, sx, sy)?;
    }
    if rng.random::<f64>() < cfg.blur_prob {
        t = blur(&t);
    }
    if rng.random::<f64>() < cfg.gray_prob {
        t = gray(&t);
    }
    Ok((t, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub max_skip: usize,
    pub context_factor: f64,
    /// Search-region center jitter, as a fraction of the target size.
    pub shift_jitter: f64,
    /// Log-uniform search-region scale jitter.
    pub scale_jitter: f64,
    pub augment: AugmentConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { max_skip: 100, context_factor: 2.0, shift_jitter: 0.5, scale_jitter: 0.15, augment: AugmentConfig::default() }
    }
}

/// One training frame: crop, its ground truth in crop coordinates, and the labels.
#[derive(Clone, Debug)]
pub struct TrainFrame {
    pub frame_index: usize,
    pub crop: Tensor,
    pub gt: BBox,
    pub labels: LabelMaps,
}

/// `n` frame indices, strictly increasing, with consecutive gaps in `1..=max_skip`.
pub fn sample_indices(len: usize, n: usize, max_skip: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    ensure!(n >= 1 && max_skip >= 1, "need n ≥ 1 and max_skip ≥ 1");
    ensure!(len >= n, "sequence of {len} frames is shorter than the clip length {n}");
    let mut idx = Vec::with_capacity(n);
    let mut pos = rng.random_range(0..=(len - n));
    idx.push(pos);
    for i in 1..n {
        // Leave at least one frame for each remaining pick.
        let room = len - 1 - pos - (n - 1 - i);
        pos += rng.random_range(1..=max_skip.min(room));
        idx.push(pos);
    }
    Ok(idx)
}

/// Sample `n` frames and build crops and labels; frame 0 is the initial frame.
///
/// The search region of every frame is centered on a jittered copy of its
/// ground truth; the initial frame is not jittered.
pub fn sample_training_clip(seq: &Sequence, n: usize, grid: &AnchorGrid, out: usize, cfg: &SampleConfig, rng: &mut impl Rng) -> Result<Vec<TrainFrame>> {
    let idx = sample_indices(seq.len(), n, cfg.max_skip, rng)?;
    let acfg = grid.config();
    let mut clip = Vec::with_capacity(n);
    for (j, &fi) in idx.iter().enumerate() {
        let gt = seq.boxes[fi];
        let prior = if j == 0 {
            gt
        } else {
            let s = (gt.w * gt.h).sqrt();
            let dx = rng.random_range(-1.0..=1.0) * cfg.shift_jitter * s;
            let dy = rng.random_range(-1.0..=1.0) * cfg.shift_jitter * s;
            let sc = (rng.random_range(-1.0..=1.0) * cfg.scale_jitter).exp();
            BBox { cx: gt.cx + dx, cy: gt.cy + dy, w: gt.w * sc, h: gt.h * sc }
        };
        let (crop, tf) = crop_search_region(&seq.frames[fi], &prior, out, cfg.context_factor)?;
        let (crop, gt_c) = if j == 0 { (crop, tf.box_to_crop(&gt)) } else { augment(&crop, &tf.box_to_crop(&gt), &cfg.augment, rng)? };
        let labels = assign_labels(&gt_c, grid, acfg.pos_iou, acfg.neg_iou)?;
        clip.push(TrainFrame { frame_index: fi, crop, gt: gt_c, labels });
    }
    Ok(clip)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub length: usize,
    /// Initial target size range (pixels, both axes).
    pub target_size: [f64; 2],
    /// Initial speed in pixels per frame.
    pub speed: f64,
    /// Std of the per-frame velocity perturbation.
    pub motion_noise: f64,
    /// Std of the per-frame log-scale perturbation.
    pub scale_noise: f64,
    pub distractors: usize,
    /// 1 = distractors share the target's colors, 0 = unrelated colors.
    pub distractor_similarity: f64,
    /// Inclusive frame ranges during which an occluder covers the target.
    pub occlusions: Vec<[usize; 2]>,
    /// Per-frame appearance random-walk step.
    pub drift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            width: 128,
            height: 128,
            length: 120,
            target_size: [14.0, 22.0],
            speed: 1.5,
            motion_noise: 0.3,
            scale_noise: 0.01,
            distractors: 2,
            distractor_similarity: 0.7,
            occlusions: Vec::new(),
            drift: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.length >= 2, "synthetic sequences need at least 2 frames");
        ensure!(self.width >= 16 && self.height >= 16, "canvas must be at least 16×16");
        ensure!(
            self.target_size[0] >= 2.0 && self.target_size[0] <= self.target_size[1],
            "target size range {:?} is invalid",
            self.target_size
        );
        ensure!(
            self.target_size[1] * 2.0 < self.width.min(self.height) as f64,
            "targets up to {} px do not fit the canvas",
            self.target_size[1]
        );
        ensure!((0.0..=1.0).contains(&self.distractor_similarity), "distractor similarity must be in [0,1]");
        ensure!(self.occlusions.iter().all(|o| o[0] <= o[1]), "occlusion ranges must be ordered");
        Ok(())
    }
}

/// Two-colour oriented stripe texture.
#[derive(Clone, Copy, Debug)]
struct Appearance {
    a: [f64; 3],
    b: [f64; 3],
    angle: f64,
    period: f64,
}

impl Appearance {
    fn random(rng: &mut DetRng) -> Self {
        let a = [rng.random_range(40.0..220.0), rng.random_range(40.0..220.0), rng.random_range(40.0..220.0)];
        let b = a.map(|v| 255.0 - v);
        Appearance { a, b, angle: rng.random_range(0.0..std::f64::consts::PI), period: rng.random_range(4.0..8.0) }
    }

    fn near(base: &Appearance, similarity: f64, rng: &mut DetRng) -> Self {
        let other = Appearance::random(rng);
        let mix = |x: [f64; 3], y: [f64; 3]| [0, 1, 2].map(|c| similarity * x[c] + (1.0 - similarity) * y[c]);
        Appearance {
            a: mix(base.a, other.a),
            b: mix(base.b, other.b),
            angle: other.angle,
            period: similarity * base.period + (1.0 - similarity) * other.period,
        }
    }

    fn drift(&mut self, rate: f64, rng: &mut DetRng) {
        for c in 0..3 {
            self.a[c] = (self.a[c] + rate * 255.0 * rng.random_range(-1.0..=1.0)).clamp(0.0, 255.0);
            self.b[c] = (self.b[c] + rate * 255.0 * rng.random_range(-1.0..=1.0)).clamp(0.0, 255.0);
        }
        self.angle += rate * std::f64::consts::PI * rng.random_range(-1.0..=1.0);
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let s = (u * self.angle.cos() + v * self.angle.sin()) * std::f64::consts::TAU / self.period;
        let t = 0.5 + 0.5 * s.sin();
        [0, 1, 2].map(|c| t * self.a[c] + (1.0 - t) * self.b[c])
    }
}

#[derive(Clone, Copy, Debug)]
struct Mover {
    b: BBox,
    vel: [f64; 2],
    look: Appearance,
}

impl Mover {
    fn advance(&mut self, cfg: &SynthConfig, rng: &mut DetRng, scale: bool) {
        let nx: f64 = rng.sample(rand_distr::StandardNormal);
        let ny: f64 = rng.sample(rand_distr::StandardNormal);
        self.vel[0] += cfg.motion_noise * nx;
        self.vel[1] += cfg.motion_noise * ny;
        let cap = 2.0 * cfg.speed.max(0.5);
        let norm = (self.vel[0].powi(2) + self.vel[1].powi(2)).sqrt();
        if norm > cap {
            self.vel = self.vel.map(|v| v * cap / norm);
        }
        if scale && cfg.scale_noise > 0.0 {
            let ns: f64 = rng.sample(rand_distr::StandardNormal);
            let f = (cfg.scale_noise * ns).exp();
            let (lo, hi) = (cfg.target_size[0] * 0.7, cfg.target_size[1] * 1.3);
            self.b.w = (self.b.w * f).clamp(lo, hi);
            self.b.h = (self.b.h * f).clamp(lo, hi);
        }
        self.b.cx += self.vel[0];
        self.b.cy += self.vel[1];
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let (hw, hh) = (self.b.w / 2.0, self.b.h / 2.0);
        if self.b.cx < hw || self.b.cx > w - hw {
            self.vel[0] = -self.vel[0];
            self.b.cx = self.b.cx.clamp(hw, w - hw);
        }
        if self.b.cy < hh || self.b.cy > h - hh {
            self.vel[1] = -self.vel[1];
            self.b.cy = self.b.cy.clamp(hh, h - hh);
        }
    }
}

fn spawn(cfg: &SynthConfig, look: Appearance, rng: &mut DetRng) -> Mover {
    let w = rng.random_range(cfg.target_size[0]..=cfg.target_size[1]);
    let h = rng.random_range(cfg.target_size[0]..=cfg.target_size[1]);
    let cx = rng.random_range(w..(cfg.width as f64 - w));
    let cy = rng.random_range(h..(cfg.height as f64 - h));
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    Mover { b: BBox { cx, cy, w, h }, vel: [cfg.speed * a.cos(), cfg.speed * a.sin()], look }
}

/// Smooth random background: bilinear interpolation of a coarse colour lattice plus pixel noise.
struct Background {
    lattice: Vec<[f64; 3]>,
    cells: usize,
    noise_seed: u64,
}

impl Background {
    fn new(rng: &mut DetRng) -> Self {
        let cells = 5;
        let lattice = (0..(cells + 1) * (cells + 1))
            .map(|_| [rng.random_range(60.0..190.0), rng.random_range(60.0..190.0), rng.random_range(60.0..190.0)])
            .collect();
        Background { lattice, cells, noise_seed: rng.random() }
    }

    fn render(&self, w: u32, h: u32, frame: usize) -> Vec<[f64; 3]> {
        let mut rng = stream(self.noise_seed, frame as u64);
        let n = self.cells;
        let mut out = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                let gx = x as f64 / w as f64 * n as f64;
                let gy = y as f64 / h as f64 * n as f64;
                let (ix, iy) = ((gx as usize).min(n - 1), (gy as usize).min(n - 1));
                let (fx, fy) = (gx - ix as f64, gy - iy as f64);
                let at = |i: usize, j: usize| self.lattice[j * (n + 1) + i];
                let mut c = [0.0; 3];
                for (ch, cv) in c.iter_mut().enumerate() {
                    let top = at(ix, iy)[ch] * (1.0 - fx) + at(ix + 1, iy)[ch] * fx;
                    let bot = at(ix, iy + 1)[ch] * (1.0 - fx) + at(ix + 1, iy + 1)[ch] * fx;
                    *cv = top * (1.0 - fy) + bot * fy + rng.random_range(-6.0..=6.0);
                }
                out.push(c);
            }
        }
        out
    }
}

fn paint(canvas: &mut [[f64; 3]], owner: &mut [u8], w: u32, h: u32, m: &Mover, id: u8) {
    let (x1, y1) = (m.b.x1().round().max(0.0) as i64, m.b.y1().round().max(0.0) as i64);
    let (x2, y2) = (m.b.x2().round().min(w as f64) as i64, m.b.y2().round().min(h as f64) as i64);
    for y in y1..y2 {
        for x in x1..x2 {
            let (u, v) = (x as f64 + 0.5 - m.b.x1(), y as f64 + 0.5 - m.b.y1());
            let i = (y as u32 * w + x as u32) as usize;
            canvas[i] = m.look.color(u, v);
            owner[i] = id;
        }
    }
}

/// Synthetic sequence plus, per frame, the fraction of the target's box pixels left visible.
pub fn generate_with_visibility(cfg: &SynthConfig) -> Result<(Sequence, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, 0);
    let bg = Background::new(&mut rng);
    let look = Appearance::random(&mut rng);
    let mut target = spawn(cfg, look, &mut rng);
    let mut distractors: Vec<Mover> = (0..cfg.distractors)
        .map(|_| {
            let l = Appearance::near(&look, cfg.distractor_similarity, &mut rng);
            spawn(cfg, l, &mut rng)
        })
        .collect();
    let (w, h) = (cfg.width, cfg.height);
    let mut frames = Vec::with_capacity(cfg.length);
    let mut boxes = Vec::with_capacity(cfg.length);
    let mut visible = Vec::with_capacity(cfg.length);
    for f in 0..cfg.length {
        if f > 0 {
            target.advance(cfg, &mut rng, true);
            target.look.drift(cfg.drift, &mut rng);
            for d in &mut distractors {
                d.advance(cfg, &mut rng, false);
            }
        }
        let mut canvas = bg.render(w, h, f);
        let mut owner = vec![0u8; canvas.len()];
        for d in &distractors {
            paint(&mut canvas, &mut owner, w, h, d, 2);
        }
        paint(&mut canvas, &mut owner, w, h, &target, 1);
        if cfg.occlusions.iter().any(|o| (o[0]..=o[1]).contains(&f)) {
            // Occluder slightly larger than the target, offset toward one corner.
            let occ = Mover {
                b: BBox { cx: target.b.cx + 0.15 * target.b.w, cy: target.b.cy + 0.1 * target.b.h, w: target.b.w * 1.1, h: target.b.h * 1.1 },
                vel: [0.0; 2],
                look: Appearance { a: [90.0; 3], b: [110.0; 3], angle: 0.0, period: 3.0 },
            };
            paint(&mut canvas, &mut owner, w, h, &occ, 3);
        }
        let (mut inside, mut seen) = (0usize, 0usize);
        let b = target.b;
        for y in (b.y1().round().max(0.0) as u32)..(b.y2().round().min(h as f64) as u32) {
            for x in (b.x1().round().max(0.0) as u32)..(b.x2().round().min(w as f64) as u32) {
                inside += 1;
                seen += usize::from(owner[(y * w + x) as usize] == 1);
            }
        }
        visible.push(if inside == 0 { 0.0 } else { seen as f64 / inside as f64 });
        let img = RgbImage::from_fn(w, h, |x, y| {
            let c = canvas[(y * w + x) as usize];
            image::Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
        });
        frames.push(img);
        boxes.push(target.b);
    }
    let seq = Sequence::new(format!("synth-{}", cfg.seed), frames, boxes, SequenceSource::Synthetic)?;
    Ok((seq, visible))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Sequence> {
    Ok(generate_with_visibility(cfg)?.0)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

fn parse_box_line(line: &str, path: &Path, lineno: usize) -> Result<BBox> {
    let parts: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
    let err = |msg: String| DmvError::Parse { path: path.to_path_buf(), line: lineno, msg };
    if parts.len() != 4 {
        return Err(err(format!("expected 4 values \"x,y,w,h\", found {}", parts.len())));
    }
    let mut v = [0.0; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse::<f64>().map_err(|e| err(format!("{p:?}: {e}")))?;
    }
    BBox::from_top_left(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))
}

/// Ground-truth lines `x,y,w,h` (top-left convention; commas, tabs or spaces).
pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<BBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_box_line(l.trim(), path, i + 1))
        .collect()
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let list = dir.join("images.txt");
    if list.is_file() {
        return Ok(fs::read_to_string(&list)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| dir.join(l))
            .collect());
    }
    let img_dir = if dir.join("img").is_dir() { dir.join("img") } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&img_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn find_groundtruth(dir: &Path) -> Result<PathBuf> {
    for name in ["groundtruth_rect.txt", "groundtruth.txt"] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(DmvError::Data(format!("{}: no groundtruth_rect.txt or groundtruth.txt", dir.display())))
}

/// Load an OTB-style directory.
///
/// Images come from `images.txt` (one relative path per line) when present,
/// otherwise from the sorted image files of `img/` (or the directory itself).
/// Boxes come from `groundtruth_rect.txt` or `groundtruth.txt`.
pub fn load_otb_sequence(dir: &Path) -> Result<Sequence> {
    ensure_dir(dir)?;
    let gt_path = find_groundtruth(dir)?;
    let boxes = parse_groundtruth(&fs::read_to_string(&gt_path)?, &gt_path)?;
    let images = list_images(dir)?;
    if images.len() != boxes.len() {
        return Err(DmvError::Data(format!(
            "{}: {} images but {} ground-truth boxes",
            dir.display(),
            images.len(),
            boxes.len()
        )));
    }
    let frames = images
        .iter()
        .map(|p| image::open(p).map(|i| i.to_rgb8()).map_err(DmvError::from))
        .collect::<Result<Vec<_>>>()?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("sequence").to_string();
    Sequence::new(name, frames, boxes, SequenceSource::Disk).map_err(|e| DmvError::Data(e.to_string()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(DmvError::Data(format!("{} is not a directory", dir.display())))
    }
}

/// Write a sequence in the layout read by [`load_otb_sequence`].
pub fn save_otb_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir)?;
    let mut gt = String::new();
    for (i, (f, b)) in seq.frames.iter().zip(&seq.boxes).enumerate() {
        f.save(img_dir.join(format!("{:04}.png", i + 1)))?;
        let [x, y, w, h] = b.to_top_left();
        gt.push_str(&format!("{x},{y},{w},{h}\n"));
    }
    fs::write(dir.join("groundtruth_rect.txt"), gt)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{iou, AnchorConfig};

    fn checker(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn centered_target_gives_centered_crop() {
        let img = checker(100, 100);
        let b = BBox::new(50.0, 50.0, 10.0, 10.0).unwrap();
        let (_, tf) = crop_search_region(&img, &b, 64, 2.0).unwrap();
        let c = tf.box_to_crop(&b);
        assert!((c.cx - 32.0).abs() < 1e-12 && (c.cy - 32.0).abs() < 1e-12);
        // Square target: crop side is four target sides.
        assert!((c.w - 16.0).abs() < 1e-12);
    }

    #[test]
    fn transform_round_trip() {
        let mut rng = stream(5, 0);
        for _ in 0..1000 {
            let tf = CropTransform { origin: [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)], scale: rng.random_range(0.1..4.0) };
            let p = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)];
            let q = tf.to_image(tf.to_crop(p));
            assert!((q[0] - p[0]).abs() < 1e-6 && (q[1] - p[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_side_is_linear_in_target_size() {
        let b = BBox::new(0.0, 0.0, 12.0, 7.0).unwrap();
        let b2 = BBox { w: 24.0, h: 14.0, ..b };
        assert!((search_side(&b2, 2.0) - 2.0 * search_side(&b, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn out_of_image_is_mean_padded() {
        let img = RgbImage::from_pixel(10, 10, image::Rgb([10, 20, 30]));
        let (t, _) = crop_square(&img, [-100.0, -100.0], 20.0, 8).unwrap();
        assert!(t.data()[..64].iter().all(|v| (*v - 10.0).abs() < 1e-12));
        assert!(t.data()[128..].iter().all(|v| (*v - 30.0).abs() < 1e-12));
    }

    #[test]
    fn identity_crop_reproduces_pixels() {
        let img = checker(16, 16);
        let (t, _) = crop_square(&img, [8.0, 8.0], 16.0, 16).unwrap();
        for y in 0..16u32 {
            for x in 0..16u32 {
                for c in 0..3 {
                    assert_eq!(t.at(&[c, y as usize, x as usize]), img.get_pixel(x, y).0[c] as f64);
                }
            }
        }
    }

    #[test]
    fn degenerate_prior_rejected() {
        let img = checker(16, 16);
        assert!(crop_search_region(&img, &BBox { cx: 8.0, cy: 8.0, w: 0.0, h: 3.0 }, 8, 2.0).is_err());
    }

    fn rand_crop(seed: u64) -> Tensor {
        let mut rng = stream(seed, 0);
        Tensor::from_fn(&[3, 12, 12], |_| rng.random_range(0.0..255.0))
    }

    #[test]
    fn flip_is_an_involution() {
        let t = rand_crop(1);
        let b = BBox::new(3.0, 4.0, 2.0, 5.0).unwrap();
        let (t1, b1) = flip(&t, &b);
        let (t2, b2) = flip(&t1, &b1);
        assert_eq!(t2, t);
        assert_eq!(b2, b);
        assert_eq!(b1.cx, 9.0);
    }

    #[test]
    fn gray_has_equal_channels() {
        let g = gray(&rand_crop(2));
        for p in 0..144 {
            assert_eq!(g.data()[p], g.data()[144 + p]);
            assert_eq!(g.data()[p], g.data()[288 + p]);
        }
    }

    #[test]
    fn stretch_scales_box_and_content() {
        let b = BBox::new(4.0, 7.0, 2.0, 3.0).unwrap();
        let t = rand_crop(3);
        let (_, nb) = stretch(&t, &b, 1.5, 0.5).unwrap();
        assert!((nb.w - 3.0).abs() < 1e-12 && (nb.h - 1.5).abs() < 1e-12);
        // Oracle: the stretched box is the image of the original corners under the same map.
        let map = |x: f64, y: f64| (6.0 + (x - 6.0) * 1.5, 6.0 + (y - 6.0) * 0.5);
        let (x1, y1) = map(b.x1(), b.y1());
        let (x2, y2) = map(b.x2(), b.y2());
        assert!((nb.x1() - x1).abs() < 1e-12 && (nb.y1() - y1).abs() < 1e-12);
        assert!((nb.x2() - x2).abs() < 1e-12 && (nb.y2() - y2).abs() < 1e-12);
        // Unit stretch is the identity on pixels.
        let (same, _) = stretch(&t, &b, 1.0, 1.0).unwrap();
        assert!(same.max_abs_diff(&t) < 1e-9);
    }

    #[test]
    fn blur_and_gray_leave_box_alone() {
        let b = BBox::new(4.0, 7.0, 2.0, 3.0).unwrap();
        let cfg = AugmentConfig { blur_prob: 1.0, gray_prob: 1.0, ..AugmentConfig::none() };
        let (_, nb) = augment(&rand_crop(4), &b, &cfg, &mut stream(0, 0)).unwrap();
        assert_eq!(nb, b);
    }

    #[test]
    fn transforms_commute_with_box_mapping() {
        let mut rng = stream(8, 0);
        for _ in 0..200 {
            let img_box = BBox::new(rng.random_range(20.0..80.0), rng.random_range(20.0..80.0), rng.random_range(4.0..20.0), rng.random_range(4.0..20.0)).unwrap();
            let tf = CropTransform { origin: [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)], scale: rng.random_range(0.5..2.0) };
            let crop_box = tf.box_to_crop(&img_box);
            // Mapping corners then cropping equals cropping the box.
            let [x1, y1] = tf.to_crop([img_box.x1(), img_box.y1()]);
            let [x2, y2] = tf.to_crop([img_box.x2(), img_box.y2()]);
            assert!((crop_box.x1() - x1).abs() < 1e-6 && (crop_box.y2() - y2).abs() < 1e-6);
            assert!((crop_box.x2() - x2).abs() < 1e-6 && (crop_box.y1() - y1).abs() < 1e-6);
            let back = tf.box_to_image(&crop_box);
            assert!((back.cx - img_box.cx).abs() < 1e-6 && (back.w - img_box.w).abs() < 1e-6);
        }
    }

    #[test]
    fn sampled_gaps_respect_max_skip() {
        let mut rng = stream(9, 0);
        for i in 0..10_000 {
            let n = 2 + i % 4;
            let len = n + (i * 37) % 400;
            let idx = sample_indices(len, n, 100, &mut rng).unwrap();
            assert_eq!(idx.len(), n);
            assert!(*idx.last().unwrap() < len);
            for w in idx.windows(2) {
                assert!(w[1] > w[0] && w[1] - w[0] <= 100);
            }
        }
        assert!(sample_indices(3, 4, 100, &mut rng).is_err());
    }

    #[test]
    fn clip_labels_match_anchor_oracle() {
        let seq = generate_synthetic(&SynthConfig { length: 20, ..SynthConfig::default() }).unwrap();
        let grid = AnchorGrid::new(AnchorConfig { ratios: vec![0.5, 1.0, 2.0], base_size: 16.0, stride: 8.0, grid: 8, ..AnchorConfig::default() }).unwrap();
        let clip = sample_training_clip(&seq, 2, &grid, 64, &SampleConfig::default(), &mut stream(1, 0)).unwrap();
        assert_eq!(clip.len(), 2);
        assert!(clip[0].frame_index < clip[1].frame_index);
        for f in &clip {
            let ious: Vec<f64> = grid.boxes().iter().map(|a| iou(&f.gt, a).unwrap()).collect();
            let best = ious.iter().cloned().fold(f64::MIN, f64::max);
            let forced = best < 0.6;
            assert_eq!(f.labels.forced, forced);
            for (i, v) in ious.iter().enumerate() {
                let expect_pos = if forced { ious.iter().position(|x| *x == best) == Some(i) } else { *v >= 0.6 };
                assert_eq!(f.labels.labels[i] == crate::anchors::Label::Positive, expect_pos);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig { length: 10, seed: 42, ..SynthConfig::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.frames[0], c.frames[0]);
    }

    #[test]
    fn static_target_keeps_its_box() {
        let cfg = SynthConfig { length: 15, speed: 0.0, motion_noise: 0.0, scale_noise: 0.0, drift: 0.0, ..SynthConfig::default() };
        let s = generate_synthetic(&cfg).unwrap();
        assert!(s.boxes.iter().all(|b| *b == s.boxes[0]));
    }

    #[test]
    fn occlusion_hides_target_in_schedule() {
        let cfg = SynthConfig { length: 20, distractors: 0, occlusions: vec![[10, 15]], ..SynthConfig::default() };
        let (_, vis) = generate_with_visibility(&cfg).unwrap();
        for (f, v) in vis.iter().enumerate() {
            if (10..=15).contains(&f) {
                assert!(*v < 0.5, "frame {f}: visible {v}");
            } else {
                assert!(*v > 0.99, "frame {f}: visible {v}");
            }
        }
    }

    #[test]
    fn otb_conventions_and_errors() {
        let p = Path::new("gt.txt");
        let b = parse_groundtruth("10,20,30,40\n", p).unwrap();
        assert_eq!((b[0].cx, b[0].cy, b[0].w, b[0].h), (25.0, 40.0, 30.0, 40.0));
        let tabs = parse_groundtruth("1\t2\t3\t4\n\n5 6 7 8\n", p).unwrap();
        assert_eq!(tabs.len(), 2);
        match parse_groundtruth("1,2,3,4\n1,2,x,4\n", p) {
            Err(DmvError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn otb_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate_synthetic(&SynthConfig { length: 3, ..SynthConfig::default() }).unwrap();
        save_otb_sequence(&seq, dir.path()).unwrap();
        let back = load_otb_sequence(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.frames, seq.frames);
        for (a, b) in back.boxes.iter().zip(&seq.boxes) {
            assert!((a.cx - b.cx).abs() < 1e-9 && (a.w - b.w).abs() < 1e-9);
        }
        let gt = dir.path().join("groundtruth_rect.txt");
        let text = fs::read_to_string(&gt).unwrap();
        fs::write(&gt, text.lines().take(2).collect::<Vec<_>>().join("\n")).unwrap();
        assert!(matches!(load_otb_sequence(dir.path()), Err(DmvError::Data(_))));
    }
}
