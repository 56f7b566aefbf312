//! Balanced focal center loss, smooth-L1 regression loss, and their temporal combination.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorGrid, Label, LabelMaps};
use crate::error::{ensure, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Scores are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Positive set and the equally sized set of hardest negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSets {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// `S_pos = {i : y_i = 1}`; `S_neg` = the `|S_pos|` highest-scoring negatives
/// (lower index first on ties). Ignored anchors are in neither set.
pub fn build_sets(labels: &[Label], scores: &[f64]) -> Result<SampleSets> {
    ensure!(labels.len() == scores.len(), "{} labels for {} scores", labels.len(), scores.len());
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Positive).collect();
    ensure!(!pos.is_empty(), "label map has no positive anchor");
    let mut negs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Negative).collect();
    ensure!(
        negs.len() >= pos.len(),
        "only {} negatives for {} positives; cannot balance",
        negs.len(),
        pos.len()
    );
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    negs.select_nth_unstable_by(pos.len() - 1, order);
    negs.truncate(pos.len());
    negs.sort_unstable();
    Ok(SampleSets { pos, neg: negs })
}

fn pick(tape: &mut Tape, map: Var, idx: &[usize]) -> Result<Var> {
    let n = tape.value(map).numel();
    let col = tape.reshape(map, &[n, 1])?;
    tape.gather_rows(col, idx)
}

/// `−[Σ_pos (1−x)² ln x + Σ_neg x² ln(1−x)]` over the flattened score map.
pub fn center_loss(tape: &mut Tape, score: Var, sets: &SampleSets) -> Result<Var> {
    let xp = pick(tape, score, &sets.pos)?;
    let xp = tape.clamp(xp, EPS, 1.0 - EPS)?;
    let one_minus = tape.affine(xp, -1.0, 1.0)?;
    let w = tape.mul(one_minus, one_minus)?;
    let lg = tape.log(xp)?;
    let tp = tape.mul(w, lg)?;
    let sp = tape.sum(tp)?;

    let xn = pick(tape, score, &sets.neg)?;
    let xn = tape.clamp(xn, EPS, 1.0 - EPS)?;
    let w = tape.mul(xn, xn)?;
    let om = tape.affine(xn, -1.0, 1.0)?;
    let lg = tape.log(om)?;
    let tn = tape.mul(w, lg)?;
    let sn = tape.sum(tn)?;

    let total = tape.add(sp, sn)?;
    tape.affine(total, -1.0, 0.0)
}

/// Σ over positives and the 4 displacement components of smooth-L1(y − x).
pub fn regression_loss(tape: &mut Tape, reg: Var, grid: &AnchorGrid, labels: &LabelMaps, pos: &[usize]) -> Result<Var> {
    ensure!(!pos.is_empty(), "regression loss needs at least one positive");
    let mut offsets = Vec::with_capacity(4 * pos.len());
    let mut targets = Vec::with_capacity(4 * pos.len());
    for &p in pos {
        let t = labels.targets[p].ok_or_else(|| crate::DmvError::Contract(format!("anchor {p} has no regression target")))?;
        for (c, v) in t.iter().enumerate() {
            offsets.push(grid.reg_offset(p, c));
            targets.push(*v);
        }
    }
    let x = pick(tape, reg, &offsets)?;
    let y = tape.constant(Tensor::new(&[targets.len(), 1], targets)?);
    let d = tape.sub(y, x)?;
    let s = tape.smooth_l1(d)?;
    tape.sum(s)
}

/// Linear temporal weights for `n` instance frames, normalised to mean 1.
pub fn temporal_weights(n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let mean = (n as f64 + 1.0) / 2.0;
    (1..=n).map(|i| i as f64 / mean).collect()
}

/// Loss terms of one instance frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLoss {
    pub center: f64,
    pub regression: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub frames: Vec<FrameLoss>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub center: f64,
    pub regression: f64,
    pub total: f64,
}

/// Per-frame loss variables, kept on the tape until combined.
#[derive(Clone, Copy, Debug)]
pub struct FrameLossVars {
    pub center: Var,
    pub regression: Var,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Labels, balanced sets, and both loss terms for one predicted frame.
pub fn frame_loss(tape: &mut Tape, score: Var, reg: Var, grid: &AnchorGrid, labels: &LabelMaps) -> Result<FrameLossVars> {
    let sets = build_sets(&labels.labels, tape.value(score).data())?;
    ensure!(sets.pos.len() == sets.neg.len(), "unbalanced sample sets");
    let center = center_loss(tape, score, &sets)?;
    let regression = regression_loss(tape, reg, grid, labels, &sets.pos)?;
    Ok(FrameLossVars { center, regression, n_pos: sets.pos.len(), n_neg: sets.neg.len() })
}

/// `Σ_n w_n (L_c,n + λ L_b,n)` with [`temporal_weights`].
pub fn total_loss(tape: &mut Tape, frames: &[FrameLossVars], lambda: f64) -> Result<(Var, LossReport)> {
    ensure!(!frames.is_empty(), "total loss needs at least one instance frame");
    let weights = temporal_weights(frames.len());
    let mut acc: Option<Var> = None;
    let mut report_frames = Vec::with_capacity(frames.len());
    let (mut lc, mut lb) = (0.0, 0.0);
    for (f, &w) in frames.iter().zip(&weights) {
        let b = tape.affine(f.regression, lambda, 0.0)?;
        let s = tape.add(f.center, b)?;
        let s = tape.affine(s, w, 0.0)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
        let (c, r) = (tape.value(f.center).item(), tape.value(f.regression).item());
        lc += w * c;
        lb += w * r;
        report_frames.push(FrameLoss { center: c, regression: r, n_pos: f.n_pos, n_neg: f.n_neg });
    }
    let total = acc.expect("non-empty");
    let report = LossReport {
        frames: report_frames,
        weights,
        lambda,
        center: lc,
        regression: lb,
        total: tape.value(total).item(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{assign_labels, AnchorConfig, BBox};
    use Label::*;

    #[test]
    fn top_one_negative() {
        let s = build_sets(&[Positive, Negative, Negative, Negative], &[0.9, 0.8, 0.1, 0.2]).unwrap();
        assert_eq!(s, SampleSets { pos: vec![0], neg: vec![1] });
    }

    #[test]
    fn two_positives_two_negatives() {
        let s = build_sets(&[Positive, Negative, Ignore, Positive, Negative, Negative], &[0.5, 0.1, 0.99, 0.2, 0.7, 0.3]).unwrap();
        assert_eq!(s.pos, vec![0, 3]);
        assert_eq!(s.neg, vec![4, 5]);
    }

    #[test]
    fn all_ignore_is_rejected() {
        assert!(build_sets(&[Ignore, Ignore], &[0.1, 0.2]).is_err());
    }

    fn eval_center(pos: &[f64], neg: &[f64]) -> f64 {
        let mut t = Tape::new();
        let data: Vec<f64> = pos.iter().chain(neg).copied().collect();
        let x = t.constant(Tensor::from_vec(data));
        let sets = SampleSets { pos: (0..pos.len()).collect(), neg: (pos.len()..pos.len() + neg.len()).collect() };
        let l = center_loss(&mut t, x, &sets).unwrap();
        t.value(l).item()
    }

    #[test]
    fn perfect_center_prediction_is_zero() {
        assert!(eval_center(&[1.0, 1.0], &[0.0, 0.0]).abs() < 1e-12);
    }

    #[test]
    fn one_positive_at_point_nine() {
        let want = -(0.1f64).powi(2) * 0.9f64.ln();
        assert!((eval_center(&[0.9], &[]) - want).abs() < 1e-15);
        assert!((want - 1.0536e-3).abs() < 1e-7);
    }

    #[test]
    fn center_loss_decreases_with_positive_score() {
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let l = eval_center(&[i as f64 / 100.0], &[0.3]);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn smooth_l1_regions() {
        let grid = AnchorGrid::new(AnchorConfig { grid: 2, base_size: 8.0, stride: 8.0, ratios: vec![1.0], ..AnchorConfig::default() }).unwrap();
        let gt = *grid.anchor(0);
        let labels = assign_labels(&gt, &grid, 0.6, 0.3).unwrap();
        let pos = labels.positives();
        assert_eq!(pos, vec![0]);
        for (d, want) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)] {
            let mut t = Tape::new();
            // Target is 0; predicting d in the tx channel only.
            let mut reg = vec![0.0; 16];
            reg[grid.reg_offset(0, 0)] = d;
            let r = t.constant(Tensor::new(&[4, 2, 2], reg).unwrap());
            let l = regression_loss(&mut t, r, &grid, &labels, &pos).unwrap();
            assert!((t.value(l).item() - want).abs() < 1e-15, "d={d}");
        }
        let _ = BBox::new(1.0, 1.0, 1.0, 1.0);
    }

    #[test]
    fn temporal_weight_examples() {
        assert_eq!(temporal_weights(1), vec![1.0]);
        let w = temporal_weights(4);
        for (a, b) in w.iter().zip([0.4, 0.8, 1.2, 1.6]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_zero_ignores_regression() {
        let mut t = Tape::new();
        let c = t.input(Tensor::scalar(0.3));
        let r = t.input(Tensor::scalar(5.0));
        let f = FrameLossVars { center: c, regression: r, n_pos: 1, n_neg: 1 };
        let (tot, rep) = total_loss(&mut t, &[f], 0.0).unwrap();
        assert_eq!(rep.total, 0.3);
        let g = t.backward(tot).unwrap();
        assert_eq!(g.get(r).item(), 0.0);
        let (tot1, _) = total_loss(&mut t, &[f], 1.0).unwrap();
        assert!((t.value(tot1).item() - 5.3).abs() < 1e-15);
    }
}
