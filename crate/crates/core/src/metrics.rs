//! Single-object tracking metrics: success and precision curves, normalized
//! precision, average overlap and success rates.
//!
//! Conventions: a frame counts at a threshold when its IoU is `>=` the
//! threshold (or its center error `<=` the pixel threshold). The success curve
//! uses the 21 thresholds `0, 0.05, …, 1`; precision uses integer pixel
//! thresholds `0..=50`; normalized precision uses `0, 0.01, …, 0.5`, where the
//! center error is divided per axis by the ground-truth width and height.
//! AUCs are plain means over the threshold grid. A missing prediction has
//! IoU 0 and infinite center error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anchors::{iou_unchecked, BBox};
use crate::error::{ensure, Result};

pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64).collect()
}

pub fn normalized_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub auc: f64,
}

impl Curve {
    fn build(thresholds: Vec<f64>, hit: impl Fn(f64) -> usize, n: usize) -> Curve {
        let values: Vec<f64> = thresholds.iter().map(|t| hit(*t) as f64 / n as f64).collect();
        let auc = values.iter().sum::<f64>() / values.len() as f64;
        Curve { thresholds, values, auc }
    }

    /// Value at the threshold equal to `t`.
    pub fn at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|x| (x - t).abs() < 1e-12).map(|i| self.values[i])
    }
}

fn check(pred: &[Option<BBox>], gt: &[BBox]) -> Result<()> {
    ensure!(pred.len() == gt.len(), "{} predictions for {} ground-truth boxes", pred.len(), gt.len());
    ensure!(!gt.is_empty(), "no frames to evaluate");
    for g in gt {
        g.validate()?;
    }
    Ok(())
}

fn usable(b: &Option<BBox>) -> Option<&BBox> {
    b.as_ref().filter(|b| b.validate().is_ok())
}

pub fn frame_ious(pred: &[Option<BBox>], gt: &[BBox]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| usable(p).map_or(0.0, |p| iou_unchecked(p, g))).collect())
}

pub fn center_errors(pred: &[Option<BBox>], gt: &[BBox]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| usable(p).map_or(f64::INFINITY, |p| p.center_distance(g))).collect())
}

pub fn normalized_errors(pred: &[Option<BBox>], gt: &[BBox]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| usable(p).map_or(f64::INFINITY, |p| ((p.cx - g.cx) / g.w).hypot((p.cy - g.cy) / g.h)))
        .collect())
}

pub fn success_curve(pred: &[Option<BBox>], gt: &[BBox]) -> Result<Curve> {
    let ious = frame_ious(pred, gt)?;
    Ok(Curve::build(success_thresholds(), |t| ious.iter().filter(|v| **v >= t).count(), ious.len()))
}

pub fn precision_curve(pred: &[Option<BBox>], gt: &[BBox]) -> Result<Curve> {
    let err = center_errors(pred, gt)?;
    Ok(Curve::build(precision_thresholds(), |t| err.iter().filter(|e| **e <= t).count(), err.len()))
}

pub fn normalized_precision(pred: &[Option<BBox>], gt: &[BBox]) -> Result<Curve> {
    let err = normalized_errors(pred, gt)?;
    Ok(Curve::build(normalized_thresholds(), |t| err.iter().filter(|e| **e <= t).count(), err.len()))
}

/// Average overlap and success rates at IoU 0.5 and 0.75.
pub fn ao_sr(pred: &[Option<BBox>], gt: &[BBox]) -> Result<(f64, f64, f64)> {
    let ious = frame_ious(pred, gt)?;
    let n = ious.len() as f64;
    let frac = |t: f64| ious.iter().filter(|v| **v >= t).count() as f64 / n;
    Ok((ious.iter().sum::<f64>() / n, frac(0.5), frac(0.75)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub tag: Option<String>,
    pub frames: usize,
    pub success_auc: f64,
    pub precision_20: f64,
    pub p_norm_auc: f64,
    pub ao: f64,
    pub sr_50: f64,
    pub sr_75: f64,
    pub success_curve: Curve,
    pub precision_curve: Curve,
    pub p_norm_curve: Curve,
}

pub fn evaluate_sequence(name: &str, pred: &[Option<BBox>], gt: &[BBox]) -> Result<SequenceMetrics> {
    let success = success_curve(pred, gt)?;
    let precision = precision_curve(pred, gt)?;
    let pnorm = normalized_precision(pred, gt)?;
    let (ao, sr_50, sr_75) = ao_sr(pred, gt)?;
    Ok(SequenceMetrics {
        name: name.to_string(),
        tag: None,
        frames: gt.len(),
        success_auc: success.auc,
        precision_20: precision.at(20.0).expect("20 px is on the grid"),
        p_norm_auc: pnorm.auc,
        ao,
        sr_50,
        sr_75,
        success_curve: success,
        precision_curve: precision,
        p_norm_curve: pnorm,
    })
}

/// Means over sequences of every scalar metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub success_auc: f64,
    pub precision_20: f64,
    pub p_norm_auc: f64,
    pub ao: f64,
    pub sr_50: f64,
    pub sr_75: f64,
}

impl MeanMetrics {
    pub fn of<'a>(seqs: impl IntoIterator<Item = &'a SequenceMetrics>) -> MeanMetrics {
        let mut m = MeanMetrics::default();
        let mut n = 0.0;
        for s in seqs {
            m.success_auc += s.success_auc;
            m.precision_20 += s.precision_20;
            m.p_norm_auc += s.p_norm_auc;
            m.ao += s.ao;
            m.sr_50 += s.sr_50;
            m.sr_75 += s.sr_75;
            n += 1.0;
        }
        if n > 0.0 {
            for v in [&mut m.success_auc, &mut m.precision_20, &mut m.p_norm_auc, &mut m.ao, &mut m.sr_50, &mut m.sr_75] {
                *v /= n;
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceMetrics>,
    pub mean: MeanMetrics,
}

impl EvalReport {
    pub fn new(sequences: Vec<SequenceMetrics>) -> Result<EvalReport> {
        ensure!(!sequences.is_empty(), "evaluation report needs at least one sequence");
        let mean = MeanMetrics::of(&sequences);
        Ok(EvalReport { sequences, mean })
    }

    /// Means per sequence tag; untagged sequences fall under `""`.
    pub fn by_tag(&self) -> BTreeMap<String, MeanMetrics> {
        let mut groups: BTreeMap<String, Vec<&SequenceMetrics>> = BTreeMap::new();
        for s in &self.sequences {
            groups.entry(s.tag.clone().unwrap_or_default()).or_default().push(s);
        }
        groups.into_iter().map(|(k, v)| (k, MeanMetrics::of(v))).collect()
    }

    /// Tab-separated `threshold<TAB>value` rows for each curve of each sequence.
    pub fn curve_files(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for s in &self.sequences {
            for (kind, c) in [("success", &s.success_curve), ("precision", &s.precision_curve), ("p_norm", &s.p_norm_curve)] {
                let body: String = c.thresholds.iter().zip(&c.values).map(|(t, v)| format!("{t}\t{v}\n")).collect();
                out.push((format!("{}.{kind}.tsv", s.name), body));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn exact_predictions_score_one() {
        let gt = vec![b(10.3, 7.1, 4.7, 3.3), b(1.0, 2.0, 0.3, 0.9)];
        let pred: Vec<_> = gt.iter().copied().map(Some).collect();
        assert_eq!(success_curve(&pred, &gt).unwrap().auc, 1.0);
        assert_eq!(precision_curve(&pred, &gt).unwrap().at(20.0), Some(1.0));
        assert_eq!(normalized_precision(&pred, &gt).unwrap().auc, 1.0);
        assert_eq!(ao_sr(&pred, &gt).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_predictions() {
        let gt = vec![b(0.0, 0.0, 1.0, 1.0)];
        let c = success_curve(&[Some(b(10.0, 0.0, 1.0, 1.0))], &gt).unwrap();
        assert_eq!(c.values[0], 1.0);
        assert!(c.values[1..].iter().all(|v| *v == 0.0));
        assert_eq!(c.auc, 1.0 / 21.0);
    }

    #[test]
    fn three_frame_success_fixture() {
        // IoUs 1.0, 0.5 and 0.0.
        let gt = vec![b(1.0, 0.5, 2.0, 1.0); 3];
        let pred = vec![Some(b(1.0, 0.5, 2.0, 1.0)), Some(b(0.5, 0.5, 1.0, 1.0)), Some(b(5.0, 0.5, 1.0, 1.0))];
        assert_eq!(frame_ious(&pred, &gt).unwrap(), vec![1.0, 0.5, 0.0]);
        let c = success_curve(&pred, &gt).unwrap();
        assert_eq!(c.at(0.5), Some(2.0 / 3.0));
        // t = 0: 1; ten thresholds in (0, 0.5]: 2/3; ten in (0.5, 1]: 1/3.
        assert!((c.auc - (1.0 + 10.0 * 2.0 / 3.0 + 10.0 / 3.0) / 21.0).abs() < 1e-12);
    }

    #[test]
    fn precision_fixtures() {
        let gt = vec![b(0.0, 0.0, 10.0, 10.0); 3];
        let far: Vec<_> = (0..3).map(|_| Some(b(15.0, 20.0, 10.0, 10.0))).collect();
        let c = precision_curve(&far, &gt).unwrap();
        assert_eq!(c.at(20.0), Some(0.0));
        assert_eq!(c.at(25.0), Some(1.0));
        // Errors 3, 12 and 40 px.
        let mixed = vec![Some(b(3.0, 0.0, 1.0, 1.0)), Some(b(0.0, 12.0, 1.0, 1.0)), Some(b(24.0, 32.0, 1.0, 1.0))];
        let c = precision_curve(&mixed, &gt).unwrap();
        assert_eq!(c.at(20.0), Some(2.0 / 3.0));
        let hits: usize = (0..=50).map(|d| [3, 12, 40].iter().filter(|e| **e <= d).count()).sum();
        assert!((c.auc - hits as f64 / 3.0 / 51.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_precision_fixture_and_scale_invariance() {
        let gt = vec![b(0.0, 0.0, 10.0, 20.0), b(5.0, 5.0, 4.0, 4.0), b(0.0, 0.0, 1.0, 1.0)];
        // Normalized errors 0.05 (0.5/10), 0.25 (1/4) and 0.6.
        let pred = vec![Some(b(0.5, 0.0, 1.0, 1.0)), Some(b(5.0, 6.0, 1.0, 1.0)), Some(b(0.6, 0.0, 1.0, 1.0))];
        let c = normalized_precision(&pred, &gt).unwrap();
        let hits: usize = (0..=50).map(|i| [5, 25, 60].iter().filter(|e| **e <= i).count()).sum();
        assert!((c.auc - hits as f64 / 3.0 / 51.0).abs() < 1e-12);
        let scale = |x: &BBox| b(x.cx * 2.0, x.cy * 2.0, x.w * 2.0, x.h * 2.0);
        let gt2: Vec<_> = gt.iter().map(scale).collect();
        let pred2: Vec<_> = pred.iter().map(|p| p.as_ref().map(scale)).collect();
        assert_eq!(normalized_precision(&pred2, &gt2).unwrap().auc, c.auc);
    }

    #[test]
    fn ao_sr_fixture() {
        // IoU 0.6: box [0,1]x[0,1] vs [0,0.6]x[0,1]; IoU 0.8 likewise.
        let gt = vec![b(0.5, 0.5, 1.0, 1.0); 2];
        let pred = vec![Some(b(0.3, 0.5, 0.6, 1.0)), Some(b(0.4, 0.5, 0.8, 1.0))];
        let (ao, s5, s75) = ao_sr(&pred, &gt).unwrap();
        assert!((ao - 0.7).abs() < 1e-12);
        assert_eq!((s5, s75), (1.0, 0.5));
    }

    #[test]
    fn missing_prediction_is_zero_overlap() {
        let gt = vec![b(0.5, 0.5, 1.0, 1.0); 2];
        let (ao, _, _) = ao_sr(&[None, Some(gt[1])], &gt).unwrap();
        assert_eq!(ao, 0.5);
        assert_eq!(precision_curve(&[None, None], &gt).unwrap().auc, 0.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(success_curve(&[None], &[b(0.0, 0.0, 1.0, 1.0); 2]).is_err());
    }

    #[test]
    fn report_means_and_tags() {
        let gt = vec![b(0.5, 0.5, 1.0, 1.0); 2];
        let mut a = evaluate_sequence("a", &[Some(gt[0]), Some(gt[1])], &gt).unwrap();
        let mut z = evaluate_sequence("z", &[None, None], &gt).unwrap();
        a.tag = Some("x".into());
        z.tag = Some("y".into());
        let r = EvalReport::new(vec![a, z]).unwrap();
        assert_eq!(r.mean.ao, 0.5);
        assert_eq!(r.by_tag()["x"].ao, 1.0);
        assert_eq!(r.curve_files().len(), 6);
        assert!(EvalReport::new(vec![]).is_err());
    }
}
