//! Multi-sequence evaluation and the retrieval / memory / K ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{ensure, Result};
use crate::metrics::{evaluate_sequence, EvalReport};
use crate::model::Model;
use crate::retrieval::RetrievalMode;
use crate::tracker::{track_sequence, TrackResult, TrackerConfig};

/// Track every sequence, splitting them over `workers` threads.
///
/// Output order follows `seqs` and does not depend on `workers`.
pub fn track_all(model: &Model, cfg: &TrackerConfig, seqs: &[Sequence], workers: usize) -> Result<Vec<TrackResult>> {
    let workers = workers.clamp(1, seqs.len().max(1));
    if workers == 1 {
        return seqs.iter().map(|s| track_sequence(model, cfg, s)).collect();
    }
    let chunk = seqs.len().div_ceil(workers);
    let parts: Vec<Result<Vec<TrackResult>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seqs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| track_sequence(model, cfg, s)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("tracking worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seqs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Tracked frames per second of tracking time, summed over sequences.
    pub fps: f64,
}

pub fn evaluate(model: &Model, cfg: &TrackerConfig, seqs: &[Sequence], workers: usize) -> Result<Evaluation> {
    ensure!(!seqs.is_empty(), "no evaluation sequences");
    let results = track_all(model, cfg, seqs, workers)?;
    let mut metrics = Vec::with_capacity(seqs.len());
    let (mut frames, mut secs) = (0usize, 0.0);
    for (s, r) in seqs.iter().zip(&results) {
        let pred: Vec<_> = r.predictions.iter().map(|p| Some(p.bbox)).collect();
        metrics.push(evaluate_sequence(&s.name, &pred, &s.boxes)?);
        frames += r.predictions.len().saturating_sub(1);
        secs += r.seconds;
    }
    Ok(Evaluation { report: EvalReport::new(metrics)?, fps: frames as f64 / secs.max(1e-9) })
}

/// One evaluated configuration, aggregated over the models of one retrieval mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: RetrievalMode,
    pub memory: bool,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub auc: Vec<f64>,
    pub auc_mean: f64,
    pub precision_20: f64,
    pub ao: f64,
    pub fps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub checks: Vec<Check>,
}

impl AblationTable {
    pub fn find(&self, mode: RetrievalMode, memory: bool, k: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode && r.memory == memory && r.k == k)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<9} {:<6} {:>3} {:>8} {:>8} {:>8} {:>9}  per-seed AUC", "mode", "memory", "K", "AUC", "P@20", "AO", "FPS").unwrap();
        for r in &self.rows {
            let per: Vec<String> = r.auc.iter().map(|a| format!("{a:.4}")).collect();
            writeln!(
                s,
                "{:<9} {:<6} {:>3} {:>8.4} {:>8.4} {:>8.4} {:>9.1}  {}",
                r.mode.as_str(),
                if r.memory { "on" } else { "off" },
                r.k,
                r.auc_mean,
                r.precision_20,
                r.ao,
                r.fps,
                per.join(" ")
            )
            .unwrap();
        }
        for c in &self.checks {
            writeln!(s, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail).unwrap();
        }
        s
    }
}

fn run_row(models: &[(u64, &Model)], base: &TrackerConfig, memory: bool, k: usize, seqs: &[Sequence], workers: usize) -> Result<AblationRow> {
    let mode = models[0].1.config.retrieval.mode;
    let cfg = TrackerConfig { use_memory: memory, k: Some(k), mode: None, ..base.clone() };
    let (mut auc, mut p20, mut ao, mut fps) = (Vec::new(), 0.0, 0.0, 0.0);
    for (_, m) in models {
        let e = evaluate(m, &cfg, seqs, workers)?;
        auc.push(e.report.mean.success_auc);
        p20 += e.report.mean.precision_20;
        ao += e.report.mean.ao;
        fps += e.fps;
    }
    let n = models.len() as f64;
    Ok(AblationRow {
        mode,
        memory,
        k,
        seeds: models.iter().map(|(s, _)| *s).collect(),
        auc_mean: auc.iter().sum::<f64>() / n,
        auc,
        precision_20: p20 / n,
        ao: ao / n,
        fps: fps / n,
    })
}

/// Evaluate every mode with memory on and off at its trained K, sweep `ks`
/// on the voting models with memory on, and check the expected orderings.
pub fn run_ablation(
    models: &[(u64, Model)],
    base: &TrackerConfig,
    ks: &[usize],
    margin: f64,
    seqs: &[Sequence],
    workers: usize,
) -> Result<AblationTable> {
    ensure!(!models.is_empty(), "ablation needs at least one model");
    let mut rows = Vec::new();
    let mut modes: Vec<RetrievalMode> = Vec::new();
    for (_, m) in models {
        if !modes.contains(&m.config.retrieval.mode) {
            modes.push(m.config.retrieval.mode);
        }
    }
    for &mode in &modes {
        let group: Vec<(u64, &Model)> = models.iter().filter(|(_, m)| m.config.retrieval.mode == mode).map(|(s, m)| (*s, m)).collect();
        let k = group[0].1.config.retrieval.k;
        rows.push(run_row(&group, base, true, k, seqs, workers)?);
        rows.push(run_row(&group, base, false, k, seqs, workers)?);
        if mode == RetrievalMode::Voting {
            for &kk in ks.iter().filter(|kk| **kk != k) {
                rows.push(run_row(&group, base, true, kk, seqs, workers)?);
            }
        }
    }
    rows.sort_by_key(|r| (modes.iter().position(|m| *m == r.mode), !r.memory, r.k));
    let mut table = AblationTable { rows, checks: Vec::new() };
    table.checks = checks(&table, ks, margin);
    Ok(table)
}

fn default_row(t: &AblationTable, mode: RetrievalMode, memory: bool) -> Option<&AblationRow> {
    // The trained K is the only K evaluated with memory off.
    let k = t.rows.iter().find(|r| r.mode == mode && !r.memory)?.k;
    t.find(mode, memory, k)
}

fn checks(t: &AblationTable, ks: &[usize], margin: f64) -> Vec<Check> {
    use RetrievalMode::*;
    let mut out = Vec::new();
    if let (Some(on), Some(off)) = (default_row(t, Voting, true), default_row(t, Voting, false)) {
        out.push(Check {
            name: "memory on > memory off".into(),
            passed: on.auc_mean > off.auc_mean,
            detail: format!("AUC {:.4} vs {:.4}", on.auc_mean, off.auc_mean),
        });
    }
    let on = |m| default_row(t, m, true);
    for (hi, lo) in [(Voting, TopkMlp), (TopkMlp, Softmax)] {
        if let (Some(a), Some(b)) = (on(hi), on(lo)) {
            out.push(Check {
                name: format!("{} > {} by more than {:.1} AUC points", hi, lo, margin * 100.0),
                passed: a.auc_mean - b.auc_mean > margin,
                detail: format!("AUC {:.4} vs {:.4} (gap {:+.2} points)", a.auc_mean, b.auc_mean, 100.0 * (a.auc_mean - b.auc_mean)),
            });
        }
    }
    let sweep: Vec<&AblationRow> = ks.iter().filter_map(|k| t.find(Voting, true, *k)).collect();
    if sweep.len() == ks.len() && ks.len() >= 2 {
        let auc_ok = sweep.windows(2).all(|w| w[1].auc_mean >= w[0].auc_mean);
        let fps_ok = sweep.windows(2).all(|w| w[1].fps < w[0].fps);
        let auc: Vec<String> = sweep.iter().map(|r| format!("K={}:{:.4}", r.k, r.auc_mean)).collect();
        let fps: Vec<String> = sweep.iter().map(|r| format!("{:.1}", r.fps)).collect();
        out.push(Check {
            name: "K sweep: AUC non-decreasing".into(),
            passed: auc_ok,
            detail: auc.join(", "),
        });
        out.push(Check {
            name: "K sweep: FPS decreasing".into(),
            passed: fps_ok,
            detail: format!("FPS {}", fps.join(", ")),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::tests::tiny_config;

    fn seqs(n: u64) -> Vec<Sequence> {
        (0..n)
            .map(|s| generate_synthetic(&SynthConfig { seed: s, length: 5, width: 64, height: 64, target_size: [8.0, 12.0], ..SynthConfig::default() }).unwrap())
            .collect()
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let m = Model::new(tiny_config(), 0).unwrap();
        let s = seqs(3);
        let a = track_all(&m, &TrackerConfig::default(), &s, 1).unwrap();
        let b = track_all(&m, &TrackerConfig::default(), &s, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.predictions, y.predictions);
        }
    }

    #[test]
    fn table_has_one_row_per_configuration() {
        let mut models = Vec::new();
        for mode in RetrievalMode::ALL {
            let mut c = tiny_config();
            c.retrieval.mode = mode;
            models.push((0, Model::new(c, 0).unwrap()));
        }
        let t = run_ablation(&models, &TrackerConfig::default(), &[1, 2, 3], 0.01, &seqs(1), 1).unwrap();
        // Three modes × memory on/off, plus two extra K values for voting.
        assert_eq!(t.rows.len(), 8);
        assert!(t.rows.iter().all(|r| r.fps > 0.0));
        assert_eq!(t.checks.len(), 5);
        assert!(t.render().lines().count() >= 14);
    }
}
