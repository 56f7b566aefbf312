//! Command-line surface: `train | track | eval | ablate | bench`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric fault.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{parse_groundtruth, Sequence};
use crate::error::{DmvError, Result};
use crate::experiment::{evaluate, run_ablation, track_all};
use crate::metrics::{evaluate_sequence, EvalReport};
use crate::model::Model;
use crate::numerics::Container;
use crate::tracker::{read_predictions, write_predictions, TrackerConfig};
use crate::trainer::{Trainer, CHECKPOINT_KIND};
use config::{load_config, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "dmv", version, about = "Memory-augmented single-object tracker with voting-based retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.lr=0.01` (repeatable).
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; the resolved config is echoed here.
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
    /// Tracking worker threads (overrides `workers`).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on `data.train` and write `checkpoint.dmv` and `train_log.jsonl`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint (model, optimizer state and schedule).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Track sequences and write one prediction file per sequence.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// OTB-format sequence directories; `data.eval` is used when none are given.
        #[arg(long = "sequence")]
        sequences: Vec<PathBuf>,
    },
    /// Score prediction files against ground truth and write `report.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of `<sequence>.txt` prediction files.
        #[arg(long)]
        predictions: PathBuf,
        /// OTB sequence directories (or parents of them) holding ground truth;
        /// `data.eval` is used when none are given.
        #[arg(long = "gt")]
        gt: Vec<PathBuf>,
    },
    /// Compare retrieval modes, memory on/off and K on `data.eval`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoints; their retrieval mode is read from each file.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Train one model per `ablate.modes` × `ablate.seeds` first.
        #[arg(long)]
        train: bool,
    },
    /// Sweep memory capacity × interval and K for one checkpoint.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

pub fn exit_code(e: &DmvError) -> i32 {
    match e {
        DmvError::Config(_) => EXIT_USAGE,
        DmvError::NumericFault(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn prepare(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("train.seed={s}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("workers={w}"));
    }
    let cfg = load_config(common.config.as_deref(), &overrides)?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("config.toml"), cfg.to_toml()?)?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Model> {
    if !path.is_file() {
        return Err(DmvError::Data(format!("checkpoint {} does not exist", path.display())));
    }
    Model::from_container(&Container::read(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume } => cmd_train(&common, resume.as_deref()),
        Command::Track { common, checkpoint, sequences } => cmd_track(&common, &checkpoint, &sequences),
        Command::Eval { common, predictions, gt } => cmd_eval(&common, &predictions, &gt),
        Command::Ablate { common, checkpoints, train } => cmd_ablate(&common, &checkpoints, train),
        Command::Bench { common, checkpoint } => cmd_bench(&common, &checkpoint),
    }
}

/// Train from scratch (or resume) and write the checkpoint and log into `out`.
pub fn train_into(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Trainer> {
    let seqs = cfg.data.train.load()?;
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::restore(p)?;
            if t.config.iterations != cfg.train.iterations {
                log::info!("resuming at step {} of {}", t.step(), cfg.train.iterations);
            }
            let mut t = t;
            t.config.iterations = cfg.train.iterations;
            t
        }
        None => Trainer::new(Model::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    fs::create_dir_all(out)?;
    let mut log = fs::OpenOptions::new().create(true).append(resume.is_some()).write(true).truncate(resume.is_none()).open(out.join("train_log.jsonl"))?;
    trainer.run(&seqs, Some(&mut log))?;
    trainer.checkpoint(&out.join("checkpoint.dmv"))?;
    Ok(trainer)
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = prepare(common)?;
    let t = train_into(&cfg, &common.out, resume)?;
    println!("trained {} steps; checkpoint at {}", t.step(), common.out.join("checkpoint.dmv").display());
    Ok(())
}

fn load_sequences(dirs: &[PathBuf], cfg: &RunConfig) -> Result<Vec<Sequence>> {
    if dirs.is_empty() {
        cfg.data.eval.load()
    } else {
        dirs.iter().map(|d| crate::data::load_otb_sequence(d)).collect()
    }
}

fn cmd_track(common: &Common, checkpoint: &Path, dirs: &[PathBuf]) -> Result<()> {
    let cfg = prepare(common)?;
    let model = load_model(checkpoint)?;
    let seqs = load_sequences(dirs, &cfg)?;
    let results = track_all(&model, &cfg.tracker, &seqs, cfg.workers)?;
    for (s, r) in seqs.iter().zip(&results) {
        write_predictions(&common.out.join(format!("{}.txt", s.name)), &r.predictions)?;
    }
    println!("tracked {} sequences into {}", seqs.len(), common.out.display());
    Ok(())
}

/// Ground-truth boxes by sequence name from OTB directories or their parents.
fn collect_ground_truth(paths: &[PathBuf]) -> Result<BTreeMap<String, Vec<crate::anchors::BBox>>> {
    let mut out = BTreeMap::new();
    let mut visit = |dir: &Path| -> Result<bool> {
        for name in ["groundtruth_rect.txt", "groundtruth.txt"] {
            let p = dir.join(name);
            if p.is_file() {
                let key = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                out.insert(key, parse_groundtruth(&fs::read_to_string(&p)?, &p)?);
                return Ok(true);
            }
        }
        Ok(false)
    };
    for p in paths {
        if !visit(p)? {
            let mut children: Vec<PathBuf> = fs::read_dir(p)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
            children.sort();
            for c in children {
                visit(&c)?;
            }
        }
    }
    Ok(out)
}

fn cmd_eval(common: &Common, predictions: &Path, gt_paths: &[PathBuf]) -> Result<()> {
    let cfg = prepare(common)?;
    let gt = if gt_paths.is_empty() {
        cfg.data.eval.load()?.into_iter().map(|s| (s.name, s.boxes)).collect()
    } else {
        collect_ground_truth(gt_paths)?
    };
    let mut files: Vec<PathBuf> = fs::read_dir(predictions)
        .map_err(|e| DmvError::Data(format!("{}: {e}", predictions.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DmvError::Data(format!("no prediction files in {}", predictions.display())));
    }
    let mut seqs = Vec::new();
    for f in files {
        let name = f.file_stem().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let boxes = gt.get(&name).ok_or_else(|| DmvError::Data(format!("no ground truth for sequence {name}")))?;
        let preds = read_predictions(&f)?;
        let mut aligned = vec![None; boxes.len()];
        for p in preds {
            if p.frame_index >= boxes.len() {
                return Err(DmvError::Data(format!("{}: frame {} beyond {} ground-truth frames", f.display(), p.frame_index, boxes.len())));
            }
            aligned[p.frame_index] = Some(p.bbox);
        }
        seqs.push(evaluate_sequence(&name, &aligned, boxes)?);
    }
    let report = EvalReport::new(seqs)?;
    fs::write(common.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let curves = common.out.join("curves");
    fs::create_dir_all(&curves)?;
    for (name, body) in report.curve_files() {
        fs::write(curves.join(name), body)?;
    }
    println!("{}", serde_json::to_string(&report.mean)?);
    Ok(())
}

fn cmd_ablate(common: &Common, checkpoints: &[PathBuf], train: bool) -> Result<()> {
    let cfg = prepare(common)?;
    let mut models = Vec::new();
    if train {
        for &mode in &cfg.ablate.modes {
            for &seed in &cfg.ablate.seeds {
                let mut c = cfg.clone();
                c.model.retrieval.mode = mode;
                c.train.seed = seed;
                let dir = common.out.join(format!("{mode}-seed{seed}"));
                let t = train_into(&c, &dir, None)?;
                println!("trained {mode} seed {seed}");
                models.push((seed, t.model));
            }
        }
    }
    for p in checkpoints {
        let c = Container::read(p)?;
        let seed = if c.kind == CHECKPOINT_KIND { c.meta["train"]["seed"].as_u64().unwrap_or(0) } else { 0 };
        models.push((seed, Model::from_container(&c)?));
    }
    if models.is_empty() {
        return Err(DmvError::Config("ablate needs --checkpoint files or --train".into()));
    }
    let seqs = cfg.data.eval.load()?;
    let table = run_ablation(&models, &cfg.tracker, &cfg.ablate.ks, cfg.ablate.margin, &seqs, cfg.workers)?;
    let text = table.render();
    fs::write(common.out.join("ablation.txt"), &text)?;
    fs::write(common.out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    print!("{text}");
    Ok(())
}

fn cmd_bench(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = prepare(common)?;
    let model = load_model(checkpoint)?;
    let seqs = cfg.data.eval.load()?;
    let mut rows = Vec::new();
    let mut text = format!("{:<9} {:<9} {:>3} {:>8} {:>9}\n", "capacity", "interval", "K", "AUC", "FPS");
    let mut record = |capacity: usize, interval: usize, k: usize, tcfg: TrackerConfig| -> Result<()> {
        let e = evaluate(&model, &tcfg, &seqs, cfg.workers)?;
        text.push_str(&format!("{capacity:<9} {interval:<9} {k:>3} {:>8.4} {:>9.1}\n", e.report.mean.success_auc, e.fps));
        rows.push(serde_json::json!({ "capacity": capacity, "interval": interval, "k": k, "auc": e.report.mean.success_auc, "fps": e.fps }));
        Ok(())
    };
    let k0 = cfg.tracker.k.unwrap_or(model.config.retrieval.k);
    for &capacity in &cfg.bench.capacities {
        for &interval in &cfg.bench.intervals {
            let mut t = cfg.tracker.clone();
            t.memory.capacity = capacity;
            t.memory.interval = interval;
            record(capacity, interval, k0, t)?;
        }
    }
    for &k in &cfg.bench.ks {
        let t = TrackerConfig { k: Some(k), ..cfg.tracker.clone() };
        record(cfg.tracker.memory.capacity, cfg.tracker.memory.interval, k, t)?;
    }
    fs::write(common.out.join("bench.txt"), &text)?;
    fs::write(common.out.join("bench.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{text}");
    Ok(())
}
