//! `mmkd` command line: data generation, teacher and student training,
//! evaluation and λ/γ sweeps, all writing into one output directory.

pub mod config;
pub mod runs;
pub mod svg;
pub mod sweep;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mmkd::distill::{estimate_teacher_errors, DistillConfig, TeacherEnsemble, TeacherWeightsFile};
use mmkd::metrics::MetricsReport;
use mmkd::models::{Modality, ModalityModel};
use mmkd::synthdata::{build_splits, holdout_seed, Shard, SplitMode, Splits};
use mmkd::training::{distill_student, evaluate, modality_draw_seed, train_omnivore, train_teacher, Data};
use mmkd::{Error, Result};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::runs::*;
use crate::sweep::{final_report, run_sweep, summarize, write_csv, SweepSpec, SweepSummary};

#[derive(Debug, Parser)]
#[command(name = "mmkd", version, about = "Multimodal knowledge distillation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON experiment config; keys override the named preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, default_value = "compositional")]
    pub preset: String,
    /// Seed for data, initialization and views.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "MMKD_OUT_DIR", default_value = "runs")]
    pub out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train, holdout and validation shards.
    GenData,
    /// Train a modality-specific teacher with cross-entropy.
    TrainTeacher {
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
    },
    /// Train the appearance-only cross-entropy baseline.
    TrainBaseline,
    /// Train one shared model on all configured modalities.
    TrainOmnivore,
    /// Estimate holdout errors and ensemble weights of the trained teachers.
    EstimateWeights {
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Distill the teacher ensemble into an appearance student.
    Distill {
        /// `paper-best` or `table5-row-KL-only`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Weights file from estimate-weights (default: the out-dir's).
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with multi-clip, multi-crop testing.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split name (`train`, `holdout`, `val`) or a shard path.
        #[arg(long, default_value = "val")]
        shard: String,
        #[arg(long, default_value_t = 1)]
        clips: usize,
        #[arg(long, default_value_t = 1)]
        crops: usize,
        /// Metrics file (default: next to the checkpoint).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train teachers and students over a λ/γ grid and several seeds.
    Sweep(SweepArgs),
    /// Render a sweep summary as a table.
    Report {
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Explicit `λ:γ` cells, e.g. `0.8:1,1:30`; replaces the default rows.
    #[arg(long, value_delimiter = ',', value_parser = parse_cell, conflicts_with_all = ["lambdas", "gammas"])]
    pub cells: Vec<sweep::Cell>,
    /// Comma-separated λ values; with --gammas, replaces the default rows.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f32>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = sweep::DEFAULT_SEEDS)]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = sweep::DEFAULT_CLIPS)]
    pub clips: Vec<usize>,
    /// Also train an Omnivore model per seed.
    #[arg(long)]
    pub omnivore: bool,
    /// Train the cells of a seed concurrently.
    #[arg(long)]
    pub parallel: bool,
    /// Also write sweep.svg.
    #[arg(long)]
    pub svg: bool,
    /// Maximum number of (cell, seed) runs.
    #[arg(long, default_value_t = sweep::DEFAULT_CAP)]
    pub cap: usize,
    /// Subdirectory of the out-dir.
    #[arg(long, default_value = "sweep")]
    pub name: String,
}

fn parse_cell(s: &str) -> std::result::Result<sweep::Cell, String> {
    let (l, g) = s.split_once(':').ok_or_else(|| format!("expected λ:γ, got {s:?}"))?;
    let l: f32 = l.trim().parse().map_err(|e| format!("{l:?}: {e}"))?;
    let g: f64 = g.trim().parse().map_err(|e| format!("{g:?}: {e}"))?;
    Ok(sweep::Cell::new(l, g))
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    Modality::parse(s).map_err(|e| e.to_string())
}

/// Resolved configuration of an invocation.
pub fn resolve_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&g.preset)?,
    };
    Ok(match g.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Runs a parsed command; returns the lines to print.
pub fn run(cli: Cli) -> Result<String> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::config("threads", "must be positive"));
        }
        // Fails only when a pool already exists, e.g. on a second call in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve_config(&cli.global)?;
    let ws = Workspace::new(&cli.global.out_dir);
    match cli.command {
        Command::GenData => gen_data(&cfg, &ws),
        Command::TrainTeacher { modality } => train_single(&cfg, &ws, modality, ws.teacher_dir(modality)),
        Command::TrainBaseline => train_single(&cfg, &ws, Modality::Appearance, ws.baseline_dir()),
        Command::TrainOmnivore => train_omni(&cfg, &ws),
        Command::EstimateWeights { gamma } => estimate_weights(&cfg, &ws, gamma),
        Command::Distill { preset, lambda, gamma, weights } => {
            let mut dc = match preset {
                Some(p) => DistillConfig {
                    holdout_size: cfg.distill.holdout_size,
                    ..DistillConfig::preset(&p)?
                },
                None => cfg.distill,
            };
            if let Some(l) = lambda {
                dc.lambda = l;
            }
            if let Some(g) = gamma {
                dc.gamma = g;
            }
            let cfg = ExperimentConfig { distill: dc, ..cfg };
            cfg.validate()?;
            distill(&cfg, &ws, weights.as_deref())
        }
        Command::Evaluate { checkpoint, shard, clips, crops, output } => {
            run_evaluate(&cfg, &ws, &checkpoint, &shard, clips, crops, output.as_deref())
        }
        Command::Sweep(args) => run_sweep_cmd(&cfg, &ws, &args),
        Command::Report { summary } => {
            let path = summary.unwrap_or_else(|| ws.sweep_dir().join("summary.json"));
            let s: SweepSummary = read_json(&path)?;
            let text = report(&s);
            let out = path.with_file_name("report.md");
            std::fs::write(&out, &text)?;
            Ok(text)
        }
    }
}

fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_json(&dir.join(RESOLVED_CONFIG), cfg)
}

fn gen_data(cfg: &ExperimentConfig, ws: &Workspace) -> Result<String> {
    let splits = build_splits(&cfg.dataset)?;
    let dir = ws.data_dir();
    ensure_dir(&dir)?;
    let mut names = Vec::new();
    for (name, shard) in [("train", &splits.train), ("holdout", &splits.holdout), ("val", &splits.val)] {
        shard.save(&ws.shard(name))?;
        names.push(format!("{name}.shard"));
    }
    echo_config(&dir, cfg)?;
    names.push(RESOLVED_CONFIG.to_string());
    let mut meta = json!({
        "split_mode": cfg.dataset.split_mode,
        "seed": cfg.dataset.seed,
        "Z": cfg.dataset.holdout_size,
        "holdout_seed": holdout_seed(&cfg.dataset),
        "counts": {"train": splits.train.len(), "holdout": splits.holdout.len(), "val": splits.val.len()},
    });
    if cfg.dataset.split_mode == SplitMode::Compositional {
        meta["holdout_nouns"] = json!(cfg.dataset.holdout_nouns);
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write_manifest(&dir, &refs, meta)?;
    Ok(format!(
        "wrote {} train, {} holdout, {} val examples to {}",
        splits.train.len(),
        splits.holdout.len(),
        splits.val.len(),
        dir.display()
    ))
}

/// Shards of the out-dir, checked against the resolved dataset config.
fn load_data(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Splits> {
    let splits = ws.load_splits()?;
    for shard in [&splits.train, &splits.holdout, &splits.val] {
        if shard.config() != &cfg.dataset {
            return Err(Error::config(
                "dataset",
                format!("differs from the {} shard on disk; rerun gen-data", shard.header.split),
            ));
        }
    }
    Ok(splits)
}

fn data_of<'a>(cfg: &'a ExperimentConfig, s: &'a Splits) -> Data<'a> {
    Data {
        train: &s.train.examples,
        val: &s.val.examples,
        config: &cfg.dataset,
    }
}

fn describe(name: &str, r: &MetricsReport) -> String {
    let mut s = format!("{name}: top1 {:.4} top5 {:.4}", r.top1, r.top5);
    for (k, v) in [("noun", r.noun_top1), ("verb", r.verb_top1), ("action", r.action_top1)] {
        if let Some(v) = v {
            let _ = write!(s, " {k} {v:.4}");
        }
    }
    let _ = write!(s, " ece {:.4} (K = {})", r.ece, r.num_bins);
    s
}

fn train_single(cfg: &ExperimentConfig, ws: &Workspace, m: Modality, dir: PathBuf) -> Result<String> {
    let splits = load_data(cfg, ws)?;
    let (model, log) = train_teacher(m, cfg.task, data_of(cfg, &splits), &cfg.train)?;
    let report = final_report(&log)?;
    ensure_dir(&dir)?;
    echo_config(&dir, cfg)?;
    save_run(&dir, &model, &log, &report, json!({"modality": m, "task": cfg.task, "seed": cfg.train.seed}))?;
    Ok(describe(m.name(), &report))
}

fn train_omni(cfg: &ExperimentConfig, ws: &Workspace) -> Result<String> {
    let splits = load_data(cfg, ws)?;
    let (model, log) = train_omnivore(&cfg.modalities, cfg.task, data_of(cfg, &splits), &cfg.train)?;
    let report = final_report(&log)?;
    let dir = ws.omnivore_dir();
    ensure_dir(&dir)?;
    echo_config(&dir, cfg)?;
    save_run(
        &dir,
        &model,
        &log,
        &report,
        json!({
            "modalities": cfg.modalities,
            "seed": cfg.train.seed,
            "modality_draw_seed": modality_draw_seed(cfg.train.seed),
        }),
    )?;
    Ok(describe("omnivore", &report))
}

fn load_teachers(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<ModalityModel>> {
    cfg.modalities
        .iter()
        .map(|&m| {
            let model = load_model(&ws.teacher_dir(m).join(CHECKPOINT))?;
            if model.spec.task != cfg.task {
                return Err(Error::config("task", format!("{m} teacher was trained for another task")));
            }
            Ok(model)
        })
        .collect()
}

fn estimate_weights(cfg: &ExperimentConfig, ws: &Workspace, gamma: Option<f64>) -> Result<String> {
    let gamma = gamma.unwrap_or(cfg.distill.gamma);
    let splits = load_data(cfg, ws)?;
    let members = load_teachers(cfg, ws)?;
    let errors = estimate_teacher_errors(&members, &splits.holdout.examples, &cfg.dataset)?;
    let ensemble = TeacherEnsemble::new(members, errors, gamma)?;
    let file = ensemble.weights_file(cfg.dataset.holdout_size, holdout_seed(&cfg.dataset));
    let path = ws.weights_file();
    write_json(&path, &file)?;
    echo_config(path.parent().expect("weights file has a parent"), cfg)?;
    let mut text = format!("teacher weights (γ = {gamma}, Z = {})\n", cfg.dataset.holdout_size);
    let _ = writeln!(text, "{:<12} {:>10} {:>8}", "modality", "error", "weight");
    for (m, w) in &file.members {
        let _ = writeln!(text, "{:<12} {:>10.4} {:>8.4}", m.name(), w.error, w.weight);
    }
    Ok(text.trim_end().to_string())
}

fn distill(cfg: &ExperimentConfig, ws: &Workspace, weights: Option<&Path>) -> Result<String> {
    let splits = load_data(cfg, ws)?;
    let members = load_teachers(cfg, ws)?;
    let path = weights.map(Path::to_path_buf).unwrap_or_else(|| ws.weights_file());
    let file: TeacherWeightsFile = read_json(&path)?;
    if file.holdout_size != cfg.distill.holdout_size {
        return Err(Error::config(
            "distill.holdout_size",
            format!("weights were estimated with Z = {}", file.holdout_size),
        ));
    }
    // Weights are recomputed from the stored errors at the requested γ.
    let ensemble = TeacherEnsemble::new(members, file.errors_for(&cfg.modalities)?, cfg.distill.gamma)?;
    let (model, log) = distill_student(&ensemble, data_of(cfg, &splits), &cfg.distill, &cfg.train, None, None)?;
    let report = final_report(&log)?;
    let dir = ws.student_dir(cfg.distill.lambda, cfg.distill.gamma);
    ensure_dir(&dir)?;
    echo_config(&dir, cfg)?;
    let used = ensemble.weights_file(file.holdout_size, file.holdout_seed);
    save_run(&dir, &model, &log, &report, json!({"distill": cfg.distill, "weights": used}))?;
    Ok(describe(&format!("student λ = {} γ = {}", cfg.distill.lambda, cfg.distill.gamma), &report))
}

fn run_evaluate(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    checkpoint: &Path,
    shard: &str,
    clips: usize,
    crops: usize,
    output: Option<&Path>,
) -> Result<String> {
    if clips == 0 || crops == 0 {
        return Err(Error::config("clips", "clip and crop counts must be positive"));
    }
    let model = load_model(checkpoint)?;
    let shard = if runs::SPLITS.contains(&shard) {
        Shard::load(&ws.shard(shard))?
    } else {
        Shard::load(Path::new(shard))?
    };
    // Views are rendered with the data's own configuration.
    let report = evaluate(&model, &shard.examples, shard.config(), clips, crops)?;
    let out = match output {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name(format!("eval_{}_clips{clips}_crops{crops}.json", shard.header.split)),
    };
    write_json(&out, &json!({"shard": shard.header.split, "clips": clips, "crops": crops, "metrics": report}))?;
    if let Some(dir) = out.parent() {
        echo_config(dir, cfg)?;
    }
    Ok(describe(&format!("{} ({clips} clips × {crops} crops)", shard.header.split), &report))
}

fn run_sweep_cmd(cfg: &ExperimentConfig, ws: &Workspace, a: &SweepArgs) -> Result<String> {
    let mut spec = match (a.lambdas.is_empty(), a.gammas.is_empty()) {
        (true, true) if !a.cells.is_empty() => SweepSpec {
            cells: a.cells.clone(),
            seeds: a.seeds.clone(),
            cap: a.cap,
            ..SweepSpec::table5()
        },
        (true, true) => SweepSpec {
            seeds: a.seeds.clone(),
            cap: a.cap,
            ..SweepSpec::table5()
        },
        (false, false) => SweepSpec::grid(&a.lambdas, &a.gammas, &a.seeds, a.cap)?,
        _ => return Err(Error::config("lambdas", "--lambdas and --gammas go together")),
    };
    spec.clips = a.clips.clone();
    spec.omnivore = a.omnivore;
    spec.validate()?;
    let dir = ws.root.join(&a.name);
    ensure_dir(&dir)?;
    echo_config(&dir, cfg)?;
    write_json(&dir.join("spec.json"), &spec)?;
    let result = run_sweep(cfg, &spec, &dir, a.parallel)?;
    write_csv(&dir.join("sweep.csv"), &spec, &result.rows)?;
    let summary = summarize(cfg, &spec, &result);
    write_json(&dir.join("summary.json"), &summary)?;
    let mut names = vec![RESOLVED_CONFIG, "spec.json", "sweep.csv", "summary.json"];
    if a.svg {
        std::fs::write(dir.join("sweep.svg"), svg::render(&summary))?;
        names.push("sweep.svg");
    }
    write_manifest(&dir, &names, json!({"seeds": spec.seeds, "cells": spec.cells.len()}))?;
    Ok(report(&summary))
}

fn stat(s: Option<sweep::Stat>) -> String {
    s.map(|s| format!("{:.4} ± {:.4}", s.mean, s.std)).unwrap_or_else(|| "-".into())
}

/// Markdown table of a sweep summary plus its checks.
pub fn report(s: &SweepSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "# {} sweep ({} seeds)\n", s.config.label, s.spec.seeds.len());
    let _ = write!(t, "| objective | λ | γ | accuracy | verb | ECE |");
    for n in &s.spec.clips {
        let _ = write!(t, " {n} clips |");
    }
    let _ = write!(t, "\n|---|---|---|---|---|---|");
    for _ in &s.spec.clips {
        t.push_str("---|");
    }
    t.push('\n');
    for c in &s.cells {
        let _ = write!(
            t,
            "| {} | {} | {} | {} | {} | {} |",
            c.objective.label(),
            c.lambda,
            c.gamma.map(|g| g.to_string()).unwrap_or_else(|| "-".into()),
            stat(Some(c.accuracy)),
            stat(c.verb_top1),
            stat(Some(c.ece)),
        );
        for n in &s.spec.clips {
            let _ = write!(t, " {} |", stat(c.clip_accuracy.get(n).copied()));
        }
        t.push('\n');
    }
    let _ = writeln!(t, "\n| teacher | accuracy | ECE | weight | weight at γ = 1 |\n|---|---|---|---|---|");
    for m in &s.teachers {
        let _ = writeln!(
            t,
            "| {} | {} | {} | {} | {} |",
            m.modality.name(),
            stat(Some(m.accuracy)),
            stat(Some(m.ece)),
            stat(Some(m.weight)),
            stat(Some(m.weight_gamma1))
        );
    }
    if let Some(o) = s.omnivore {
        let _ = writeln!(t, "\nomnivore accuracy {}", stat(Some(o)));
    }
    t.push('\n');
    for c in &s.checks {
        let tag = match c.status {
            sweep::Status::Pass => "PASS",
            sweep::Status::Warn => "WARN",
        };
        let _ = writeln!(t, "{tag} {}: {}", c.name, c.detail);
    }
    t
}

/// `{"error": {...}}` document written to stderr on failure.
pub fn error_json(e: &Error) -> Value {
    let kind = match e {
        Error::Dimension(_) => "dimension",
        Error::Contract(_) => "contract",
        Error::State(_) => "state",
        Error::Config { .. } => "config",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    };
    let mut body = json!({"kind": kind, "message": e.to_string()});
    if let Error::Config { field, reason } = e {
        body["field"] = json!(field);
        body["reason"] = json!(reason);
    }
    json!({ "error": body })
}
