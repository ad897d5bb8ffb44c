//! λ/γ ablation sweeps over seeds, with TTA clip curves and summary checks.

use std::collections::BTreeMap;
use std::path::Path;

use mmkd::distill::{estimate_teacher_errors, DistillConfig, TeacherEnsemble};
use mmkd::metrics::MetricsReport;
use mmkd::models::{Modality, ModalityModel};
use mmkd::synthdata::{build_splits, DatasetConfig, Splits};
use mmkd::training::{distill_student, evaluate, train_omnivore, train_teacher, Data};
use mmkd::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::runs::{cell_label, save_run, write_json};

/// Loss objective of a sweep cell, named as in ablation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "L_CE")]
    Ce,
    #[serde(rename = "L_KL")]
    Kl,
    #[serde(rename = "L_CE ∧ L_KL")]
    CeKl,
}

impl Objective {
    pub fn of(lambda: f32) -> Self {
        if lambda == 0.0 {
            Objective::Ce
        } else if lambda == 1.0 {
            Objective::Kl
        } else {
            Objective::CeKl
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Objective::Ce => "L_CE",
            Objective::Kl => "L_KL",
            Objective::CeKl => "L_CE ∧ L_KL",
        }
    }
}

/// One (λ, γ) configuration. γ is meaningless without distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub objective: Objective,
    pub lambda: f32,
    pub gamma: Option<f64>,
}

impl Cell {
    pub fn new(lambda: f32, gamma: f64) -> Self {
        let objective = Objective::of(lambda);
        Self {
            objective,
            lambda,
            gamma: (objective != Objective::Ce).then_some(gamma),
        }
    }

    pub fn baseline() -> Self {
        Self::new(0.0, 1.0)
    }

    pub fn label(&self) -> String {
        cell_label(self.lambda, self.gamma)
    }

    fn is(&self, lambda: f32, gamma: Option<f64>) -> bool {
        self.lambda == lambda && self.gamma == gamma
    }
}

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const DEFAULT_CLIPS: [usize; 3] = [1, 2, 4];
pub const DEFAULT_CAP: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
    /// Temporal clip counts evaluated for every cell.
    pub clips: Vec<usize>,
    pub omnivore: bool,
    /// Upper bound on `cells × seeds`.
    pub cap: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self::table5()
    }
}

impl SweepSpec {
    /// The seven objective/λ/γ rows of the weighting ablation.
    pub fn table5() -> Self {
        let rows: [(f32, f64); 7] = [
            (0.0, 1.0),
            (1.0, 30.0),
            (0.8, 30.0),
            (0.8, 3.0),
            (1.0, 1.0),
            (0.8, 1.0),
            (0.8, 0.33),
        ];
        Self {
            cells: rows.iter().map(|&(l, g)| Cell::new(l, g)).collect(),
            seeds: DEFAULT_SEEDS.to_vec(),
            clips: DEFAULT_CLIPS.to_vec(),
            omnivore: false,
            cap: DEFAULT_CAP,
        }
    }

    /// Cross product of the axes; every λ = 0 entry collapses into one
    /// cross-entropy cell.
    pub fn grid(lambdas: &[f32], gammas: &[f64], seeds: &[u64], cap: usize) -> Result<Self> {
        let mut cells: Vec<Cell> = Vec::new();
        for &l in lambdas {
            for &g in gammas {
                let c = Cell::new(l, g);
                if !cells.contains(&c) {
                    cells.push(c);
                }
            }
        }
        let spec = Self {
            cells,
            seeds: seeds.to_vec(),
            cap,
            ..Self::table5()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::config("cells", "sweep needs at least one (λ, γ) cell"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "sweep needs at least one seed"));
        }
        if self.clips.is_empty() || self.clips.contains(&0) {
            return Err(Error::config("clips", "clip counts must be positive"));
        }
        let runs = self.cells.len() * self.seeds.len();
        if runs > self.cap {
            return Err(Error::config(
                "cap",
                format!("{runs} runs exceed the cap of {}", self.cap),
            ));
        }
        for c in &self.cells {
            DistillConfig {
                lambda: c.lambda,
                gamma: c.gamma.unwrap_or(1.0),
                ..DistillConfig::default()
            }
            .validate()?;
        }
        Ok(())
    }
}

/// One CSV row: a cell trained with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub objective: Objective,
    pub lambda: f32,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub report: MetricsReport,
    /// `(clips, accuracy)` for every configured clip count.
    pub clip_accuracy: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRow {
    pub seed: u64,
    pub modality: Modality,
    pub report: MetricsReport,
    pub holdout_error: f64,
    /// Ensemble weight at the configured γ.
    pub weight: f64,
    /// Ensemble weight at γ = 1.
    pub weight_gamma1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub teachers: Vec<TeacherRow>,
    pub omnivore: Vec<(u64, MetricsReport)>,
}

/// Runs every cell for every seed. Each seed regenerates its own dataset and
/// teachers; cells of a seed share them. Artifacts go under `dir/seed<s>/`.
pub fn run_sweep(cfg: &ExperimentConfig, spec: &SweepSpec, dir: &Path, parallel: bool) -> Result<SweepResult> {
    spec.validate()?;
    let mut result = SweepResult {
        rows: Vec::new(),
        teachers: Vec::new(),
        omnivore: Vec::new(),
    };
    for &seed in &spec.seeds {
        let cfg = cfg.clone().with_seed(seed);
        let splits = build_splits(&cfg.dataset)?;
        let seed_dir = dir.join(format!("seed{seed}"));
        let r = run_seed(&cfg, spec, &splits, &seed_dir, parallel)?;
        result.rows.extend(r.rows);
        result.teachers.extend(r.teachers);
        result.omnivore.extend(r.omnivore);
    }
    Ok(result)
}

fn clip_curve(model: &ModalityModel, splits: &Splits, config: &DatasetConfig, clips: &[usize]) -> Result<Vec<(usize, f64)>> {
    clips
        .iter()
        .map(|&n| Ok((n, evaluate(model, &splits.val.examples, config, n, 1)?.accuracy())))
        .collect()
}

fn run_seed(cfg: &ExperimentConfig, spec: &SweepSpec, splits: &Splits, dir: &Path, parallel: bool) -> Result<SweepResult> {
    let seed = cfg.train.seed;
    let data = Data {
        train: &splits.train.examples,
        val: &splits.val.examples,
        config: &cfg.dataset,
    };
    let mut wanted: Vec<Modality> = cfg.modalities.clone();
    if !wanted.contains(&Modality::Appearance) {
        wanted.insert(0, Modality::Appearance);
    }
    let trained: Vec<(Modality, ModalityModel, MetricsReport)> = wanted
        .par_iter()
        .map(|&m| {
            let (model, log) = train_teacher(m, cfg.task, data, &cfg.train)?;
            let report = final_report(&log)?;
            save_run(&dir.join("teachers").join(m.name()), &model, &log, &report, serde_json::json!({"modality": m, "seed": seed}))?;
            Ok((m, model, report))
        })
        .collect::<Result<_>>()?;
    let members: Vec<ModalityModel> = trained
        .iter()
        .filter(|(m, ..)| cfg.modalities.contains(m))
        .map(|(_, model, _)| model.clone())
        .collect();
    let errors = estimate_teacher_errors(&members, &splits.holdout.examples, &cfg.dataset)?;
    let ensemble = TeacherEnsemble::new(members, errors.clone(), cfg.distill.gamma)?;
    let unit = ensemble.clone().with_gamma(1.0)?;
    let mut teachers = Vec::new();
    for (m, _, report) in &trained {
        if let Some(i) = cfg.modalities.iter().position(|x| x == m) {
            teachers.push(TeacherRow {
                seed,
                modality: *m,
                report: report.clone(),
                holdout_error: errors[i],
                weight: ensemble.weights()[i],
                weight_gamma1: unit.weights()[i],
            });
        }
    }
    write_json(&dir.join("weights.json"), &ensemble.weights_file(cfg.dataset.holdout_size, mmkd::synthdata::holdout_seed(&cfg.dataset)))?;

    let baseline = trained
        .iter()
        .find(|(m, ..)| *m == Modality::Appearance)
        .map(|(_, model, report)| (model.clone(), report.clone()))
        .expect("appearance model is always trained");

    let run_cell = |cell: &Cell| -> Result<SweepRow> {
        let (model, report) = match cell.gamma {
            // λ = 0 is cross-entropy training of the appearance model.
            None => baseline.clone(),
            Some(gamma) => {
                let dc = DistillConfig {
                    lambda: cell.lambda,
                    gamma,
                    ..cfg.distill
                };
                let ens = ensemble.clone().with_gamma(gamma)?;
                let (model, log) = distill_student(&ens, data, &dc, &cfg.train, None, None)?;
                let report = final_report(&log)?;
                save_run(&dir.join(cell.label()), &model, &log, &report, serde_json::json!({"cell": cell, "seed": seed}))?;
                (model, report)
            }
        };
        Ok(SweepRow {
            objective: cell.objective,
            lambda: cell.lambda,
            gamma: cell.gamma,
            seed,
            clip_accuracy: clip_curve(&model, splits, &cfg.dataset, &spec.clips)?,
            report,
        })
    };
    let rows: Vec<SweepRow> = if parallel {
        spec.cells.par_iter().map(run_cell).collect::<Result<_>>()?
    } else {
        spec.cells.iter().map(run_cell).collect::<Result<_>>()?
    };

    let mut omnivore = Vec::new();
    if spec.omnivore {
        let (model, log) = train_omnivore(&cfg.modalities, cfg.task, data, &cfg.train)?;
        let report = final_report(&log)?;
        save_run(
            &dir.join("omnivore"),
            &model,
            &log,
            &report,
            serde_json::json!({"seed": seed, "modality_draw_seed": mmkd::training::modality_draw_seed(seed)}),
        )?;
        omnivore.push((seed, report));
    }
    Ok(SweepResult { rows, teachers, omnivore })
}

pub fn final_report(log: &mmkd::training::TrainLog) -> Result<MetricsReport> {
    log.final_report()
        .cloned()
        .ok_or_else(|| Error::State("training produced no evaluation".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Stat { mean, std: var.sqrt(), n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub objective: Objective,
    pub lambda: f32,
    pub gamma: Option<f64>,
    /// Action accuracy for noun/verb tasks, top-1 otherwise.
    pub accuracy: Stat,
    pub noun_top1: Option<Stat>,
    pub verb_top1: Option<Stat>,
    pub action_top1: Option<Stat>,
    pub ece: Stat,
    pub clip_accuracy: BTreeMap<usize, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub modality: Modality,
    pub accuracy: Stat,
    pub verb_top1: Option<Stat>,
    pub ece: Stat,
    pub weight: Stat,
    pub weight_gamma1: Stat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config: ExperimentConfig,
    pub spec: SweepSpec,
    pub cells: Vec<CellSummary>,
    pub teachers: Vec<TeacherSummary>,
    pub omnivore: Option<Stat>,
    pub checks: Vec<Check>,
}

fn opt_stat(values: Vec<Option<f64>>) -> Option<Stat> {
    let v: Option<Vec<f64>> = values.into_iter().collect();
    v.and_then(|v| Stat::of(&v))
}

pub fn summarize(cfg: &ExperimentConfig, spec: &SweepSpec, result: &SweepResult) -> SweepSummary {
    let cells: Vec<CellSummary> = spec
        .cells
        .iter()
        .filter_map(|cell| {
            let rows: Vec<&SweepRow> = result
                .rows
                .iter()
                .filter(|r| r.lambda == cell.lambda && r.gamma == cell.gamma)
                .collect();
            let acc = Stat::of(&rows.iter().map(|r| r.report.accuracy()).collect::<Vec<_>>())?;
            let clip_accuracy = spec
                .clips
                .iter()
                .filter_map(|&n| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter_map(|r| r.clip_accuracy.iter().find(|(c, _)| *c == n).map(|(_, a)| *a))
                        .collect();
                    Stat::of(&v).map(|s| (n, s))
                })
                .collect();
            Some(CellSummary {
                objective: cell.objective,
                lambda: cell.lambda,
                gamma: cell.gamma,
                accuracy: acc,
                noun_top1: opt_stat(rows.iter().map(|r| r.report.noun_top1).collect()),
                verb_top1: opt_stat(rows.iter().map(|r| r.report.verb_top1).collect()),
                action_top1: opt_stat(rows.iter().map(|r| r.report.action_top1).collect()),
                ece: Stat::of(&rows.iter().map(|r| r.report.ece).collect::<Vec<_>>())?,
                clip_accuracy,
            })
        })
        .collect();
    let teachers = cfg
        .modalities
        .iter()
        .filter_map(|&m| {
            let rows: Vec<&TeacherRow> = result.teachers.iter().filter(|t| t.modality == m).collect();
            Some(TeacherSummary {
                modality: m,
                accuracy: Stat::of(&rows.iter().map(|t| t.report.accuracy()).collect::<Vec<_>>())?,
                verb_top1: opt_stat(rows.iter().map(|t| t.report.verb_top1).collect()),
                ece: Stat::of(&rows.iter().map(|t| t.report.ece).collect::<Vec<_>>())?,
                weight: Stat::of(&rows.iter().map(|t| t.weight).collect::<Vec<_>>())?,
                weight_gamma1: Stat::of(&rows.iter().map(|t| t.weight_gamma1).collect::<Vec<_>>())?,
            })
        })
        .collect();
    let omnivore = Stat::of(&result.omnivore.iter().map(|(_, r)| r.accuracy()).collect::<Vec<_>>());
    let mut summary = SweepSummary {
        config: cfg.clone(),
        spec: spec.clone(),
        cells,
        teachers,
        omnivore,
        checks: Vec::new(),
    };
    summary.checks = checks(&summary);
    summary
}

/// Tolerance of the clip-degradation comparison, in accuracy units.
pub const DEGRADATION_SLACK: f64 = 0.005;

/// Directional comparisons between the distilled student (λ = 1, γ = 30),
/// the cross-entropy baseline, the Omnivore model and the teachers.
pub fn checks(s: &SweepSummary) -> Vec<Check> {
    let mut out = Vec::new();
    let find = |l: f32, g: Option<f64>| {
        s.cells
            .iter()
            .find(|c| Cell { objective: c.objective, lambda: c.lambda, gamma: c.gamma }.is(l, g))
    };
    let student = find(1.0, Some(30.0));
    let baseline = find(0.0, None);
    let status = |ok: bool| if ok { Status::Pass } else { Status::Warn };
    if let (Some(st), Some(bl)) = (student, baseline) {
        out.push(Check {
            name: "student_vs_baseline".into(),
            status: status(st.accuracy.mean - bl.accuracy.mean >= 0.02 && st.ece.mean < bl.ece.mean),
            detail: format!(
                "accuracy {:.4} vs {:.4}, ece {:.4} vs {:.4}",
                st.accuracy.mean, bl.accuracy.mean, st.ece.mean, bl.ece.mean
            ),
        });
        let first = s.spec.clips.iter().min().copied();
        let last = s.spec.clips.iter().max().copied();
        if let (Some(a), Some(b)) = (first, last) {
            if a != b {
                let drop = |c: &CellSummary| c.clip_accuracy[&a].mean - c.clip_accuracy[&b].mean;
                let (ds, db) = (drop(st), drop(bl));
                out.push(Check {
                    name: "tta_degradation".into(),
                    status: status(ds <= db + DEGRADATION_SLACK),
                    detail: format!(
                        "accuracy change from {b} clips to {a}: student {:+.4}, baseline {:+.4}",
                        -ds, -db
                    ),
                });
            }
        }
        if let Some(om) = s.omnivore {
            out.push(Check {
                name: "student_vs_omnivore".into(),
                status: status(st.accuracy.mean >= om.mean),
                detail: format!("accuracy {:.4} vs {:.4}", st.accuracy.mean, om.mean),
            });
        }
    }
    if let (Some(best), Some(kl)) = (find(0.8, Some(1.0)), student) {
        out.push(Check {
            name: "weighted_vs_uniform".into(),
            status: status(best.accuracy.mean >= kl.accuracy.mean),
            detail: format!("accuracy {:.4} (λ 0.8, γ 1) vs {:.4} (λ 1, γ 30)", best.accuracy.mean, kl.accuracy.mean),
        });
    }
    let teacher = |m: Modality| s.teachers.iter().find(|t| t.modality == m);
    if let (Some(sp), Some(fl)) = (teacher(Modality::Spectro), teacher(Modality::Flow)) {
        out.push(Check {
            name: "spectro_weight_below_flow".into(),
            status: status(sp.weight_gamma1.mean < fl.weight_gamma1.mean),
            detail: format!("w at γ = 1: spectro {:.4}, flow {:.4}", sp.weight_gamma1.mean, fl.weight_gamma1.mean),
        });
    }
    out
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    objective: &'a str,
    lambda: f32,
    gamma: String,
    seed: u64,
    top1: String,
    top5: String,
    noun_top1: String,
    verb_top1: String,
    action_top1: String,
    ece: String,
    num_bins: usize,
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Columns: objective, λ, γ (empty for cross-entropy), seed, the report's
/// accuracies and ECE, K, then one `acc_clips_<n>` column per clip count.
pub fn write_csv(path: &Path, spec: &SweepSpec, rows: &[SweepRow]) -> Result<()> {
    let to_err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(to_err)?;
    let mut header: Vec<String> = [
        "objective", "lambda", "gamma", "seed", "top1", "top5", "noun_top1", "verb_top1", "action_top1", "ece",
        "num_bins",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(spec.clips.iter().map(|n| format!("acc_clips_{n}")));
    w.write_record(&header).map_err(to_err)?;
    for r in rows {
        let base = CsvRow {
            objective: r.objective.label(),
            lambda: r.lambda,
            gamma: r.gamma.map(|g| g.to_string()).unwrap_or_default(),
            seed: r.seed,
            top1: fmt(r.report.top1),
            top5: fmt(r.report.top5),
            noun_top1: fmt_opt(r.report.noun_top1),
            verb_top1: fmt_opt(r.report.verb_top1),
            action_top1: fmt_opt(r.report.action_top1),
            ece: fmt(r.report.ece),
            num_bins: r.report.num_bins,
        };
        let mut record = vec![
            base.objective.to_string(),
            base.lambda.to_string(),
            base.gamma,
            base.seed.to_string(),
            base.top1,
            base.top5,
            base.noun_top1,
            base.verb_top1,
            base.action_top1,
            base.ece,
            base.num_bins.to_string(),
        ];
        record.extend(spec.clips.iter().map(|n| {
            fmt_opt(r.clip_accuracy.iter().find(|(c, _)| c == n).map(|(_, a)| *a))
        }));
        w.write_record(&record).map_err(to_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table5_has_seven_rows() {
        let s = SweepSpec::table5();
        assert_eq!(s.cells.len(), 7);
        let ce: Vec<_> = s.cells.iter().filter(|c| c.objective == Objective::Ce).collect();
        assert_eq!(ce.len(), 1);
        assert_eq!(ce[0].gamma, None);
        assert!(s.cells.contains(&Cell::new(0.8, 1.0)));
        assert!(s.cells.contains(&Cell::new(1.0, 30.0)));
        s.validate().unwrap();
    }

    #[test]
    fn grid_collapses_cross_entropy_and_respects_cap() {
        let s = SweepSpec::grid(&[0.0, 0.8, 1.0], &[0.33, 1.0, 3.0, 30.0], &[0, 1, 2], 64).unwrap();
        assert_eq!(s.cells.len(), 9);
        match SweepSpec::grid(&[0.0, 0.8, 1.0], &[0.33, 1.0, 3.0, 30.0], &[0, 1, 2], 20) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "cap"),
            other => panic!("{other:?}"),
        }
        assert!(SweepSpec::grid(&[1.5], &[1.0], &[0], 10).is_err());
    }

    #[test]
    fn stats_use_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::of(&[5.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }
}
