//! Distillation objectives, teacher weighting and the weighted logit ensemble.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, softmax_rows, Graph, Var};
use crate::models::{build_batch, HeadMode, InputKind, Logits, Modality, ModalityModel, Outputs, Task};
use crate::synthdata::{sample_view, DatasetConfig, MultimodalExample, ViewMode, ViewParams};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f32 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau: f32,
    pub lambda: f32,
    pub gamma: f64,
    pub holdout_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::paper_best()
    }
}

impl DistillConfig {
    /// λ = 0.8, γ = 1.0.
    pub fn paper_best() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda: 0.8,
            gamma: 1.0,
            holdout_size: 256,
        }
    }

    /// λ = 1.0, γ = 30.0: pure distillation from an effectively uniform ensemble.
    pub fn kl_only() -> Self {
        Self {
            lambda: 1.0,
            gamma: 30.0,
            ..Self::paper_best()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-best" => Ok(Self::paper_best()),
            "table5-row-KL-only" => Ok(Self::kl_only()),
            other => Err(Error::config("preset", format!("unknown distill preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", format!("must be positive, got {}", self.gamma)));
        }
        if self.holdout_size == 0 {
            return Err(Error::config("holdout_size", "must be positive"));
        }
        Ok(())
    }
}

pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// `τ²·KL(softmax(teacher/τ) ‖ softmax(student/τ))`, batch mean. The teacher
/// side carries no gradient.
pub fn kd_kl_loss(g: &mut Graph, teacher_logits: &Tensor, student: Var, tau: f32) -> Result<Var> {
    g.kd_kl(teacher_logits, student, tau)
}

/// `λ·kl + (1−λ)·ce`.
pub fn combined_loss(g: &mut Graph, ce: Var, kl: Var, lambda: f32) -> Result<Var> {
    g.affine(kl, ce, lambda, 1.0 - lambda)
}

/// Scalar form of [`combined_loss`].
pub fn combine(ce: f64, kl: f64, lambda: f64) -> f64 {
    lambda * kl + (1.0 - lambda) * ce
}

/// Per-example targets of a batch.
#[derive(Debug, Clone)]
pub struct Targets {
    pub labels: Vec<usize>,
    pub nouns: Vec<usize>,
    pub verbs: Vec<usize>,
}

impl Targets {
    pub fn of(task: Task, examples: &[&MultimodalExample]) -> Self {
        Self {
            labels: examples.iter().map(|e| task.label(e)).collect(),
            nouns: examples.iter().map(|e| e.noun).collect(),
            verbs: examples.iter().map(|e| e.verb).collect(),
        }
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    /// `None` when λ = 0 and the teacher was skipped.
    pub kl: Option<Var>,
}

fn head_loss(
    g: &mut Graph,
    student: Var,
    teacher: Option<&Tensor>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossTerms> {
    let ce = cross_entropy(g, student, labels)?;
    match teacher {
        None => Ok(LossTerms { total: ce, ce, kl: None }),
        Some(t) => {
            let kl = kd_kl_loss(g, t, student, cfg.tau)?;
            let total = combined_loss(g, ce, kl, cfg.lambda)?;
            Ok(LossTerms { total, ce, kl: Some(kl) })
        }
    }
}

/// Sum of the noun-head and verb-head combined losses.
pub fn dual_head_loss(
    g: &mut Graph,
    student: Logits,
    teacher: Option<&Outputs>,
    targets: &Targets,
    cfg: &DistillConfig,
) -> Result<LossTerms> {
    let Logits::Dual { noun, verb } = student else {
        return Err(Error::Contract("dual_head_loss needs noun and verb heads".into()));
    };
    let (tn, tv) = match teacher {
        None => (None, None),
        Some(Outputs::Dual { noun, verb }) => (Some(noun), Some(verb)),
        Some(Outputs::Single(_)) => {
            return Err(Error::Contract("teacher has a single head, student two".into()))
        }
    };
    let a = head_loss(g, noun, tn, &targets.nouns, cfg)?;
    let b = head_loss(g, verb, tv, &targets.verbs, cfg)?;
    let total = g.add(a.total, b.total)?;
    let ce = g.add(a.ce, b.ce)?;
    let kl = match (a.kl, b.kl) {
        (Some(x), Some(y)) => Some(g.add(x, y)?),
        _ => None,
    };
    Ok(LossTerms { total, ce, kl })
}

/// Task loss: [`dual_head_loss`] for dual heads, combined loss otherwise.
pub fn task_loss(
    g: &mut Graph,
    student: Logits,
    teacher: Option<&Outputs>,
    targets: &Targets,
    cfg: &DistillConfig,
) -> Result<LossTerms> {
    match student {
        Logits::Dual { .. } => dual_head_loss(g, student, teacher, targets, cfg),
        Logits::Single(s) => {
            let t = match teacher {
                None => None,
                Some(Outputs::Single(t)) => Some(t),
                Some(Outputs::Dual { .. }) => {
                    return Err(Error::Contract("teacher has two heads, student one".into()))
                }
            };
            head_loss(g, s, t, &targets.labels, cfg)
        }
    }
}

/// Mean cross-entropy of `logits` rows against `labels`, in `f64`.
pub fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = logits.shape()[1];
    if logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Contract("cross-entropy needs one label per row".into()));
    }
    let mut total = 0.0f64;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Contract(format!("label {l} outside [0, {c})")));
        }
        let row = logits.row(i);
        total += log_sum_exp(row, 1.0) - row[l] as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Summed cross-entropy of a model output over its heads.
pub fn output_cross_entropy(out: &Outputs, task: Task, examples: &[&MultimodalExample]) -> Result<f64> {
    let t = Targets::of(task, examples);
    match out {
        Outputs::Single(l) => mean_cross_entropy(l, &t.labels),
        Outputs::Dual { noun, verb } => {
            Ok(mean_cross_entropy(noun, &t.nouns)? + mean_cross_entropy(verb, &t.verbs)?)
        }
    }
}

/// Holdout cross-entropy `e^m` of every member, under the evaluation view.
/// Dual-head members report noun CE plus verb CE.
pub fn estimate_teacher_errors(
    members: &[ModalityModel],
    holdout: &[MultimodalExample],
    config: &DatasetConfig,
) -> Result<Vec<f64>> {
    if holdout.is_empty() {
        return Err(Error::Contract("holdout set is empty".into()));
    }
    let view = sample_view(0, ViewMode::Eval, config);
    members
        .iter()
        .map(|m| {
            if !m.frozen {
                return Err(Error::Contract("teacher errors need frozen members".into()));
            }
            let modality = member_modality(m)?;
            let mut weighted = 0.0f64;
            for chunk in holdout.chunks(64) {
                let refs: Vec<&MultimodalExample> = chunk.iter().collect();
                let items: Vec<_> = chunk.iter().map(|e| (e, &view)).collect();
                let out = m.predict(&build_batch(modality, &items, config, false, m.spec.task)?)?;
                weighted += output_cross_entropy(&out, m.spec.task, &refs)? * chunk.len() as f64;
            }
            Ok(weighted / holdout.len() as f64)
        })
        .collect()
}

/// `w^m = softmax(−e/γ)`.
pub fn compute_teacher_weights(errors: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::config("gamma", format!("must be positive, got {gamma}")));
    }
    if errors.is_empty() {
        return Err(Error::Contract("no teacher errors".into()));
    }
    let scaled: Vec<f64> = errors.iter().map(|e| -e / gamma).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|x| x / z).collect())
}

/// Weighted logit sum `Σ w^m f^m` and its softmax.
pub fn ensemble_logits(outputs: &[&Tensor], weights: &[f64]) -> Result<(Tensor, Tensor)> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::Contract("ensemble of zero members".into()))?;
    if outputs.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} member outputs but {} weights",
            outputs.len(),
            weights.len()
        )));
    }
    let shape = first.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("member logits must be 2-D, got {shape:?}")));
    }
    let mut acc = vec![0.0f64; first.numel()];
    for (out, &w) in outputs.iter().zip(weights) {
        if out.shape() != shape.as_slice() {
            return Err(Error::Contract(format!(
                "member output {:?} differs from {:?}",
                out.shape(),
                shape
            )));
        }
        for (a, &v) in acc.iter_mut().zip(out.data()) {
            *a += w * v as f64;
        }
    }
    let logits = Tensor::new(&shape, acc.into_iter().map(|v| v as f32).collect())?;
    let probs = Tensor::new(&shape, softmax_rows(logits.data(), shape[1], 1.0))?;
    Ok((logits, probs))
}

fn member_modality(m: &ModalityModel) -> Result<Modality> {
    match m.spec.input {
        InputKind::Native(modality) => Ok(modality),
        InputKind::Omni => Err(Error::Contract("ensemble members read one modality".into())),
    }
}

/// Receives the id of the view each consumer saw during a training step.
pub trait ViewObserver {
    fn observe(&mut self, consumer: &str, view_id: u64);
}

/// Frozen modality teachers combined by holdout-derived weights.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    members: Vec<ModalityModel>,
    weights: Vec<f64>,
    errors: Vec<f64>,
    gamma: f64,
}

impl TeacherEnsemble {
    /// Members are reordered to modality enumeration order.
    pub fn new(members: Vec<ModalityModel>, errors: Vec<f64>, gamma: f64) -> Result<Self> {
        if members.is_empty() || members.len() != errors.len() {
            return Err(Error::Contract(format!(
                "{} members with {} errors",
                members.len(),
                errors.len()
            )));
        }
        let mut paired: Vec<(Modality, ModalityModel, f64)> = Vec::new();
        for (m, e) in members.into_iter().zip(errors) {
            if !m.frozen {
                return Err(Error::Contract("teacher members must be frozen".into()));
            }
            let modality = member_modality(&m)?;
            if paired.iter().any(|(x, _, _)| *x == modality) {
                return Err(Error::Contract(format!("duplicate {modality} teacher")));
            }
            paired.push((modality, m, e));
        }
        paired.sort_by_key(|(modality, _, _)| *modality);
        let heads = paired[0].1.spec.heads;
        if paired.iter().any(|(_, m, _)| m.spec.heads != heads) {
            return Err(Error::Contract("teacher members disagree on heads".into()));
        }
        let errors: Vec<f64> = paired.iter().map(|p| p.2).collect();
        let weights = compute_teacher_weights(&errors, gamma)?;
        Ok(Self {
            members: paired.into_iter().map(|p| p.1).collect(),
            weights,
            errors,
            gamma,
        })
    }

    /// Estimates holdout errors and derives weights.
    pub fn from_holdout(
        members: Vec<ModalityModel>,
        holdout: &[MultimodalExample],
        config: &DatasetConfig,
        gamma: f64,
    ) -> Result<Self> {
        let errors = estimate_teacher_errors(&members, holdout, config)?;
        Self::new(members, errors, gamma)
    }

    pub fn members(&self) -> &[ModalityModel] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn heads(&self) -> HeadMode {
        self.members[0].spec.heads
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.members.iter().map(|m| member_modality(m).unwrap()).collect()
    }

    pub fn weight_of(&self, modality: Modality) -> Option<f64> {
        self.modalities()
            .iter()
            .position(|&m| m == modality)
            .map(|i| self.weights[i])
    }

    /// Re-derives weights at another γ.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        self.weights = compute_teacher_weights(&self.errors, gamma)?;
        self.gamma = gamma;
        Ok(self)
    }

    /// Ensemble logits for examples seen through `views`. Each member gets
    /// its own modality of the same view. `view_ids` label the views for an
    /// optional observer.
    pub fn forward(
        &self,
        examples: &[&MultimodalExample],
        views: &[&ViewParams],
        config: &DatasetConfig,
        observer: Option<(&mut dyn ViewObserver, &[u64])>,
    ) -> Result<Outputs> {
        if examples.len() != views.len() {
            return Err(Error::Contract("one view per example required".into()));
        }
        let items: Vec<(&MultimodalExample, &ViewParams)> =
            examples.iter().copied().zip(views.iter().copied()).collect();
        if let Some((obs, ids)) = observer {
            for m in &self.members {
                let name = member_modality(m)?.name();
                for &id in ids {
                    obs.observe(name, id);
                }
            }
        }
        let outputs: Vec<Outputs> = self
            .members
            .par_iter()
            .map(|m| m.predict(&build_batch(member_modality(m)?, &items, config, false, m.spec.task)?))
            .collect::<Result<_>>()?;
        match self.heads() {
            HeadMode::Single { .. } => {
                let logits: Vec<&Tensor> = outputs
                    .iter()
                    .map(|o| match o {
                        Outputs::Single(t) => t,
                        Outputs::Dual { .. } => unreachable!("heads checked at construction"),
                    })
                    .collect();
                Ok(Outputs::Single(ensemble_logits(&logits, &self.weights)?.0))
            }
            HeadMode::Dual { .. } => {
                let mut nouns = Vec::new();
                let mut verbs = Vec::new();
                for o in &outputs {
                    if let Outputs::Dual { noun, verb } = o {
                        nouns.push(noun);
                        verbs.push(verb);
                    }
                }
                Ok(Outputs::Dual {
                    noun: ensemble_logits(&nouns, &self.weights)?.0,
                    verb: ensemble_logits(&verbs, &self.weights)?.0,
                })
            }
        }
    }

    pub fn weights_file(&self, holdout_size: usize, holdout_seed: u64) -> TeacherWeightsFile {
        TeacherWeightsFile {
            members: self
                .modalities()
                .into_iter()
                .zip(self.errors.iter().zip(&self.weights))
                .map(|(m, (&error, &weight))| (m, MemberWeight { error, weight }))
                .collect(),
            gamma: self.gamma,
            holdout_size,
            holdout_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberWeight {
    pub error: f64,
    pub weight: f64,
}

/// `{modality: {error, weight}, ..., gamma, Z, holdout_seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherWeightsFile {
    #[serde(flatten)]
    pub members: BTreeMap<Modality, MemberWeight>,
    pub gamma: f64,
    #[serde(rename = "Z")]
    pub holdout_size: usize,
    pub holdout_seed: u64,
}

impl TeacherWeightsFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Holdout errors in modality order.
    pub fn errors_for(&self, modalities: &[Modality]) -> Result<Vec<f64>> {
        modalities
            .iter()
            .map(|m| {
                self.members
                    .get(m)
                    .map(|w| w.error)
                    .ok_or_else(|| Error::Contract(format!("weights file has no {m} entry")))
            })
            .collect()
    }
}
