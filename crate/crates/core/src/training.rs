//! Optimizer, learning-rate schedule and the teacher, Omnivore and student
//! training loops.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::distill::{task_loss, DistillConfig, Targets, TeacherEnsemble, ViewObserver};
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::metrics::MetricsReport;
use crate::models::{
    build_batch, eval_modality, tta_forward, InputKind, Modality, ModalityModel, ModelSpec,
    Outputs, Task,
};
use crate::rng::{derive_named, derive_seed, rng_from};
use crate::synthdata::{sample_view, DatasetConfig, MultimodalExample, ViewMode, ViewParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub weight_decay: f32,
    pub warmup_fraction: f64,
    pub clip_norm: f32,
    /// Evaluate on the validation set every this many epochs (and after the last).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            peak_lr: 4e-3,
            weight_decay: 5e-2,
            warmup_fraction: 0.05,
            clip_norm: 5.0,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config("warmup_fraction", "must lie in (0, 1)"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.epochs * self.steps_per_epoch(examples)
    }
}

/// Linear warmup over the first `⌈0.05·total⌉` steps, then linear decay
/// reaching zero at `total`.
pub fn lr_at_step(step: usize, total_steps: usize, peak: f32) -> f32 {
    lr_with_warmup(step, total_steps, peak, 0.05)
}

pub fn lr_with_warmup(step: usize, total_steps: usize, peak: f32, warmup_fraction: f64) -> f32 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warm = ((warmup_fraction * total_steps as f64).ceil() as usize).clamp(1, total_steps);
    let peak = peak as f64;
    let lr = if step < warm {
        peak * step as f64 / warm as f64
    } else if total_steps == warm {
        peak
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warm) as f64
    };
    lr as f32
}

/// Scales every gradient by `max_norm / ‖g‖` when the global L2 norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay; moments kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: weight_decay as f64,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f32>], lr: f32) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract("optimizer, parameter and gradient counts differ".into()));
        }
        self.step += 1;
        let lr = lr as f64;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != p.numel() {
                return Err(Error::Dimension(format!(
                    "gradient of {} values for parameter {:?}",
                    g.len(),
                    p.shape()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mut x = *w as f64;
                x -= lr * self.weight_decay * x;
                x -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w = x as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f32,
    pub loss: f64,
    pub ce: f64,
    pub kl: Option<f64>,
    pub grad_norm: f64,
    /// Modality drawn for the batch (Omnivore runs).
    pub modality: Option<Modality>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// One JSON object per evaluated epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.epochs {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn final_report(&self) -> Option<&MetricsReport> {
        self.epochs.iter().rev().find_map(|r| r.val.as_ref())
    }
}

/// Training and validation examples plus their generator config.
#[derive(Debug, Clone, Copy)]
pub struct Data<'a> {
    pub train: &'a [MultimodalExample],
    pub val: &'a [MultimodalExample],
    pub config: &'a DatasetConfig,
}

/// Seed of the view applied to example slot `j` of step `step`.
pub fn view_seed(run_seed: u64, step: usize, j: usize) -> u64 {
    derive_seed(derive_seed(derive_named(run_seed, "views"), step as u64), j as u64)
}

/// Unique id of the view at slot `j` of step `step`.
pub fn view_id(step: usize, batch_size: usize, j: usize) -> u64 {
    (step * batch_size + j) as u64
}

pub fn init_seed(run_seed: u64) -> u64 {
    derive_named(run_seed, "init")
}

/// Softmax probabilities of model outputs and the evaluation report.
pub fn report_from_outputs(out: &Outputs, task: Task, examples: &[&MultimodalExample]) -> Result<MetricsReport> {
    let t = Targets::of(task, examples);
    let probs = |l: &Tensor| -> Result<Tensor> {
        Tensor::new(l.shape(), softmax_rows(l.data(), l.shape()[1], 1.0))
    };
    match out {
        Outputs::Single(l) => MetricsReport::single(&probs(l)?, &t.labels),
        Outputs::Dual { noun, verb } => {
            MetricsReport::compositional(&probs(noun)?, &probs(verb)?, &t.nouns, &t.verbs)
        }
    }
}

/// Logits of every example averaged over `clips × crops` evaluation views.
pub fn predict_all(
    model: &ModalityModel,
    examples: &[MultimodalExample],
    config: &DatasetConfig,
    clips: usize,
    crops: usize,
) -> Result<Outputs> {
    let chunk = (64 / (clips * crops)).max(1);
    let mut parts = Vec::new();
    for c in examples.chunks(chunk) {
        let refs: Vec<&MultimodalExample> = c.iter().collect();
        parts.push(tta_forward(model, &refs, clips, crops, config)?);
    }
    concat_outputs(&parts)
}

fn concat_outputs(parts: &[Outputs]) -> Result<Outputs> {
    let cat = |ts: Vec<&Tensor>| -> Result<Tensor> {
        let c = ts[0].shape()[1];
        let data: Vec<f32> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(&[data.len() / c, c], data)
    };
    match parts.first() {
        None => Err(Error::Contract("no examples to evaluate".into())),
        Some(Outputs::Single(_)) => Ok(Outputs::Single(cat(
            parts
                .iter()
                .map(|p| match p {
                    Outputs::Single(t) => t,
                    Outputs::Dual { noun, .. } => noun,
                })
                .collect(),
        )?)),
        Some(Outputs::Dual { .. }) => {
            let mut nouns = Vec::new();
            let mut verbs = Vec::new();
            for p in parts {
                if let Outputs::Dual { noun, verb } = p {
                    nouns.push(noun);
                    verbs.push(verb);
                }
            }
            Ok(Outputs::Dual {
                noun: cat(nouns)?,
                verb: cat(verbs)?,
            })
        }
    }
}

/// Metrics of `model` on `examples`, averaging logits over `clips × crops` views.
pub fn evaluate(
    model: &ModalityModel,
    examples: &[MultimodalExample],
    config: &DatasetConfig,
    clips: usize,
    crops: usize,
) -> Result<MetricsReport> {
    let out = predict_all(model, examples, config, clips, crops)?;
    let refs: Vec<&MultimodalExample> = examples.iter().collect();
    report_from_outputs(&out, model.spec.task, &refs)
}

/// Per-step hook of the shared loop: builds the loss for a batch.
struct StepCtx<'a> {
    step: usize,
    examples: Vec<&'a MultimodalExample>,
    views: Vec<ViewParams>,
}

struct StepLosses {
    loss: f64,
    ce: f64,
    kl: Option<f64>,
}

fn run_loop<'a, F>(
    mut model: ModalityModel,
    data: Data<'a>,
    cfg: &TrainConfig,
    epochs: usize,
    mut step_fn: F,
) -> Result<(ModalityModel, TrainLog)>
where
    F: FnMut(&StepCtx<'a>, &mut Graph, &ModalityModel, &[Var]) -> Result<(Var, StepLosses, Option<Modality>)>,
{
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let per_epoch = cfg.steps_per_epoch(data.train.len());
    let total = epochs * per_epoch;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut log = TrainLog::default();
    let shuffle_root = derive_named(cfg.seed, "shuffle");
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(shuffle_root, epoch as u64)));
        let mut loss_sum = 0.0f64;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let examples: Vec<&MultimodalExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let views = (0..examples.len())
                .map(|j| sample_view(view_seed(cfg.seed, step, j), ViewMode::Train, data.config))
                .collect();
            let ctx = StepCtx {
                step,
                examples,
                views,
            };
            let mut g = Graph::new();
            let params = model.register(&mut g, true);
            let (loss, losses, modality) = step_fn(&ctx, &mut g, &model, &params)?;
            if !losses.loss.is_finite() {
                return Err(Error::State(format!("non-finite loss at step {step}")));
            }
            g.backward(loss)?;
            let mut grads: Vec<Vec<f32>> = params
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect();
            let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            lr = lr_with_warmup(step, total, cfg.peak_lr, cfg.warmup_fraction);
            opt.update(&mut model.params, &grads, lr)?;
            loss_sum += losses.loss;
            log.steps.push(StepRecord {
                step,
                lr,
                loss: losses.loss,
                ce: losses.ce,
                kl: losses.kl,
                grad_norm,
                modality,
            });
            step += 1;
        }
        let last = epoch + 1 == epochs;
        let val = if (epoch + 1) % cfg.eval_every == 0 || last {
            Some(evaluate(&model, data.val, data.config, 1, 1)?)
        } else {
            None
        };
        log.epochs.push(EpochRecord {
            epoch,
            step,
            lr,
            train_loss: loss_sum / per_epoch as f64,
            val,
        });
    }
    Ok((model.freeze(), log))
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

/// Trains a modality-specific model on cross-entropy alone.
pub fn train_teacher(
    modality: Modality,
    task: Task,
    data: Data<'_>,
    cfg: &TrainConfig,
) -> Result<(ModalityModel, TrainLog)> {
    let spec = ModelSpec::new(InputKind::Native(modality), task, data.config);
    let model = ModalityModel::init(spec, init_seed(cfg.seed));
    let ce_only = DistillConfig {
        lambda: 0.0,
        ..DistillConfig::default()
    };
    run_loop(model, data, cfg, cfg.epochs, |ctx, g, model, params| {
        let items: Vec<_> = ctx.examples.iter().copied().zip(&ctx.views).collect();
        let batch = build_batch(modality, &items, data.config, false, task)?;
        let logits = model.forward(g, params, &batch)?;
        let targets = Targets::of(task, &ctx.examples);
        let terms = task_loss(g, logits, None, &targets, &ce_only)?;
        let losses = StepLosses {
            loss: scalar(g, terms.total),
            ce: scalar(g, terms.ce),
            kl: None,
        };
        Ok((terms.total, losses, None))
    })
}

/// One shared model trained on homogeneous single-modality batches, the
/// modality drawn uniformly per batch. Runs `M×` the configured epochs.
pub fn train_omnivore(
    modalities: &[Modality],
    task: Task,
    data: Data<'_>,
    cfg: &TrainConfig,
) -> Result<(ModalityModel, TrainLog)> {
    if modalities.is_empty() {
        return Err(Error::config("modalities", "at least one modality required"));
    }
    let spec = ModelSpec::new(InputKind::Omni, task, data.config);
    let model = ModalityModel::init(spec, init_seed(cfg.seed));
    let mut draws = rng_from(modality_draw_seed(cfg.seed));
    let ce_only = DistillConfig {
        lambda: 0.0,
        ..DistillConfig::default()
    };
    let epochs = cfg.epochs * modalities.len();
    run_loop(model, data, cfg, epochs, |ctx, g, model, params| {
        let modality = modalities[draws.gen_range(0..modalities.len())];
        let items: Vec<_> = ctx.examples.iter().copied().zip(&ctx.views).collect();
        let batch = build_batch(modality, &items, data.config, true, task)?;
        let logits = model.forward(g, params, &batch)?;
        let targets = Targets::of(task, &ctx.examples);
        let terms = task_loss(g, logits, None, &targets, &ce_only)?;
        let losses = StepLosses {
            loss: scalar(g, terms.total),
            ce: scalar(g, terms.ce),
            kl: None,
        };
        Ok((terms.total, losses, Some(modality)))
    })
}

/// Seed of the per-batch modality draws of an Omnivore run.
pub fn modality_draw_seed(run_seed: u64) -> u64 {
    derive_named(run_seed, "modality")
}

/// Trains an appearance-only student against the teacher ensemble. Every
/// step, each example's view is shared by all teacher members and the
/// student. With λ = 0 the teacher is not evaluated.
pub fn distill_student(
    teacher: &TeacherEnsemble,
    data: Data<'_>,
    distill: &DistillConfig,
    cfg: &TrainConfig,
    init: Option<ModalityModel>,
    mut observer: Option<&mut dyn ViewObserver>,
) -> Result<(ModalityModel, TrainLog)> {
    distill.validate()?;
    if teacher.members().iter().any(|m| !m.frozen) {
        return Err(Error::Contract("teacher members must be frozen".into()));
    }
    let task = teacher.members()[0].spec.task;
    let spec = ModelSpec::new(InputKind::Native(Modality::Appearance), task, data.config);
    let model = match init {
        Some(mut m) => {
            if m.spec != spec {
                return Err(Error::Contract("initial student does not match the student spec".into()));
            }
            m.frozen = false;
            m
        }
        None => ModalityModel::init(spec, init_seed(cfg.seed)),
    };
    run_loop(model, data, cfg, cfg.epochs, |ctx, g, model, params| {
        let ids: Vec<u64> = (0..ctx.examples.len())
            .map(|j| view_id(ctx.step, cfg.batch_size, j))
            .collect();
        let view_refs: Vec<&ViewParams> = ctx.views.iter().collect();
        let teacher_out = if distill.lambda > 0.0 {
            let obs = observer.as_mut().map(|o| (&mut **o as &mut dyn ViewObserver, ids.as_slice()));
            Some(teacher.forward(&ctx.examples, &view_refs, data.config, obs)?)
        } else {
            None
        };
        if let Some(o) = observer.as_mut() {
            for &id in &ids {
                o.observe("student", id);
            }
        }
        let items: Vec<_> = ctx.examples.iter().copied().zip(view_refs.iter().copied()).collect();
        let batch = build_batch(Modality::Appearance, &items, data.config, false, task)?;
        let logits = model.forward(g, params, &batch)?;
        let targets = Targets::of(task, &ctx.examples);
        let terms = task_loss(g, logits, teacher_out.as_ref(), &targets, distill)?;
        let losses = StepLosses {
            loss: scalar(g, terms.total),
            ce: scalar(g, terms.ce),
            kl: terms.kl.map(|k| scalar(g, k)),
        };
        Ok((terms.total, losses, None))
    })
}

/// Modality a trained model is evaluated on.
pub fn model_eval_modality(model: &ModalityModel) -> Modality {
    eval_modality(model).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at_step(0, 1000, 1e-4), 0.0);
        assert!((lr_at_step(50, 1000, 1e-4) - 1e-4).abs() < 1e-12);
        assert!((lr_at_step(525, 1000, 1e-4) - 5e-5).abs() < 1e-12);
        assert!(lr_at_step(999, 1000, 1e-4) > 0.0);
    }

    #[test]
    fn schedule_peaks_once() {
        for total in [2usize, 7, 20, 240, 1000] {
            let lrs: Vec<f32> = (0..total).map(|s| lr_at_step(s, total, 1.0)).collect();
            let peaks = lrs.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(peaks, 1, "total {total}");
        }
    }

    #[test]
    fn clip_rule() {
        let mut g = vec![vec![3.0f32], vec![0.0]];
        assert_eq!(clip_grad_norm(&mut g, 5.0), 3.0);
        assert_eq!(g[0][0], 3.0);
        let mut g = vec![vec![6.0f32, 8.0]];
        assert_eq!(clip_grad_norm(&mut g, 5.0), 10.0);
        assert!((g[0][0] - 3.0).abs() < 1e-6 && (g[0][1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn adamw_zero_grad_fixed_point() {
        let mut p = vec![Tensor::from_vec(vec![0.3, -1.2])];
        let mut opt = AdamW::new(&p, 0.0);
        opt.update(&mut p, &[vec![0.0, 0.0]], 1e-3).unwrap();
        assert_eq!(p[0].data(), &[0.3, -1.2]);
    }

    #[test]
    fn config_validation_names_field() {
        let c = TrainConfig {
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "clip_norm"),
            other => panic!("{other:?}"),
        }
    }
}
