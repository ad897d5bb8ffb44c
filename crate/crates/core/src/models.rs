//! Modality encoders with single or dual (noun/verb) classification heads.
//!
//! Grid modalities share one topology: three `3×3` stride-2 convolutions
//! (16, 32, 64 channels) with ReLU applied per frame, spatial mean pooling,
//! mean over frames, then a 64→128 dense layer with ReLU. The layout encoder
//! embeds every box (coordinates + category one-hot) to 32 dims, averages the
//! boxes of a frame, projects to 64, averages frames and projects to 128.
//! Both emit raw logits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::rng_from;
use crate::synthdata::{
    rasterize_layout, tta_views, view_appearance, view_flow, view_layout, view_spectro,
    DatasetConfig, LayoutBox, MultimodalExample, ViewParams, LAYOUT_LINE_THICKNESS,
};
use crate::tensor::Tensor;

pub const CONV_CHANNELS: [usize; 3] = [16, 32, 64];
pub const EMBED_DIM: usize = 128;
const BOX_DIM: usize = 32;
const FRAME_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Appearance,
    Flow,
    Layout,
    Spectro,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Appearance,
        Modality::Flow,
        Modality::Layout,
        Modality::Spectro,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Appearance => "appearance",
            Modality::Flow => "flow",
            Modality::Layout => "layout",
            Modality::Spectro => "spectro",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("modality", format!("unknown modality {s:?}")))
    }

    /// Input channels of the modality's native grid.
    pub fn channels(self) -> usize {
        match self {
            Modality::Appearance => 3,
            Modality::Flow => 2,
            Modality::Spectro => 1,
            Modality::Layout => 3,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Recognition task a model is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Object-agnostic verb classification (single head).
    Verb,
    /// Composed noun·verb action classes (single head).
    Action,
    /// Separate noun and verb heads.
    NounVerb,
}

impl Task {
    /// Object-agnostic tasks see every object box under one category.
    pub fn class_agnostic(self) -> bool {
        self == Task::Verb
    }

    pub fn layout_categories(self, config: &DatasetConfig) -> usize {
        if self.class_agnostic() {
            2
        } else {
            config.num_categories()
        }
    }

    pub fn heads(self, config: &DatasetConfig) -> HeadMode {
        match self {
            Task::Verb => HeadMode::Single {
                classes: config.num_verbs,
            },
            Task::Action => HeadMode::Single {
                classes: config.num_actions(),
            },
            Task::NounVerb => HeadMode::Dual {
                nouns: config.num_nouns,
                verbs: config.num_verbs,
            },
        }
    }

    /// Single-head target for an example.
    pub fn label(self, ex: &MultimodalExample) -> usize {
        match self {
            Task::Verb => ex.verb,
            Task::Action | Task::NounVerb => ex.action,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum HeadMode {
    Single { classes: usize },
    Dual { nouns: usize, verbs: usize },
}

/// What a model reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "modality")]
pub enum InputKind {
    /// One modality in its native form.
    Native(Modality),
    /// Any modality rendered as a 3-channel grid (omnivorous model).
    Omni,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputKind,
    pub task: Task,
    pub heads: HeadMode,
    /// Layout categories seen by the layout encoder: hand plus nouns, or hand
    /// plus a generic object for class-agnostic tasks.
    pub num_categories: usize,
}

impl ModelSpec {
    pub fn new(input: InputKind, task: Task, config: &DatasetConfig) -> Self {
        Self {
            input,
            task,
            heads: task.heads(config),
            num_categories: task.layout_categories(config),
        }
    }

    fn in_channels(&self) -> usize {
        match self.input {
            InputKind::Native(m) => m.channels(),
            InputKind::Omni => 3,
        }
    }

    fn is_layout(&self) -> bool {
        self.input == InputKind::Native(Modality::Layout)
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        if self.is_layout() {
            out.push(("box.w".into(), vec![4 + self.num_categories, BOX_DIM]));
            out.push(("box.b".into(), vec![BOX_DIM]));
            out.push(("frame.w".into(), vec![BOX_DIM, FRAME_DIM]));
            out.push(("frame.b".into(), vec![FRAME_DIM]));
            out.push(("clip.w".into(), vec![FRAME_DIM, EMBED_DIM]));
            out.push(("clip.b".into(), vec![EMBED_DIM]));
        } else {
            let mut cin = self.in_channels();
            for (i, &cout) in CONV_CHANNELS.iter().enumerate() {
                out.push((format!("conv{}.w", i + 1), vec![cout, cin, 3, 3]));
                out.push((format!("conv{}.b", i + 1), vec![cout]));
                cin = cout;
            }
            out.push(("fc.w".into(), vec![cin, EMBED_DIM]));
            out.push(("fc.b".into(), vec![EMBED_DIM]));
        }
        match self.heads {
            HeadMode::Single { classes } => {
                out.push(("head.w".into(), vec![EMBED_DIM, classes]));
                out.push(("head.b".into(), vec![classes]));
            }
            HeadMode::Dual { nouns, verbs } => {
                out.push(("noun.w".into(), vec![EMBED_DIM, nouns]));
                out.push(("noun.b".into(), vec![nouns]));
                out.push(("verb.w".into(), vec![EMBED_DIM, verbs]));
                out.push(("verb.b".into(), vec![verbs]));
            }
        }
        out
    }
}

/// Model input for one batch.
#[derive(Debug, Clone)]
pub enum ModelInput {
    /// `[B×T×C×H×W]`.
    Grid(Tensor),
    Layout(LayoutBatch),
}

/// Flattened boxes of a batch of clips.
#[derive(Debug, Clone)]
pub struct LayoutBatch {
    /// `[R×(4+K)]`: normalized x, y, w, h and a category one-hot per box.
    pub features: Tensor,
    pub boxes_per_frame: Vec<usize>,
    pub frames_per_clip: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Modality the input was built from.
    pub modality: Modality,
    /// Whether grids were converted to three channels.
    pub omni: bool,
    pub input: ModelInput,
}

impl Batch {
    pub fn len(&self) -> usize {
        match &self.input {
            ModelInput::Grid(t) => t.shape()[0],
            ModelInput::Layout(l) => l.frames_per_clip.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph handles of a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Logits {
    Single(Var),
    Dual { noun: Var, verb: Var },
}

/// Materialized logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Outputs {
    Single(Tensor),
    Dual { noun: Tensor, verb: Tensor },
}

impl Outputs {
    pub fn from_graph(g: &Graph, logits: Logits) -> Outputs {
        match logits {
            Logits::Single(v) => Outputs::Single(g.value(v).clone()),
            Logits::Dual { noun, verb } => Outputs::Dual {
                noun: g.value(noun).clone(),
                verb: g.value(verb).clone(),
            },
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Outputs::Single(t) => t.shape()[0],
            Outputs::Dual { noun, .. } => noun.shape()[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityModel {
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
    /// Set once training finished; frozen models may serve as teachers.
    pub frozen: bool,
}

impl ModalityModel {
    /// Fan-in scaled uniform weights (`bound = sqrt(1/fan_in)`), zero biases.
    pub fn init(spec: ModelSpec, init_seed: u64) -> Self {
        let mut rng = rng_from(init_seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".b") {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let bound = (1.0 / fan_in as f32).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
                Tensor::new(&shape, data).expect("param shape")
            })
            .collect();
        Self {
            spec,
            params,
            frozen: false,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.spec.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        for p in &mut self.params {
            p.grad = None;
            p.requires_grad = false;
        }
        self
    }

    /// Registers parameters as graph leaves.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.grad = None;
                t.requires_grad = trainable;
                g.leaf(t)
            })
            .collect()
    }

    fn check_input(&self, batch: &Batch) -> Result<()> {
        let ok = match self.spec.input {
            InputKind::Native(m) => m == batch.modality && !batch.omni,
            InputKind::Omni => batch.omni,
        };
        if !ok {
            return Err(Error::Contract(format!(
                "model reads {:?} but batch holds {} (omni: {})",
                self.spec.input, batch.modality, batch.omni
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], batch: &Batch) -> Result<Logits> {
        self.check_input(batch)?;
        let (features, next) = match &batch.input {
            ModelInput::Grid(x) => {
                if self.spec.is_layout() {
                    return Err(Error::Contract("layout encoder needs box input".into()));
                }
                (grid_encoder(g, params, x)?, 8)
            }
            ModelInput::Layout(l) => {
                if !self.spec.is_layout() {
                    return Err(Error::Contract("grid encoder needs grid input".into()));
                }
                (layout_encoder(g, params, l)?, 6)
            }
        };
        let head = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
            let z = g.matmul(features, w)?;
            g.add_bias(z, b)
        };
        Ok(match self.spec.heads {
            HeadMode::Single { .. } => Logits::Single(head(g, params[next], params[next + 1])?),
            HeadMode::Dual { .. } => Logits::Dual {
                noun: head(g, params[next], params[next + 1])?,
                verb: head(g, params[next + 2], params[next + 3])?,
            },
        })
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, batch: &Batch) -> Result<Outputs> {
        let mut g = Graph::new();
        let params = self.register(&mut g, false);
        let logits = self.forward(&mut g, &params, batch)?;
        Ok(Outputs::from_graph(&g, logits))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: serde_json::json!({
                "spec": self.spec,
                "frozen": self.frozen,
            }),
            params: self
                .param_names()
                .into_iter()
                .zip(self.params.iter().cloned())
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_value(
            ck.model
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint manifest lacks a model spec".into()))?,
        )?;
        let frozen = ck.model.get("frozen").and_then(|v| v.as_bool()).unwrap_or(false);
        let expected = spec.param_shapes();
        if expected.len() != ck.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.params.len(),
                expected.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&ck.params) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {got_name} {:?} does not match {name} {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(Self {
            spec,
            params: ck.params.iter().map(|(_, t)| t.clone()).collect(),
            frozen,
        })
    }
}

fn grid_encoder(g: &mut Graph, p: &[Var], x: &Tensor) -> Result<Var> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::Dimension(format!(
            "grid input must be [B×T×C×H×W], got {:?}",
            s
        )));
    }
    let (b, t) = (s[0], s[1]);
    let frames = g.constant(x.clone().reshape(&[b * t, s[2], s[3], s[4]])?);
    let mut h = frames;
    for layer in 0..3 {
        h = g.conv2d(h, p[2 * layer], Some(p[2 * layer + 1]), 2)?;
        h = g.relu(h)?;
    }
    let pooled = g.spatial_mean(h)?;
    let clip = g.segment_mean(pooled, &vec![t; b])?;
    let z = g.matmul(clip, p[6])?;
    let z = g.add_bias(z, p[7])?;
    g.relu(z)
}

fn layout_encoder(g: &mut Graph, p: &[Var], l: &LayoutBatch) -> Result<Var> {
    let x = g.constant(l.features.clone());
    let z = g.matmul(x, p[0])?;
    let z = g.add_bias(z, p[1])?;
    let z = g.relu(z)?;
    let frames = g.segment_mean(z, &l.boxes_per_frame)?;
    let z = g.matmul(frames, p[2])?;
    let z = g.add_bias(z, p[3])?;
    let z = g.relu(z)?;
    let clips = g.segment_mean(z, &l.frames_per_clip)?;
    let z = g.matmul(clips, p[4])?;
    let z = g.add_bias(z, p[5])?;
    g.relu(z)
}

/// Box features for a list of clips (each a list of frames).
pub fn layout_features(
    clips: &[Vec<Vec<LayoutBox>>],
    config: &DatasetConfig,
    task: Task,
) -> Result<LayoutBatch> {
    let k = task.layout_categories(config);
    let dim = 4 + k;
    let (gw, gh) = (config.width as f32, config.height as f32);
    let mut data = Vec::new();
    let mut boxes_per_frame = Vec::new();
    let mut frames_per_clip = Vec::new();
    for clip in clips {
        frames_per_clip.push(clip.len());
        for frame in clip {
            if frame.is_empty() {
                return Err(Error::Contract("layout frame without boxes".into()));
            }
            boxes_per_frame.push(frame.len());
            for b in frame {
                let mut row = vec![0.0f32; dim];
                row[0] = b.x / gw;
                row[1] = b.y / gh;
                row[2] = b.w / gw;
                row[3] = b.h / gh;
                let cat = layout_category(b.category, task) as usize;
                if cat < k {
                    row[4 + cat] = 1.0;
                }
                data.extend(row);
            }
        }
    }
    let rows = data.len() / dim;
    Ok(LayoutBatch {
        features: Tensor::new(&[rows, dim], data)?,
        boxes_per_frame,
        frames_per_clip,
    })
}

/// Converts a native `[T×C×H×W]` modality grid to three channels.
fn to_three_channels(t: &Tensor, grid: usize) -> Tensor {
    let s = t.shape();
    let (frames, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane_in = h * w;
    let plane = grid * grid;
    let mut out = vec![0.0f32; frames * 3 * plane];
    for f in 0..frames {
        for ch in 0..3 {
            let dst = &mut out[(f * 3 + ch) * plane..(f * 3 + ch + 1) * plane];
            // Flow gains a zero third channel; single-channel grids are
            // replicated and nearest-upsampled to the common grid.
            if c == 2 && ch == 2 {
                continue;
            }
            let src_ch = if c == 1 { 0 } else { ch };
            let src = &t.data()[(f * c + src_ch) * plane_in..(f * c + src_ch + 1) * plane_in];
            for y in 0..grid {
                for x in 0..grid {
                    dst[y * grid + x] = src[(y * h / grid) * w + x * w / grid];
                }
            }
        }
    }
    Tensor::new(&[frames, 3, grid, grid], out).expect("omni shape")
}

/// One modality of one clip under a view, in the model's input form.
fn layout_category(category: u8, task: Task) -> u8 {
    if task.class_agnostic() {
        category.min(1)
    } else {
        category
    }
}

/// Layout of a clip under a view, with categories as the task sees them.
fn task_layout(ex: &MultimodalExample, view: &ViewParams, grid: usize, task: Task) -> Vec<Vec<LayoutBox>> {
    let mut frames = view_layout(ex, view, grid);
    for b in frames.iter_mut().flatten() {
        b.category = layout_category(b.category, task);
    }
    frames
}

fn view_grid(
    modality: Modality,
    ex: &MultimodalExample,
    view: &ViewParams,
    config: &DatasetConfig,
    omni: bool,
    task: Task,
) -> Tensor {
    let t = match modality {
        Modality::Appearance => view_appearance(ex, view),
        Modality::Flow => view_flow(ex, view),
        Modality::Spectro => view_spectro(ex, view),
        Modality::Layout => rasterize_layout(
            &task_layout(ex, view, config.height, task),
            config.height,
            LAYOUT_LINE_THICKNESS,
        ),
    };
    let mut t = if omni && modality != Modality::Appearance && modality != Modality::Layout {
        to_three_channels(&t, config.height)
    } else {
        t
    };
    if matches!(modality, Modality::Appearance | Modality::Layout) {
        // Centre [0, 1] intensities.
        for v in t.data_mut() {
            *v = (*v - 0.5) * 2.0;
        }
    }
    t
}

/// Builds a batch of `modality` from `(example, view)` pairs.
///
/// With `omni`, every modality is rendered as a 3-channel grid (layouts via
/// [`rasterize_layout`]). `task` decides whether object boxes keep their noun
/// category.
pub fn build_batch(
    modality: Modality,
    items: &[(&MultimodalExample, &ViewParams)],
    config: &DatasetConfig,
    omni: bool,
    task: Task,
) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let input = if modality == Modality::Layout && !omni {
        let clips: Vec<_> = items
            .iter()
            .map(|(ex, v)| task_layout(ex, v, config.height, task))
            .collect();
        ModelInput::Layout(layout_features(&clips, config, task)?)
    } else {
        let grids: Vec<Tensor> = items
            .iter()
            .map(|(ex, v)| view_grid(modality, ex, v, config, omni, task))
            .collect();
        let refs: Vec<&Tensor> = grids.iter().collect();
        ModelInput::Grid(Tensor::stack(&refs)?)
    };
    Ok(Batch {
        modality,
        omni,
        input,
    })
}

/// Modality a model reads when evaluated on a clip.
pub fn eval_modality(model: &ModalityModel) -> (Modality, bool) {
    match model.spec.input {
        InputKind::Native(m) => (m, false),
        InputKind::Omni => (Modality::Appearance, true),
    }
}

fn mean_rows(t: &Tensor, groups: usize) -> Tensor {
    let c = t.shape()[1];
    let per = t.shape()[0] / groups;
    let mut out = vec![0.0f32; groups * c];
    for gi in 0..groups {
        for j in 0..c {
            let s: f64 = (0..per).map(|r| t.data()[(gi * per + r) * c + j] as f64).sum();
            out[gi * c + j] = (s / per as f64) as f32;
        }
    }
    Tensor::new(&[groups, c], out).expect("mean shape")
}

/// Logits averaged over `clips` temporal windows × `crops` spatial crops,
/// for every example in `examples`.
pub fn tta_forward(
    model: &ModalityModel,
    examples: &[&MultimodalExample],
    clips: usize,
    crops: usize,
    config: &DatasetConfig,
) -> Result<Outputs> {
    let views = tta_views(config, clips, crops)?;
    let (modality, omni) = eval_modality(model);
    let mut items = Vec::with_capacity(examples.len() * views.len());
    for ex in examples {
        for v in &views {
            items.push((*ex, v));
        }
    }
    let out = model.predict(&build_batch(modality, &items, config, omni, model.spec.task)?)?;
    let n = examples.len();
    Ok(match out {
        Outputs::Single(t) => Outputs::Single(mean_rows(&t, n)),
        Outputs::Dual { noun, verb } => Outputs::Dual {
            noun: mean_rows(&noun, n),
            verb: mean_rows(&verb, n),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;
    use crate::synthdata::{generate_example, sample_view, Side, ViewMode};

    fn cfg() -> DatasetConfig {
        DatasetConfig::iid()
    }

    fn examples(n: u64) -> Vec<MultimodalExample> {
        let c = cfg();
        (0..n)
            .map(|i| generate_example(derive_seed(11, i), &c, Side::Train, i))
            .collect()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = cfg();
        let spec = ModelSpec::new(InputKind::Native(Modality::Flow), Task::NounVerb, &c);
        let a = ModalityModel::init(spec.clone(), 5);
        let b = ModalityModel::init(spec, 5);
        assert_eq!(a, b);
        for (name, p) in a.param_names().iter().zip(&a.params) {
            if name.ends_with(".b") {
                assert!(p.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn grid_parameter_counts_differ_only_in_first_conv() {
        let c = cfg();
        let counts: Vec<Vec<usize>> = [Modality::Appearance, Modality::Flow, Modality::Spectro]
            .iter()
            .map(|&m| {
                ModalityModel::init(ModelSpec::new(InputKind::Native(m), Task::Verb, &c), 0)
                    .params
                    .iter()
                    .map(Tensor::numel)
                    .collect()
            })
            .collect();
        for other in &counts[1..] {
            assert_ne!(other[0], counts[0][0]);
            assert_eq!(other[1..], counts[0][1..]);
        }
    }

    #[test]
    fn modality_mismatch_is_a_contract_error() {
        let c = cfg();
        let exs = examples(2);
        let v = sample_view(1, ViewMode::Eval, &c);
        let items: Vec<_> = exs.iter().map(|e| (e, &v)).collect();
        let batch = build_batch(Modality::Flow, &items, &c, false, Task::Verb).unwrap();
        let m = ModalityModel::init(
            ModelSpec::new(InputKind::Native(Modality::Appearance), Task::Verb, &c),
            0,
        );
        assert!(matches!(m.predict(&batch), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_rows_are_independent() {
        let c = cfg();
        let exs = examples(8);
        let v = sample_view(3, ViewMode::Eval, &c);
        for modality in Modality::ALL {
            let spec = ModelSpec::new(InputKind::Native(modality), Task::NounVerb, &c);
            let m = ModalityModel::init(spec, 9);
            let items: Vec<_> = exs.iter().map(|e| (e, &v)).collect();
            let full = m.predict(&build_batch(modality, &items, &c, false, Task::NounVerb).unwrap()).unwrap();
            let single = m
                .predict(&build_batch(modality, &items[3..4], &c, false, Task::NounVerb).unwrap())
                .unwrap();
            let (Outputs::Dual { noun: fa, verb: fb }, Outputs::Dual { noun: sa, verb: sb }) =
                (full, single)
            else {
                panic!("dual heads expected");
            };
            for (f, s) in [(fa, sa), (fb, sb)] {
                for (x, y) in f.row(3).iter().zip(s.row(0)) {
                    assert!((x - y).abs() < 1e-5, "{modality}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn tta_single_view_matches_eval_view() {
        let c = cfg();
        let exs = examples(3);
        let refs: Vec<_> = exs.iter().collect();
        let m = ModalityModel::init(
            ModelSpec::new(InputKind::Native(Modality::Appearance), Task::Action, &c),
            4,
        );
        let v = sample_view(0, ViewMode::Eval, &c);
        let items: Vec<_> = exs.iter().map(|e| (e, &v)).collect();
        let direct = m.predict(&build_batch(Modality::Appearance, &items, &c, false, Task::Action).unwrap()).unwrap();
        let tta = tta_forward(&m, &refs, 1, 1, &c).unwrap();
        assert_eq!(direct, tta);
        assert!(tta_forward(&m, &refs, 6, 1, &c).is_err());
        assert!(tta_forward(&m, &refs, 1, 4, &c).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = cfg();
        let m = ModalityModel::init(
            ModelSpec::new(InputKind::Native(Modality::Layout), Task::NounVerb, &c),
            2,
        )
        .freeze();
        let back = ModalityModel::from_checkpoint(
            &Checkpoint::from_bytes(&m.to_checkpoint().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(m, back);
    }
}
