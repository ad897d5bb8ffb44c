//! Spatio-temporal views shared by every modality of a clip.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::DatasetConfig;
use super::render::{LayoutBox, MultimodalExample};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Outline thickness used when drawing boxes on a canvas.
pub const LAYOUT_LINE_THICKNESS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Train,
    Eval,
}

/// One augmentation: square crop resized back to the grid, optional
/// horizontal flip, and a contiguous temporal window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewParams {
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_size: usize,
    pub hflip: bool,
    pub temporal_start: usize,
    pub frame_indices: Vec<usize>,
}

impl ViewParams {
    /// Full frame, no flip, every frame.
    pub fn identity(config: &DatasetConfig) -> Self {
        Self {
            crop_x: 0,
            crop_y: 0,
            crop_size: config.height,
            hflip: false,
            temporal_start: 0,
            frame_indices: (0..config.frames).collect(),
        }
    }

    pub fn validate(&self, config: &DatasetConfig) -> Result<()> {
        let grid = config.height;
        if self.crop_size == 0
            || self.crop_x + self.crop_size > grid
            || self.crop_y + self.crop_size > grid
        {
            return Err(Error::Contract(format!(
                "crop ({}, {}, {}) does not fit a {grid}×{grid} grid",
                self.crop_x, self.crop_y, self.crop_size
            )));
        }
        if self.frame_indices.is_empty()
            || self.frame_indices.windows(2).any(|w| w[0] >= w[1])
            || *self.frame_indices.last().unwrap() >= config.frames
        {
            return Err(Error::Contract(format!(
                "frame indices {:?} must be strictly increasing within [0, {})",
                self.frame_indices, config.frames
            )));
        }
        Ok(())
    }
}

/// Side length of the single evaluation crop.
pub fn eval_crop_size(config: &DatasetConfig) -> usize {
    (config.height * 7).div_ceil(8)
}

fn window(start: usize, len: usize) -> Vec<usize> {
    (start..start + len).collect()
}

pub fn sample_view(step_seed: u64, mode: ViewMode, config: &DatasetConfig) -> ViewParams {
    let grid = config.height;
    let span = config.frames - config.clip_frames;
    match mode {
        ViewMode::Train => {
            let mut rng = rng_from(step_seed);
            let min_size = (grid * 3).div_ceil(4);
            let crop_size = rng.gen_range(min_size..=grid);
            let crop_x = rng.gen_range(0..=grid - crop_size);
            let crop_y = rng.gen_range(0..=grid - crop_size);
            let hflip = rng.gen_bool(0.5);
            let temporal_start = rng.gen_range(0..=span);
            ViewParams {
                crop_x,
                crop_y,
                crop_size,
                hflip,
                temporal_start,
                frame_indices: window(temporal_start, config.clip_frames),
            }
        }
        ViewMode::Eval => {
            let crop_size = eval_crop_size(config);
            let offset = (grid - crop_size) / 2;
            let temporal_start = span / 2;
            ViewParams {
                crop_x: offset,
                crop_y: offset,
                crop_size,
                hflip: false,
                temporal_start,
                frame_indices: window(temporal_start, config.clip_frames),
            }
        }
    }
}

/// Views for test-time augmentation: `clips` evenly spaced temporal windows
/// times `crops` spatial crops (center, then left and right).
pub fn tta_views(config: &DatasetConfig, clips: usize, crops: usize) -> Result<Vec<ViewParams>> {
    let span = config.frames - config.clip_frames;
    if clips == 0 || clips > span + 1 {
        return Err(Error::Contract(format!(
            "{clips} temporal clips need distinct starts within 0..={span}"
        )));
    }
    if crops == 0 || crops > 3 {
        return Err(Error::Contract(format!(
            "{crops} spatial crops requested; 1 or 3 are supported up to 3"
        )));
    }
    let grid = config.height;
    let size = eval_crop_size(config);
    let centre = (grid - size) / 2;
    let xs = [centre, 0, grid - size];
    let starts: Vec<usize> = if clips == 1 {
        vec![span / 2]
    } else {
        (0..clips)
            .map(|i| ((i * span) as f64 / (clips - 1) as f64).round() as usize)
            .collect()
    };
    let mut views = Vec::with_capacity(clips * crops);
    for &start in &starts {
        for &x in &xs[..crops] {
            views.push(ViewParams {
                crop_x: x,
                crop_y: centre,
                crop_size: size,
                hflip: false,
                temporal_start: start,
                frame_indices: window(start, config.clip_frames),
            });
        }
    }
    Ok(views)
}

/// Source pixel index for each output column/row under a crop of `size`.
fn source_index(out: usize, offset: usize, size: usize, grid: usize) -> usize {
    offset + ((out as f64 + 0.5) * size as f64 / grid as f64).floor() as usize
}

/// Crops, resizes (nearest neighbour) and optionally mirrors a `[T×C×H×W]`
/// grid, keeping only the frames in the view.
fn transform_grid(src: &Tensor, view: &ViewParams) -> Tensor {
    let s = src.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let cols: Vec<usize> = (0..w)
        .map(|ox| {
            let u = if view.hflip { w - 1 - ox } else { ox };
            source_index(u, view.crop_x, view.crop_size, w)
        })
        .collect();
    let rows: Vec<usize> = (0..h)
        .map(|oy| source_index(oy, view.crop_y, view.crop_size, h))
        .collect();
    let data = src.data();
    let t_out = view.frame_indices.len();
    let mut out = vec![0.0f32; t_out * c * plane];
    for (ti, &t) in view.frame_indices.iter().enumerate() {
        for ch in 0..c {
            let sp = &data[(t * c + ch) * plane..(t * c + ch + 1) * plane];
            let dp = &mut out[(ti * c + ch) * plane..(ti * c + ch + 1) * plane];
            for (oy, &sy) in rows.iter().enumerate() {
                for (ox, &sx) in cols.iter().enumerate() {
                    dp[oy * w + ox] = sp[sy * w + sx];
                }
            }
        }
    }
    Tensor::new(&[t_out, c, h, w], out).expect("view shape")
}

pub fn view_appearance(example: &MultimodalExample, view: &ViewParams) -> Tensor {
    transform_grid(&example.appearance, view)
}

/// Flow is resampled like appearance, rescaled to output pixels per frame,
/// and its x component negated under a flip.
pub fn view_flow(example: &MultimodalExample, view: &ViewParams) -> Tensor {
    let mut t = transform_grid(&example.flow, view);
    let grid = t.shape()[2];
    let scale = grid as f32 / view.crop_size as f32;
    let plane = grid * grid;
    let x_sign = if view.hflip { -1.0 } else { 1.0 };
    for frame in t.data_mut().chunks_mut(2 * plane) {
        let (fx, fy) = frame.split_at_mut(plane);
        for v in fx {
            *v = if *v == 0.0 { 0.0 } else { *v * scale * x_sign };
        }
        for v in fy {
            *v = if *v == 0.0 { 0.0 } else { *v * scale };
        }
    }
    t
}

pub fn view_spectro(example: &MultimodalExample, view: &ViewParams) -> Tensor {
    let s = example.spectro.shape();
    let per_frame = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(view.frame_indices.len() * per_frame);
    for &t in &view.frame_indices {
        data.extend_from_slice(&example.spectro.data()[t * per_frame..(t + 1) * per_frame]);
    }
    Tensor::new(&[view.frame_indices.len(), s[1], s[2], s[3]], data).expect("spectro shape")
}

pub fn transform_box(b: &LayoutBox, view: &ViewParams, grid: usize) -> LayoutBox {
    let scale = grid as f32 / view.crop_size as f32;
    let mut x = (b.x - view.crop_x as f32) * scale;
    let y = (b.y - view.crop_y as f32) * scale;
    let w = b.w * scale;
    let h = b.h * scale;
    if view.hflip {
        x = grid as f32 - x - w;
    }
    LayoutBox {
        x,
        y,
        w,
        h,
        category: b.category,
    }
    .clipped(grid as f32, grid as f32)
}

pub fn view_layout(example: &MultimodalExample, view: &ViewParams, grid: usize) -> Vec<Vec<LayoutBox>> {
    view.frame_indices
        .iter()
        .map(|&t| {
            example.layout[t]
                .iter()
                .map(|b| transform_box(b, view, grid))
                .collect()
        })
        .collect()
}

/// Applies one view identically to every modality. Labels are unchanged.
pub fn apply_view(
    example: &MultimodalExample,
    view: &ViewParams,
    config: &DatasetConfig,
) -> Result<MultimodalExample> {
    view.validate(config)?;
    Ok(MultimodalExample {
        id: example.id,
        appearance: view_appearance(example, view),
        flow: view_flow(example, view),
        layout: view_layout(example, view, config.height),
        spectro: view_spectro(example, view),
        noun: example.noun,
        verb: example.verb,
        action: example.action,
    })
}

/// Fixed category colors: hand blue, then distinct hues for objects.
pub fn category_color(category: u8) -> [f32; 3] {
    const TABLE: [[f32; 3]; 8] = [
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
        [0.0, 0.7, 0.0],
        [1.0, 0.55, 0.0],
        [0.6, 0.0, 0.8],
        [0.0, 0.75, 0.75],
        [0.85, 0.0, 0.55],
        [0.45, 0.3, 0.1],
    ];
    match TABLE.get(category as usize) {
        Some(c) => *c,
        None => {
            let k = category as f32 * 0.618_034;
            let hue = k.fract();
            [hue, 1.0 - hue, (hue * 2.0).fract() * 0.8]
        }
    }
}

/// Draws boxes as outlines of `thickness` pixels on a white `[T×3×H×W]`
/// canvas, one color per category.
pub fn rasterize_layout(frames: &[Vec<LayoutBox>], grid: usize, thickness: usize) -> Tensor {
    let plane = grid * grid;
    let mut data = vec![1.0f32; frames.len() * 3 * plane];
    for (t, boxes) in frames.iter().enumerate() {
        let canvas = &mut data[t * 3 * plane..(t + 1) * 3 * plane];
        for b in boxes {
            let xs: Vec<usize> = (0..grid).filter(|&px| col_in(b, px)).collect();
            let ys: Vec<usize> = (0..grid).filter(|&py| row_in(b, py)).collect();
            let (Some(&x0), Some(&x1), Some(&y0), Some(&y1)) =
                (xs.first(), xs.last(), ys.first(), ys.last())
            else {
                continue;
            };
            let color = category_color(b.category);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let edge = px < x0 + thickness
                        || px + thickness > x1
                        || py < y0 + thickness
                        || py + thickness > y1;
                    if edge {
                        for (ch, cv) in color.iter().enumerate() {
                            canvas[ch * plane + py * grid + px] = *cv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[frames.len(), 3, grid, grid], data).expect("canvas shape")
}

fn col_in(b: &LayoutBox, px: usize) -> bool {
    let c = px as f32 + 0.5;
    c >= b.x && c < b.x + b.w
}

fn row_in(b: &LayoutBox, py: usize) -> bool {
    let c = py as f32 + 0.5;
    c >= b.y && c < b.y + b.h
}
