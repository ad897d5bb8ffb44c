//! Procedural rendering of one multimodal clip.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{DatasetConfig, Side, SplitMode};
use crate::rng::{derive_named, rng_from, Rng};
use crate::tensor::Tensor;

pub const HAND_CATEGORY: u8 = 0;
const HAND_SIZE: i32 = 5;
/// Pushing hands are bars across the direction of motion.
const HAND_LEN: i32 = 7;
const HAND_THICK: i32 = 3;
const HAND_COLOR: [f32; 3] = [0.93, 0.72, 0.58];
const DISTRACTOR_SIZE: i32 = 7;
const HUE_JITTER: f32 = 0.06;

/// Motion programs, indexed by verb label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    MoveLeft,
    MoveRight,
    MoveUp,
    Grow,
}

impl Motion {
    pub fn from_verb(verb: usize) -> Motion {
        match verb {
            0 => Motion::MoveLeft,
            1 => Motion::MoveRight,
            2 => Motion::MoveUp,
            _ => Motion::Grow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub category: u8,
}

impl LayoutBox {
    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Whether the center of pixel `(px, py)` lies inside the box.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (cx, cy) = (px as f32 + 0.5, py as f32 + 0.5);
        cx >= self.x && cx < self.x + self.w && cy >= self.y && cy < self.y + self.h
    }

    pub fn clipped(self, width: f32, height: f32) -> LayoutBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        LayoutBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            category: self.category,
        }
    }
}

/// One generated clip with every modality and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalExample {
    pub id: u64,
    /// `[T×3×H×W]` in `[0, 1]`.
    pub appearance: Tensor,
    /// `[T×2×H×W]`, x and y velocity in pixels per frame.
    pub flow: Tensor,
    /// Per frame: hand box first, then the active object.
    pub layout: Vec<Vec<LayoutBox>>,
    /// `[T×1×F×F]` in `[0, 1]`.
    pub spectro: Tensor,
    pub noun: usize,
    pub verb: usize,
    pub action: usize,
}

impl MultimodalExample {
    pub fn frames(&self) -> usize {
        self.appearance.shape()[0]
    }
}

/// Integer-pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x: i32,
    y: i32,
    w: i32,
    h: i32,
}

impl Rect {
    fn to_box(self, category: u8, grid: usize) -> LayoutBox {
        LayoutBox {
            x: self.x as f32,
            y: self.y as f32,
            w: self.w as f32,
            h: self.h as f32,
            category,
        }
        .clipped(grid as f32, grid as f32)
    }
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    color: [f32; 3],
    pattern: usize,
    period: i32,
    phase: i32,
}

impl Texture {
    /// Per-clip instance of a noun's texture: hue, saturation, value and
    /// pattern phase vary around the noun's prototype.
    fn for_noun(noun: usize, rng: &mut Rng) -> Texture {
        // Golden-ratio hue walk keeps neighbouring nouns far apart in color.
        let hue = (noun as f32 * 0.618_034 + 0.05 + rng.gen_range(-HUE_JITTER..HUE_JITTER)).rem_euclid(1.0);
        let period = 2 + ((noun / 4) % 2) as i32;
        Texture {
            color: hsv_to_rgb(hue, rng.gen_range(0.55..1.0), rng.gen_range(0.6..1.0)),
            pattern: noun % 4,
            period,
            phase: rng.gen_range(0..2 * period),
        }
    }

    /// Color at texture-local coordinates `(u, v)`.
    fn sample(&self, u: i32, v: i32) -> [f32; 3] {
        let (u, v) = (u + self.phase, v + self.phase);
        let p = self.period;
        let on = match self.pattern {
            0 => (v / p) % 2 == 0,
            1 => (u / p) % 2 == 0,
            2 => ((u / p) + (v / p)) % 2 == 0,
            _ => u % (p + 1) == 0 || v % (p + 1) == 0,
        };
        let k = if on { 1.0 } else { 0.35 };
        [self.color[0] * k, self.color[1] * k, self.color[2] * k]
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-clip latent scene description.
#[derive(Debug, Clone)]
struct Scene {
    noun: usize,
    verb: usize,
    motion: Motion,
    #[allow(dead_code)]
    speed: i32,
    objects: Vec<Rect>,
    hands: Vec<Rect>,
    distractor: Option<(i32, i32)>,
    background: [f32; 3],
    spectro_offset: f32,
}

fn object_rect(motion: Motion, speed: i32, start: (i32, i32), size: (i32, i32), t: i32) -> Rect {
    let (x0, y0) = start;
    let (w, h) = size;
    match motion {
        Motion::MoveLeft => Rect { x: x0 - speed * t, y: y0, w, h },
        Motion::MoveRight => Rect { x: x0 + speed * t, y: y0, w, h },
        Motion::MoveUp => Rect { x: x0, y: y0 - speed * t, w, h },
        Motion::Grow => Rect { x: x0, y: y0, w: w + t, h: h + t },
    }
}

/// The hand pushes from the trailing side as a bar across the motion, and
/// rests as a square above a growing object.
fn hand_rect(motion: Motion, obj: Rect) -> Rect {
    let (l, k, s) = (HAND_LEN, HAND_THICK, HAND_SIZE);
    match motion {
        Motion::MoveRight => Rect { x: obj.x - k, y: obj.y + obj.h / 2 - l / 2, w: k, h: l },
        Motion::MoveLeft => Rect { x: obj.x + obj.w, y: obj.y + obj.h / 2 - l / 2, w: k, h: l },
        Motion::MoveUp => Rect { x: obj.x + obj.w / 2 - l / 2, y: obj.y + obj.h, w: l, h: k },
        Motion::Grow => Rect { x: obj.x, y: obj.y - s, w: s, h: s },
    }
}

fn sample_scene(rng: &mut Rng, config: &DatasetConfig, side: Side) -> (Scene, bool) {
    let nouns = config.nouns_for(side);
    let noun = nouns[rng.gen_range(0..nouns.len())];
    let biased_side = side == Side::Train || config.split_mode == SplitMode::Iid;
    let biased = biased_side && rng.gen::<f32>() < config.appearance_bias_strength;
    let mut verb = rng.gen_range(0..config.num_verbs);
    if biased
        && config.split_mode == SplitMode::Compositional
        && rng.gen::<f32>() < config.cooccurrence_strength
    {
        verb = preferred_verb(noun, config);
    }
    let motion = Motion::from_verb(verb);
    let grid = config.width as i32;
    let t_last = config.frames as i32 - 1;
    let speed = if motion == Motion::Grow { 1 } else { rng.gen_range(1..=2) };
    let w = rng.gen_range(6..=9);
    let h = rng.gen_range(6..=9);
    let travel = speed * t_last;
    let jitter = rng.gen_range(-3..=3);
    let cross = rng.gen_range(HAND_SIZE + 1..=grid - 9 - HAND_SIZE - 1);
    let start = match motion {
        Motion::MoveRight => ((grid - w - travel) / 2 + jitter, cross),
        Motion::MoveLeft => ((grid - w + travel) / 2 + jitter, cross),
        Motion::MoveUp => (cross, (grid - h + travel) / 2 + jitter),
        Motion::Grow => {
            let x = rng.gen_range(2..=grid - w - t_last - 2);
            let y = rng.gen_range(HAND_SIZE + 1..=grid - h - t_last - 2);
            (x, y)
        }
    };
    let objects: Vec<Rect> = (0..config.frames as i32)
        .map(|t| object_rect(motion, speed, start, (w, h), t))
        .collect();
    let hands = objects.iter().map(|&o| hand_rect(motion, o)).collect();
    let distractor = biased.then(|| {
        (
            rng.gen_range(0..=grid - DISTRACTOR_SIZE),
            rng.gen_range(0..=grid - DISTRACTOR_SIZE),
        )
    });
    let base = rng.gen_range(0.35..0.6);
    let background = [
        base + rng.gen_range(-0.05..0.05),
        base + rng.gen_range(-0.05..0.05),
        base + rng.gen_range(-0.05..0.05),
    ];
    let spectro_offset = rng.gen_range(-1.5..1.5);
    (
        Scene {
            noun,
            verb,
            motion,
            speed,
            objects,
            hands,
            distractor,
            background,
            spectro_offset,
        },
        biased,
    )
}

/// Verb that co-occurs with `noun` in biased compositional training data.
pub fn preferred_verb(noun: usize, config: &DatasetConfig) -> usize {
    let train = config.nouns_for(Side::Train);
    let rank = train.iter().position(|&n| n == noun).unwrap_or(noun);
    rank % config.num_verbs
}

/// Generates one clip. Pure function of its arguments.
pub fn generate_example(
    example_seed: u64,
    config: &DatasetConfig,
    side: Side,
    id: u64,
) -> MultimodalExample {
    let mut rng = rng_from(example_seed);
    let (scene, _) = sample_scene(&mut rng, config, side);
    let mut tex_rng = rng_from(derive_named(example_seed, "texture"));
    let mut spec_rng = rng_from(derive_named(example_seed, "spectro"));
    let appearance = render_appearance(&scene, config, &mut tex_rng);
    let flow = render_flow(&scene, config);
    let spectro = render_spectro(&scene, config, &mut spec_rng);
    let grid = config.width;
    let layout = scene
        .objects
        .iter()
        .zip(&scene.hands)
        .map(|(o, hnd)| {
            vec![
                hnd.to_box(HAND_CATEGORY, grid),
                o.to_box((scene.noun + 1) as u8, grid),
            ]
        })
        .collect();
    MultimodalExample {
        id,
        appearance,
        flow,
        layout,
        spectro,
        noun: scene.noun,
        verb: scene.verb,
        action: scene.noun * config.num_verbs + scene.verb,
    }
}

fn paint(img: &mut [f32], grid: usize, rect: Rect, mut color: impl FnMut(i32, i32) -> [f32; 3]) {
    let g = grid as i32;
    let plane = grid * grid;
    for py in rect.y.max(0)..(rect.y + rect.h).min(g) {
        for px in rect.x.max(0)..(rect.x + rect.w).min(g) {
            let c = color(px - rect.x, py - rect.y);
            let idx = py as usize * grid + px as usize;
            for ch in 0..3 {
                img[ch * plane + idx] = c[ch];
            }
        }
    }
}

fn render_appearance(scene: &Scene, config: &DatasetConfig, rng: &mut Rng) -> Tensor {
    let grid = config.width;
    let plane = grid * grid;
    let t_count = config.frames;
    // Static background grain shared by all frames.
    let grain: Vec<f32> = (0..plane).map(|_| rng.gen_range(-0.06..0.06)).collect();
    let texture = Texture::for_noun(scene.noun, rng);
    let mut data = vec![0.0f32; t_count * 3 * plane];
    for t in 0..t_count {
        let img = &mut data[t * 3 * plane..(t + 1) * 3 * plane];
        for ch in 0..3 {
            for (i, v) in img[ch * plane..(ch + 1) * plane].iter_mut().enumerate() {
                *v = scene.background[ch] + grain[i];
            }
        }
        if let Some((dx, dy)) = scene.distractor {
            let r = Rect { x: dx, y: dy, w: DISTRACTOR_SIZE, h: DISTRACTOR_SIZE };
            paint(img, grid, r, |u, v| texture.sample(u, v));
        }
        paint(img, grid, scene.objects[t], |u, v| texture.sample(u, v));
        paint(img, grid, scene.hands[t], |_, _| HAND_COLOR);
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[t_count, 3, grid, grid], data).expect("appearance shape")
}

/// Analytic per-pixel velocity of each rendered rectangle between frame `t`
/// and `t + 1`; the final frame repeats the last transition.
fn render_flow(scene: &Scene, config: &DatasetConfig) -> Tensor {
    let grid = config.width;
    let g = grid as i32;
    let plane = grid * grid;
    let t_count = config.frames;
    let mut data = vec![0.0f32; t_count * 2 * plane];
    for t in 0..t_count {
        let (a, b) = if t + 1 < t_count { (t, t + 1) } else { (t - 1, t) };
        let frame = &mut data[t * 2 * plane..(t + 1) * 2 * plane];
        for (rects, is_object) in [(&scene.objects, true), (&scene.hands, false)] {
            let r0 = rects[t];
            let (p0, p1) = (rects[a], rects[b]);
            for py in r0.y.max(0)..(r0.y + r0.h).min(g) {
                for px in r0.x.max(0)..(r0.x + r0.w).min(g) {
                    // A point at relative position (u, v) of the box keeps
                    // that relative position in the next frame.
                    let u = (px as f32 + 0.5 - r0.x as f32) / r0.w as f32;
                    let v = (py as f32 + 0.5 - r0.y as f32) / r0.h as f32;
                    let (vx, vy) = if is_object && scene.motion == Motion::Grow {
                        (
                            (p1.x - p0.x) as f32 + u * (p1.w - p0.w) as f32,
                            (p1.y - p0.y) as f32 + v * (p1.h - p0.h) as f32,
                        )
                    } else {
                        ((p1.x - p0.x) as f32, (p1.y - p0.y) as f32)
                    };
                    let idx = py as usize * grid + px as usize;
                    frame[idx] = vx;
                    frame[plane + idx] = vy;
                }
            }
        }
    }
    Tensor::new(&[t_count, 2, grid, grid], data).expect("flow shape")
}

/// Verb-specific frequency sweep per frame (rows: frequency, columns: time).
fn render_spectro(scene: &Scene, config: &DatasetConfig, rng: &mut Rng) -> Tensor {
    let f = config.spectro_bins;
    let t_count = config.frames;
    let fmax = (f - 1) as f32;
    let mut data = vec![0.0f32; t_count * f * f];
    for t in 0..t_count {
        let patch = &mut data[t * f * f..(t + 1) * f * f];
        for col in 0..f {
            let tau = col as f32 / fmax;
            let centre = scene.spectro_offset
                + match scene.verb {
                    0 => 0.2 * fmax + 0.6 * fmax * tau,
                    1 => 0.8 * fmax - 0.6 * fmax * tau,
                    2 => 0.75 * fmax,
                    _ => 0.25 * fmax,
                };
            for row in 0..f {
                let d = row as f32 - centre;
                let tone = (-d * d / 2.0).exp();
                let noise: f32 = gaussian(rng) * config.spectro_noise;
                patch[row * f + col] = (tone + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[t_count, 1, f, f], data).expect("spectro shape")
}

fn gaussian(rng: &mut Rng) -> f32 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;

    fn cfg() -> DatasetConfig {
        DatasetConfig::iid()
    }

    #[test]
    fn same_seed_same_example() {
        let c = cfg();
        let a = generate_example(99, &c, Side::Train, 3);
        let b = generate_example(99, &c, Side::Train, 3);
        assert_eq!(a, b);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.appearance), bits(&b.appearance));
    }

    #[test]
    fn flow_matches_motion_program() {
        let c = cfg();
        let plane = c.width * c.width;
        let mut seen_fast_right = false;
        for i in 0..200u64 {
            let seed = derive_seed(5, i);
            let ex = generate_example(seed, &c, Side::Train, i);
            let mut rng = rng_from(seed);
            let (scene, _) = sample_scene(&mut rng, &c, Side::Train);
            if scene.motion == Motion::Grow {
                continue;
            }
            let (dx, dy) = match scene.motion {
                Motion::MoveLeft => (-scene.speed, 0),
                Motion::MoveRight => (scene.speed, 0),
                _ => (0, -scene.speed),
            };
            seen_fast_right |= scene.motion == Motion::MoveRight && scene.speed == 2;
            for t in 0..c.frames {
                let b = ex.layout[t][1];
                let fl = &ex.flow.data()[t * 2 * plane..(t + 1) * 2 * plane];
                for py in 0..c.height {
                    for px in 0..c.width {
                        if b.covers(px, py) {
                            assert_eq!(fl[py * c.width + px], dx as f32);
                            assert_eq!(fl[plane + py * c.width + px], dy as f32);
                        }
                    }
                }
            }
        }
        assert!(seen_fast_right);
    }

    #[test]
    fn flow_is_zero_outside_boxes() {
        let c = cfg();
        let ex = generate_example(derive_seed(1, 1), &c, Side::Train, 1);
        let plane = c.width * c.width;
        for t in 0..c.frames {
            for py in 0..c.height {
                for px in 0..c.width {
                    if ex.layout[t].iter().any(|b| b.covers(px, py)) {
                        continue;
                    }
                    let fl = &ex.flow.data()[t * 2 * plane..];
                    assert_eq!(fl[py * c.width + px], 0.0);
                    assert_eq!(fl[plane + py * c.width + px], 0.0);
                }
            }
        }
    }

    #[test]
    fn boxes_within_grid_and_labels_decompose() {
        let c = cfg();
        for i in 0..100u64 {
            let ex = generate_example(derive_seed(2, i), &c, Side::Train, i);
            assert_eq!(ex.action / c.num_verbs, ex.noun);
            assert_eq!(ex.action % c.num_verbs, ex.verb);
            for frame in &ex.layout {
                for b in frame {
                    assert!(b.x >= 0.0 && b.y >= 0.0);
                    assert!(b.x + b.w <= c.width as f32 && b.y + b.h <= c.height as f32);
                }
            }
            assert!(ex.appearance.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(ex.spectro.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn compositional_sides_use_disjoint_nouns() {
        let c = DatasetConfig::compositional();
        for i in 0..200u64 {
            let tr = generate_example(derive_seed(3, i), &c, Side::Train, i);
            let va = generate_example(derive_seed(4, i), &c, Side::Val, i);
            assert!(!c.holdout_nouns.contains(&tr.noun));
            assert!(c.holdout_nouns.contains(&va.noun));
        }
    }
}
