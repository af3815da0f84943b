//! Deterministic synthetic motion clips with captions.
//!
//! Each clip shows one bright white object drifting across the frame along a
//! class direction. The object is visible only during a short window of
//! frames. Every frame also holds dim colored distractors at fresh random
//! positions, plus pixel noise. Objects are smeared symmetrically along their
//! axis of motion, so a single frame reveals the axis and speed but never the
//! direction. Leftward and upward
//! clips are exact time reversals of rightward and downward ones.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Ring,
    Cross,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Ring, Shape::Cross, Shape::Diamond];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
        }
    }

    /// Coverage in `[0, 1]` of cell `(y, x)` of a `size`-pixel glyph.
    fn coverage(self, y: usize, x: usize, size: usize) -> f32 {
        let c = (size as f32 - 1.0) / 2.0;
        let (dy, dx) = ((y as f32 - c).abs(), (x as f32 - c).abs());
        let r = c + 0.5;
        let inside = match self {
            Shape::Square => dy < r - 0.6 && dx < r - 0.6,
            Shape::Ring => dy.max(dx) < r && dy.max(dx) >= r - 2.0,
            Shape::Cross => dy.min(dx) < 1.0,
            Shape::Diamond => dy + dx < r,
        };
        if inside {
            1.0
        } else {
            0.0
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Still];

    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Still => "still",
        }
    }

    /// Rightward or downward motion that this one reverses, if any.
    fn forward(self) -> (Motion, bool) {
        match self {
            Motion::Left => (Motion::Right, true),
            Motion::Up => (Motion::Down, true),
            m => (m, false),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassSpec {
    pub shape: Shape,
    pub motion: Motion,
}

impl ClassSpec {
    /// Label text used for prompts, e.g. `square moving left`.
    pub fn name(&self) -> String {
        match self.motion {
            Motion::Still => format!("{} standing still", self.shape),
            m => format!("{} moving {}", self.shape, m),
        }
    }
}

pub const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [1.0, 0.2, 0.15]),
    ("green", [0.2, 1.0, 0.25]),
    ("blue", [0.25, 0.35, 1.0]),
    ("yellow", [1.0, 0.95, 0.2]),
];

pub const SIZES: [(&str, usize); 2] = [("small", 6), ("large", 10)];

pub const SPEEDS: [&str; 2] = ["slowly", "quickly"];

/// Every word a generated caption, prompt or question can use.
pub const VOCABULARY: [&str; 44] = [
    "a", "an", "the", "of", "video", "clip", "showing", "shows", "this", "bright", "shape", "object",
    "moves", "moving", "standing", "still", "left", "right", "up", "down", "square", "ring", "cross",
    "diamond", "red", "green", "blue", "yellow", "small", "large", "slowly", "quickly", "which", "way",
    "does", "what", "color", "is", "it", "size", "move", "across", "frame", "and",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    pub videos_per_class: usize,
    /// Frames per clip before sampling.
    pub native_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Consecutive frames in which the object is drawn.
    pub visible_frames: usize,
    /// Dim colored objects redrawn at random positions in every frame.
    pub distractors: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let mut classes = Vec::new();
        for shape in [Shape::Square, Shape::Ring] {
            for motion in [Motion::Left, Motion::Right, Motion::Up, Motion::Down] {
                classes.push(ClassSpec { shape, motion });
            }
        }
        SynthSpec {
            classes,
            videos_per_class: 64,
            native_frames: 16,
            height: 36,
            width: 36,
            channels: 3,
            visible_frames: 2,
            distractors: 3,
            noise: 0.04,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.videos_per_class == 0 {
            return Err(Error::invalid("corpus needs at least one class and one video per class"));
        }
        if self.channels != 3 {
            return Err(Error::invalid("synthetic clips are RGB"));
        }
        let largest = SIZES.iter().map(|s| s.1).max().unwrap_or(0);
        let travel = largest + 2 * MAX_SMEAR + 4;
        if self.height < travel || self.width < travel {
            return Err(Error::invalid(format!(
                "frames of {}x{} are too small for motion; need at least {travel}x{travel}",
                self.height, self.width
            )));
        }
        if self.native_frames < 2 || self.visible_frames == 0 || self.visible_frames > self.native_frames {
            return Err(Error::invalid("need 2+ native frames and a visibility window within them"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Shape labels then motion labels, each listed once in class order.
    pub fn label_names(&self) -> Vec<String> {
        let mut shapes: Vec<Shape> = self.classes.iter().map(|c| c.shape).collect();
        shapes.sort();
        shapes.dedup();
        let mut motions: Vec<Motion> = self.classes.iter().map(|c| c.motion).collect();
        motions.sort();
        motions.dedup();
        shapes
            .iter()
            .map(|s| s.word().to_string())
            .chain(motions.iter().map(|m| format!("shape moving {}", m.word())))
            .map(|s| s.replace("moving still", "standing still"))
            .collect()
    }

    fn multi_labels(&self, class: ClassSpec) -> Vec<usize> {
        let mut shapes: Vec<Shape> = self.classes.iter().map(|c| c.shape).collect();
        shapes.sort();
        shapes.dedup();
        let mut motions: Vec<Motion> = self.classes.iter().map(|c| c.motion).collect();
        motions.sort();
        motions.dedup();
        let s = shapes.iter().position(|&x| x == class.shape).expect("shape listed");
        let m = motions.iter().position(|&x| x == class.motion).expect("motion listed");
        vec![s, shapes.len() + m]
    }
}

const MAX_SMEAR: usize = 4;

/// Visible attributes of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Attributes {
    pub size: usize,
    pub speed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    /// `[F, H, W, C]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub class_id: usize,
    pub multi_labels: Vec<usize>,
    pub caption: String,
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub label_names: Vec<String>,
    pub clips: Vec<Clip>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Generates `videos_per_class` clips per class, interleaved by class.
pub fn synth_generate(spec: &SynthSpec) -> Result<Corpus> {
    synth_generate_range(spec, 0, spec.videos_per_class * spec.classes.len())
}

/// Clips with global indices `first..first + count`; clip `i` has class
/// `i % classes` and its own generator seeded from `seed ^ i`.
pub fn synth_generate_range(spec: &SynthSpec, first: usize, count: usize) -> Result<Corpus> {
    spec.validate()?;
    let clips = (first..first + count)
        .map(|i| render_clip(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        class_names: spec.classes.iter().map(ClassSpec::name).collect(),
        label_names: spec.label_names(),
        clips,
    })
}

/// Training and held-out corpora that share no clip indices.
pub fn train_eval_split(spec: &SynthSpec, eval_per_class: usize) -> Result<(Corpus, Corpus)> {
    let k = spec.classes.len();
    let train = synth_generate(spec)?;
    let eval = synth_generate_range(spec, spec.videos_per_class * k, eval_per_class * k)?;
    Ok((train, eval))
}

struct Canvas<'a> {
    data: &'a mut [f32],
    h: usize,
    w: usize,
}

impl Canvas<'_> {
    /// Adds a glyph whose top-left corner sits at `(y, x)`, smeared `smear`
    /// pixels to each side along the given axis. The smeared coverage is
    /// rescaled so its peak equals `level`.
    #[allow(clippy::too_many_arguments)]
    fn stamp(&mut self, shape: Shape, size: usize, y: i32, x: i32, horizontal: bool, smear: usize, rgb: [f32; 3], level: f32) {
        let mut cover = vec![0.0f32; self.h * self.w];
        for k in 0..=2 * smear {
            let off = k as i32 - smear as i32;
            let (oy, ox) = if horizontal { (y, x + off) } else { (y + off, x) };
            for gy in 0..size {
                for gx in 0..size {
                    let a = shape.coverage(gy, gx, size);
                    let (py, px) = (oy + gy as i32, ox + gx as i32);
                    if a == 0.0 || py < 0 || px < 0 || py >= self.h as i32 || px >= self.w as i32 {
                        continue;
                    }
                    cover[py as usize * self.w + px as usize] += a;
                }
            }
        }
        let peak = cover.iter().cloned().fold(0.0f32, f32::max);
        if peak == 0.0 {
            return;
        }
        for (i, &a) in cover.iter().enumerate() {
            if a > 0.0 {
                for (c, v) in rgb.iter().enumerate() {
                    self.data[i * 3 + c] += a / peak * level * v;
                }
            }
        }
    }
}

fn render_clip(spec: &SynthSpec, index: usize) -> Result<Clip> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let class_id = index % spec.classes.len();
    let class = spec.classes[class_id];
    let (h, w, f) = (spec.height, spec.width, spec.native_frames);

    let size_id = rng.random_range(0..SIZES.len());
    let speed = rng.random_range(0..SPEEDS.len());
    let size = SIZES[size_id].1;
    let smear = if class.motion == Motion::Still { 0 } else { 2 + 2 * speed };
    let (motion, reverse) = class.motion.forward();
    let horizontal = matches!(motion, Motion::Right | Motion::Still);

    // Travel along the motion axis; the cross axis stays fixed.
    let span = if horizontal { w } else { h } as i32 - size as i32 - 2 * MAX_SMEAR as i32;
    let travel = if motion == Motion::Still {
        0
    } else if speed == 0 {
        span / 2
    } else {
        span
    };
    let start = MAX_SMEAR as i32 + rng.random_range(0..=span - travel);
    let cross_span = if horizontal { h } else { w } as i32 - size as i32;
    let cross = rng.random_range(0..=cross_span);
    let window = rng.random_range(0..=f - spec.visible_frames);
    let level = rng.random_range(0.85f32..1.0);

    struct Distractor {
        size: usize,
        smear: usize,
        rgb: [f32; 3],
        level: f32,
    }
    let distractors: Vec<Distractor> = (0..spec.distractors)
        .map(|_| {
            let size = SIZES[rng.random_range(0..SIZES.len())].1;
            Distractor {
                size,
                smear: 2 + 2 * rng.random_range(0..2),
                rgb: COLORS[rng.random_range(0..COLORS.len())].1,
                level: rng.random_range(0.2f32..0.35),
            }
        })
        .collect();
    let background = rng.random_range(0.0f32..0.08);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;

    let frame_len = h * w * 3;
    let mut frames = vec![0.0f32; f * frame_len];
    for t in 0..f {
        let mut canvas = Canvas {
            data: &mut frames[t * frame_len..(t + 1) * frame_len],
            h,
            w,
        };
        for d in &distractors {
            let shape = Shape::ALL[rng.random_range(0..2)];
            let y = rng.random_range(0..=(h - d.size) as i32);
            let x = rng.random_range(0..=(w - d.size) as i32);
            let horizontal = rng.random_bool(0.5);
            canvas.stamp(shape, d.size, y, x, horizontal, d.smear, d.rgb, d.level);
        }
        if (window..window + spec.visible_frames).contains(&t) {
            let along = start + (travel * t as i32) / (f as i32 - 1);
            let (y, x) = if horizontal { (cross, along) } else { (along, cross) };
            canvas.stamp(class.shape, size, y, x, horizontal, smear, [1.0; 3], level);
        }
    }
    for px in frames.iter_mut() {
        let v = *px + background + noise.sample(&mut rng) as f32;
        *px = v.clamp(0.0, 1.0);
    }
    if reverse {
        let mut reversed = Vec::with_capacity(frames.len());
        for t in (0..f).rev() {
            reversed.extend_from_slice(&frames[t * frame_len..(t + 1) * frame_len]);
        }
        frames = reversed;
    }

    let attributes = Attributes {
        size: size_id,
        speed,
    };
    let caption = caption(class, &attributes);
    Ok(Clip {
        id: format!("v{index:05}"),
        frames: Tensor::new(vec![f, h, w, 3], frames)?,
        class_id,
        multi_labels: spec.multi_labels(class),
        caption,
        attributes,
    })
}

/// `a {size} {shape} moving {direction} {speed}`; still objects drop the speed.
fn caption(class: ClassSpec, a: &Attributes) -> String {
    let size = SIZES[a.size].0;
    let shape = class.shape.word();
    match class.motion {
        Motion::Still => format!("a {size} {shape} standing still"),
        m => format!("a {size} {shape} moving {m} {}", SPEEDS[a.speed]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenizer::Tokenizer;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            videos_per_class: 2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let a = synth_generate(&small_spec()).unwrap();
        let b = synth_generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn reversed_classes_share_frame_multisets() {
        // Clip index i and the same draws with the reverse class: re-render with
        // the class swapped and compare reversed frame order.
        let spec = small_spec();
        let mut swapped = spec.clone();
        for c in swapped.classes.iter_mut() {
            c.motion = match c.motion {
                Motion::Left => Motion::Right,
                Motion::Right => Motion::Left,
                Motion::Up => Motion::Down,
                Motion::Down => Motion::Up,
                m => m,
            };
        }
        for i in 0..8 {
            let a = render_clip(&spec, i).unwrap();
            let b = render_clip(&swapped, i).unwrap();
            let f = spec.native_frames;
            let frame = a.frames.numel() / f;
            for t in 0..f {
                let fa = &a.frames.data()[t * frame..(t + 1) * frame];
                let fb = &b.frames.data()[(f - 1 - t) * frame..(f - t) * frame];
                assert_eq!(fa, fb);
            }
        }
    }

    #[test]
    fn captions_tokenize_and_mention_motion() {
        let tok = Tokenizer::new(VOCABULARY);
        let corpus = synth_generate(&small_spec()).unwrap();
        for clip in &corpus.clips {
            tok.tokenize(&clip.caption).unwrap();
            let motion = small_spec().classes[clip.class_id].motion.word();
            assert!(clip.caption.split(' ').any(|w| w == motion), "{}", clip.caption);
        }
        for name in corpus.class_names.iter().chain(&corpus.label_names) {
            tok.tokenize(name).unwrap();
        }
    }

    #[test]
    fn object_is_brighter_than_distractors() {
        let corpus = synth_generate(&small_spec()).unwrap();
        let clip = &corpus.clips[0];
        assert!(clip.frames.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let f = clip.frames.shape()[0];
        let frame = clip.frames.numel() / f;
        let peaks: Vec<f32> = (0..f)
            .map(|t| clip.frames.data()[t * frame..(t + 1) * frame].iter().cloned().fold(0.0, f32::max))
            .collect();
        let max = peaks.iter().cloned().fold(0.0, f32::max);
        assert!(max > 0.5);
    }

    #[test]
    fn tiny_geometry_is_rejected() {
        let spec = SynthSpec {
            height: 8,
            width: 8,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&spec).is_err());
    }
}
