//! Procedural subject-on-background corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const MASK_SIZE: usize = 16;
pub const REFERENCE_SIZE: usize = 32;
/// Subject colors are jittered per channel by up to this much.
pub const COLOR_JITTER: f32 = 0.08;
const BACKGROUND_NOISE: f32 = 0.06;
const MIN_AREA: f64 = 0.10;
const MAX_AREA: f64 = 0.50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Blue,
    Yellow,
    Orange,
    Purple,
    White,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Blue, Color::Yellow, Color::Orange, Color::Purple, Color::White];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.12, 0.10],
            Color::Blue => [0.12, 0.22, 0.90],
            Color::Yellow => [0.95, 0.88, 0.12],
            Color::Orange => [0.98, 0.55, 0.05],
            Color::Purple => [0.55, 0.15, 0.70],
            Color::White => [0.95, 0.95, 0.95],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Whether `(y, x)` (pixel-center coordinates) is inside the shape
    /// centered at `(cy, cx)` with half-extent `r`.
    fn contains(self, y: f64, x: f64, cy: f64, cx: f64, r: f64) -> bool {
        let (dy, dx) = (y - cy, x - cx);
        match self {
            Shape::Circle => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= r && dx.abs() <= r,
            // apex up, base at cy + r, full width 2r at the base
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    /// Half-extent giving `area` pixels.
    fn half_extent(self, area: f64) -> f64 {
        match self {
            Shape::Circle => (area / std::f64::consts::PI).sqrt(),
            Shape::Square => area.sqrt() / 2.0,
            Shape::Triangle => (area / 2.0).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Grass,
    Sand,
    Stone,
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Grass, Background::Sand, Background::Stone];

    pub fn phrase(self) -> &'static str {
        match self {
            Background::Grass => "on top of green grass",
            Background::Sand => "on the beach",
            Background::Stone => "on a cobblestone street",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Background::Grass => [0.22, 0.52, 0.18],
            Background::Sand => [0.82, 0.72, 0.50],
            Background::Stone => [0.45, 0.45, 0.48],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[3, 64, 64]` in [0, 1].
    pub image: Tensor,
    pub caption: String,
    /// `[16, 16]` binary: 4x4 blocks at least half covered by the subject.
    pub mask: Tensor,
    /// `[3, 32, 32]` crop around the subject.
    pub reference: Tensor,
    pub color: Color,
    pub shape: Shape,
    pub background: Background,
    /// Fraction of pixels covered by the subject.
    pub area: f64,
}

pub fn caption(color: Color, shape: Shape, background: Background) -> String {
    format!("{} {} {}", color.name(), shape.name(), background.phrase())
}

/// Inverse of [`caption`].
pub fn parse_caption(text: &str) -> Option<(Color, Shape, Background)> {
    let mut words = text.splitn(3, ' ');
    let color = Color::parse(words.next()?)?;
    let shape = Shape::parse(words.next()?)?;
    let rest = words.next()?;
    let bg = Background::ALL.into_iter().find(|b| b.phrase() == rest)?;
    Some((color, shape, bg))
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn make_dataset(seed: u64, n: usize) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Training("dataset size must be at least 1".into()));
    }
    (0..n).map(|i| make_sample(seed, i as u64)).collect()
}

pub fn make_sample(seed: u64, index: u64) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
    let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
    let background = Background::ALL[rng.gen_range(0..Background::ALL.len())];
    let n = IMAGE_SIZE as f64;
    let (cover, area) = loop {
        let target = rng.gen_range(0.15..0.40) * n * n;
        let r = shape.half_extent(target);
        let cy = rng.gen_range(r..n - r);
        let cx = rng.gen_range(r..n - r);
        let cover: Vec<bool> = (0..IMAGE_SIZE * IMAGE_SIZE)
            .map(|i| shape.contains((i / IMAGE_SIZE) as f64 + 0.5, (i % IMAGE_SIZE) as f64 + 0.5, cy, cx, r))
            .collect();
        let area = cover.iter().filter(|&&c| c).count() as f64 / (n * n);
        if (MIN_AREA..=MAX_AREA).contains(&area) {
            break (cover, area);
        }
    };
    let base = color.rgb();
    let tint: [f32; 3] = std::array::from_fn(|c| {
        (base[c] + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0)
    });
    let bg = background.rgb();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut img = vec![0f32; 3 * plane];
    for (i, &inside) in cover.iter().enumerate() {
        for c in 0..3 {
            let v = if inside {
                tint[c]
            } else {
                bg[c] + rng.gen_range(-BACKGROUND_NOISE..=BACKGROUND_NOISE)
            };
            img[c * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    let image = Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], img)?;
    Ok(SyntheticSample {
        mask: block_mask(&cover)?,
        reference: crop_reference(&image, &cover)?,
        image,
        caption: caption(color, shape, background),
        color,
        shape,
        background,
        area,
    })
}

fn block_mask(cover: &[bool]) -> Result<Tensor> {
    let b = IMAGE_SIZE / MASK_SIZE;
    Tensor::from_fn(&[MASK_SIZE, MASK_SIZE], |i| {
        let (my, mx) = (i / MASK_SIZE, i % MASK_SIZE);
        let hits = (0..b * b)
            .filter(|k| cover[(my * b + k / b) * IMAGE_SIZE + mx * b + k % b])
            .count();
        if 2 * hits >= b * b {
            1.0
        } else {
            0.0
        }
    })
}

/// Square crop of the subject's bounding box plus a 25% margin, resized to 32x32.
fn crop_reference(image: &Tensor, cover: &[bool]) -> Result<Tensor> {
    let (mut y0, mut y1, mut x0, mut x1) = (IMAGE_SIZE, 0, IMAGE_SIZE, 0);
    for (i, _) in cover.iter().enumerate().filter(|(_, &c)| c) {
        let (y, x) = (i / IMAGE_SIZE, i % IMAGE_SIZE);
        y0 = y0.min(y);
        y1 = y1.max(y + 1);
        x0 = x0.min(x);
        x1 = x1.max(x + 1);
    }
    let side = ((y1 - y0).max(x1 - x0) as f64 * 1.5).ceil() as usize;
    let side = side.min(IMAGE_SIZE);
    let start = |lo: usize, hi: usize| -> usize {
        let center = (lo + hi) / 2;
        center.saturating_sub(side / 2).min(IMAGE_SIZE - side)
    };
    let (sy, sx) = (start(y0, y1), start(x0, x1));
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let crop = Tensor::from_fn(&[3, side, side], |i| {
        let c = i / (side * side);
        let (y, x) = ((i / side) % side, i % side);
        image.data()[c * plane + (sy + y) * IMAGE_SIZE + sx + x]
    })?;
    crop.resize_nearest((REFERENCE_SIZE, REFERENCE_SIZE))
}

/// Subject drawn centered on a flat neutral background.
pub fn render_reference(color: Color, shape: Shape, size: usize) -> Result<Tensor> {
    let n = size as f64;
    let r = n / 3.0;
    let rgb = color.rgb();
    let plane = size * size;
    Tensor::from_fn(&[3, size, size], |i| {
        let c = i / plane;
        let p = i % plane;
        if shape.contains((p / size) as f64 + 0.5, (p % size) as f64 + 0.5, n / 2.0, n / 2.0, r) {
            rgb[c]
        } else {
            0.5
        }
    })
}

/// Parse `synthetic:<color>:<shape>` into a rendered 32x32 reference.
pub fn parse_synthetic_reference(spec: &str) -> Result<Tensor> {
    let bad = || Error::Config(format!("reference `{spec}` (expected synthetic:<color>:<shape>)"));
    let rest = spec.strip_prefix("synthetic:").ok_or_else(bad)?;
    let (c, s) = rest.split_once(':').ok_or_else(bad)?;
    let color = Color::parse(c).ok_or_else(bad)?;
    let shape = Shape::parse(s).ok_or_else(bad)?;
    render_reference(color, shape, REFERENCE_SIZE)
}
