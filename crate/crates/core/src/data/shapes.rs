//! ShapesTex: a synthetic corpus with an explicit layout/texture hierarchy.
//!
//! Each image is a smooth background with one to three geometric shapes.
//! The class fixes the shape kind (coarse layout) and the texture family
//! that fills the shapes (fine detail), so a two-level tokenizer has a
//! natural split between what the short and the long sequence carry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    fn contains(self, dy: f32, dx: f32, r: f32) -> bool {
        match self {
            ShapeKind::Disc => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
            // Upward triangle with its base at dy = r * 0.8.
            ShapeKind::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.58,
            ShapeKind::Cross => {
                let arm = r * 0.38;
                (dy.abs() <= arm && dx.abs() <= r) || (dx.abs() <= arm && dy.abs() <= r)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureFamily {
    Stripes,
    Checker,
    Speckle,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 3] = [TextureFamily::Stripes, TextureFamily::Checker, TextureFamily::Speckle];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesTexSpec {
    pub image_size: usize,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for ShapesTexSpec {
    fn default() -> Self {
        Self { image_size: 64, seed: 0, train_count: 2048, val_count: 256 }
    }
}

pub const NUM_CLASSES: usize = ShapeKind::ALL.len() * TextureFamily::ALL.len();

pub fn class_of(kind: ShapeKind, texture: TextureFamily) -> usize {
    let k = ShapeKind::ALL.iter().position(|&s| s == kind).unwrap();
    let t = TextureFamily::ALL.iter().position(|&s| s == texture).unwrap();
    k * TextureFamily::ALL.len() + t
}

pub fn class_parts(class_id: usize) -> (ShapeKind, TextureFamily) {
    (ShapeKind::ALL[class_id / TextureFamily::ALL.len()], TextureFamily::ALL[class_id % TextureFamily::ALL.len()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub center: (f32, f32),
    pub radius: f32,
    pub colors: [[f32; 3]; 2],
    pub orientation: u8,
}

/// Everything needed to regenerate (and label) one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GenRecord {
    pub id: u64,
    pub kind: ShapeKind,
    pub texture: TextureFamily,
    pub shapes: Vec<ShapeRecord>,
}

impl GenRecord {
    pub fn class_id(&self) -> usize {
        class_of(self.kind, self.texture)
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub class_id: usize,
    pub record: GenRecord,
}

impl ShapesTexSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!("image size {} must be a positive multiple of 16", self.image_size)));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
        }
    }

    /// Global generation id. Train ids come first, so splits never overlap.
    pub fn sample_id(&self, split: Split, index: usize) -> u64 {
        match split {
            Split::Train => index as u64,
            Split::Val => (self.train_count + index) as u64,
        }
    }

    pub fn sample(&self, split: Split, index: usize) -> Sample {
        generate(self.image_size, self.seed, self.sample_id(split, index))
    }

    pub fn split(&self, split: Split) -> Vec<Sample> {
        (0..self.count(split)).map(|i| self.sample(split, i)).collect()
    }
}

fn mix(seed: u64, id: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Generate sample `id`. A pure function of `(size, seed, id)`.
pub fn generate(size: usize, seed: u64, id: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id));
    let class_id = (id % NUM_CLASSES as u64) as usize;
    let (kind, texture) = class_parts(class_id);
    let s = size as f32;

    let bg_a = random_color(&mut rng, 0.15, 0.85);
    let bg_b: [f32; 3] = std::array::from_fn(|c| (bg_a[c] + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0));
    let vertical = rng.gen_bool(0.5);
    let mut image = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let t = if vertical { y } else { x } as f32 / (s - 1.0);
            image.set_pixel(y, x, std::array::from_fn(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t));
        }
    }

    let n_shapes = rng.gen_range(1..=3);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let radius = rng.gen_range(0.16 * s..0.3 * s);
        let center = (rng.gen_range(radius * 0.6..s - radius * 0.6), rng.gen_range(radius * 0.6..s - radius * 0.6));
        let base = random_color(&mut rng, 0.1, 0.9);
        let contrast = rng.gen_range(0.2..0.35);
        let other = base.map(|v| if v > 0.5 { v - contrast } else { v + contrast });
        let orientation = rng.gen_range(0..2u8);
        shapes.push(ShapeRecord { center, radius, colors: [base, other], orientation });
    }

    for shape in &shapes {
        // Speckle cells are drawn per shape so overlapping shapes differ.
        let speckle_seed: u64 = rng.gen();
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f32 + 0.5 - shape.center.0, x as f32 + 0.5 - shape.center.1);
                if !kind.contains(dy, dx, shape.radius) {
                    continue;
                }
                let alt = match texture {
                    TextureFamily::Stripes => {
                        let coord = if shape.orientation == 0 { y } else { x };
                        (coord / 2) % 2 == 1
                    }
                    TextureFamily::Checker => ((y / 4) + (x / 4)) % 2 == 1,
                    TextureFamily::Speckle => mix(speckle_seed, ((y / 2) * size + x / 2) as u64) % 10 < 3,
                };
                image.set_pixel(y, x, shape.colors[alt as usize]);
            }
        }
    }

    Sample { image, class_id, record: GenRecord { id, kind, texture, shapes } }
}
