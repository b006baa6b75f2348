//! Synthetic segmentation data: coloured shapes on a flat background.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyDatasetSpec {
    pub image_size: usize,
    /// Background plus shape classes.
    pub num_classes: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 4,
            train_count: 512,
            val_count: 128,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size must be at least 8, got {}", self.image_size)));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must lie in [2, 255], got {}", self.num_classes)));
        }
        if self.train_count == 0 || self.val_count == 0 {
            return Err(Error::Config("train_count and val_count must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Diamond,
    Circle,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        match (class.max(1) - 1) % 3 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Diamond,
            _ => ShapeKind::Circle,
        }
    }
}

/// A shape inscribed in an axis-aligned box `[top, top+height) × [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub kind: ShapeKind,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        if y < self.top || x < self.left || y >= self.top + self.height || x >= self.left + self.width {
            return false;
        }
        let ry = self.height as f64 / 2.0;
        let rx = self.width as f64 / 2.0;
        let dy = (y as f64 + 0.5 - self.top as f64 - ry) / ry;
        let dx = (x as f64 + 0.5 - self.left as f64 - rx) / rx;
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= 1.0,
            ShapeKind::Circle => dy * dy + dx * dx <= 1.0,
        }
    }

    fn overlaps(&self, other: &Shape) -> bool {
        // one pixel of clearance between boxes
        self.top < other.top + other.height + 1
            && other.top < self.top + self.height + 1
            && self.left < other.left + other.width + 1
            && other.left < self.left + self.width + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: FeatureMap,
    pub label: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ToyDatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// RGB base colour of a class; background is dark grey, shape classes
/// are evenly spaced hues.
pub fn class_color(class: u8, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.15, 0.15, 0.15];
    }
    let hue = (class as f64 - 1.0) / (num_classes as f64 - 1.0);
    hsv_to_rgb(hue, 0.8, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let sector = (h * 6.0).rem_euclid(6.0);
    let i = sector.floor();
    let f = sector - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Paints `shapes` over the background and adds `N(0, noise_std²)` noise.
pub fn render(size: usize, shapes: &[Shape], num_classes: usize, noise_std: f64, rng: &mut Rng) -> Sample {
    let mut label = LabelMap::filled(size, size, 0);
    for y in 0..size {
        for x in 0..size {
            if let Some(s) = shapes.iter().find(|s| s.contains(y, x)) {
                label.set(y, x, s.class);
            }
        }
    }
    let image = FeatureMap::from_fn(size, size, 3, |y, x, c| {
        let base = class_color(label.get(y, x), num_classes)[c];
        if noise_std > 0.0 {
            base + noise_std * rng.normal()
        } else {
            base
        }
    });
    Sample { image, label }
}

const PLACEMENT_RETRIES: usize = 100;

fn random_shapes(spec: &ToyDatasetSpec, rng: &mut Rng) -> Result<Vec<Shape>> {
    let size = spec.image_size;
    let shape_classes = spec.num_classes - 1;
    let count = 1 + rng.below(3);
    let classes: Vec<u8> = if shape_classes >= count {
        rng.sample_indices(shape_classes, count)
            .into_iter()
            .map(|c| c as u8 + 1)
            .collect()
    } else {
        (0..count).map(|_| rng.below(shape_classes) as u8 + 1).collect()
    };
    let (min_side, max_side) = ((size / 5).max(3), size / 2);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for class in classes {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let height = min_side + rng.below(max_side - min_side + 1);
            let width = min_side + rng.below(max_side - min_side + 1);
            let candidate = Shape {
                class,
                kind: ShapeKind::for_class(class),
                top: rng.below(size - height + 1),
                left: rng.below(size - width + 1),
                height,
                width,
            };
            if shapes.iter().all(|s| !s.overlaps(&candidate)) {
                shapes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place a class-{class} shape in a {size}x{size} image after {PLACEMENT_RETRIES} tries"
            )));
        }
    }
    Ok(shapes)
}

pub fn gen_toy_dataset(spec: &ToyDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut make = |n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let shapes = random_shapes(spec, &mut rng)?;
                Ok(render(spec.image_size, &shapes, spec.num_classes, spec.noise_std, &mut rng))
            })
            .collect()
    };
    let train = make(spec.train_count)?;
    let val = make(spec.val_count)?;
    let hist = class_histogram(&train, spec.num_classes);
    if let Some(missing) = hist.iter().position(|&c| c == 0) {
        return Err(Error::Generation(format!("class {missing} absent from the training split")));
    }
    Ok(Dataset {
        spec: *spec,
        train,
        val,
    })
}

/// Pixel count per class over a split.
pub fn class_histogram(samples: &[Sample], num_classes: usize) -> Vec<u64> {
    let mut hist = vec![0u64; num_classes];
    for s in samples {
        for &l in s.label.data() {
            if (l as usize) < num_classes {
                hist[l as usize] += 1;
            }
        }
    }
    hist
}
