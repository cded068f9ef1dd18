//! Procedurally generated multi-label images.
//!
//! Every class owns a distinct geometric shape. An image holds between
//! `objects_min` and `objects_max` shapes of distinct classes, placed at
//! random non-overlapping positions with random size and intensity on a
//! noisy background, so the class evidence sits in a few local regions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Saltire,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disc,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::Saltire,
        ShapeKind::Frame,
    ];

    /// Coverage test in the unit box, `(u, v)` measured from the top-left.
    pub fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            ShapeKind::Disc => du * du + dv * dv <= 0.25,
            ShapeKind::Square => du.abs() <= 0.4 && dv.abs() <= 0.4,
            ShapeKind::Triangle => (0.05..=0.95).contains(&v) && du.abs() <= (v - 0.05) / 0.9 * 0.5,
            ShapeKind::Cross => du.abs() <= 0.14 || dv.abs() <= 0.14,
            ShapeKind::Ring => {
                let r2 = du * du + dv * dv;
                (0.09..=0.25).contains(&r2)
            }
            ShapeKind::Diamond => du.abs() + dv.abs() <= 0.5,
            ShapeKind::Saltire => (u - v).abs() <= 0.17 || (u + v - 1.0).abs() <= 0.17,
            ShapeKind::Frame => {
                let m = du.abs().max(dv.abs());
                (0.28..=0.48).contains(&m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Side length range of an object's bounding square, in pixels.
    pub object_size_min: usize,
    pub object_size_max: usize,
    /// Uniform background noise amplitude.
    pub noise: f64,
    /// Object intensity range.
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            channels: 1,
            classes: 4,
            objects_min: 1,
            objects_max: 3,
            object_size_min: 12,
            object_size_max: 22,
            noise: 0.3,
            intensity_min: 0.4,
            intensity_max: 1.0,
            train_count: 500,
            test_count: 200,
            seed: 0,
        }
    }
}

/// One rendered object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub class: usize,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub intensity: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.classes < 2 || self.classes > ShapeKind::ALL.len() {
            return bad(format!("classes must be in 2..={}", ShapeKind::ALL.len()));
        }
        if self.image_size < 32 {
            return bad("image size must be at least 32".into());
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad("need 1 <= objects_min <= objects_max".into());
        }
        if self.objects_max > self.classes {
            return bad("objects per image exceed the number of distinct classes".into());
        }
        if self.object_size_min < 4 || self.object_size_min > self.object_size_max {
            return bad("need 4 <= object_size_min <= object_size_max".into());
        }
        if self.object_size_max > self.image_size {
            return bad("objects larger than the image".into());
        }
        let footprint = (self.object_size_min + 1).pow(2) * self.objects_max;
        if 2 * footprint > self.image_size * self.image_size {
            return bad("too many objects for the image size".into());
        }
        if !(self.noise >= 0.0) || !(self.intensity_min <= self.intensity_max) {
            return bad("noise and intensity ranges must be ordered and non-negative".into());
        }
        Ok(())
    }

    /// Generation parameters as `key=value` pairs.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("classes", self.classes.to_string()),
            ("objects_min", self.objects_min.to_string()),
            ("objects_max", self.objects_max.to_string()),
            ("object_size_min", self.object_size_min.to_string()),
            ("object_size_max", self.object_size_max.to_string()),
            ("noise", self.noise.to_string()),
            ("intensity_min", self.intensity_min.to_string()),
            ("intensity_max", self.intensity_max.to_string()),
            ("train_count", self.train_count.to_string()),
            ("test_count", self.test_count.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

fn overlaps(a: &Placement, x0: usize, y0: usize, size: usize) -> bool {
    // one pixel of clearance between bounding squares
    let (ax1, ay1) = (a.x0 + a.size + 1, a.y0 + a.size + 1);
    let (bx1, by1) = (x0 + size + 1, y0 + size + 1);
    a.x0 < bx1 && x0 < ax1 && a.y0 < by1 && y0 < ay1
}

fn place_objects(spec: &SyntheticSpec, forced: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<Placement>> {
    for _ in 0..50 {
        let count = rng.gen_range(spec.objects_min..=spec.objects_max);
        let mut classes: Vec<usize> = (0..spec.classes).collect();
        // partial Fisher-Yates for `count` distinct classes
        for i in 0..count {
            let j = rng.gen_range(i..spec.classes);
            classes.swap(i, j);
        }
        classes.truncate(count);
        if let Some(f) = forced {
            if !classes.contains(&f) {
                classes[0] = f;
            }
        }
        let mut placed: Vec<Placement> = Vec::with_capacity(count);
        'objects: for &class in &classes {
            for _ in 0..200 {
                let size = rng.gen_range(spec.object_size_min..=spec.object_size_max);
                let x0 = rng.gen_range(0..=spec.image_size - size);
                let y0 = rng.gen_range(0..=spec.image_size - size);
                if placed.iter().all(|p| !overlaps(p, x0, y0, size)) {
                    let intensity = rng.gen_range(spec.intensity_min..=spec.intensity_max);
                    placed.push(Placement { class, x0, y0, size, intensity });
                    continue 'objects;
                }
            }
            break;
        }
        if placed.len() == classes.len() {
            return Ok(placed);
        }
    }
    Err(Error::Infeasible("could not place non-overlapping objects".into()))
}

/// Renders placements onto a noisy C×H×W canvas.
pub fn render<T: Scalar>(spec: &SyntheticSpec, placements: &[Placement], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = spec.image_size;
    let mut img = vec![0.0f64; spec.channels * n * n];
    for v in img.iter_mut() {
        *v = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
    }
    for p in placements {
        let kind = ShapeKind::ALL[p.class];
        let tint: Vec<f64> = (0..spec.channels)
            .map(|c| if c == 0 { 1.0 } else { rng.gen_range(0.5..=1.0) })
            .collect();
        for y in 0..p.size {
            for x in 0..p.size {
                let u = (x as f64 + 0.5) / p.size as f64;
                let v = (y as f64 + 0.5) / p.size as f64;
                if kind.covers(u, v) {
                    for (c, t) in tint.iter().enumerate() {
                        img[c * n * n + (p.y0 + y) * n + p.x0 + x] += p.intensity * t;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[spec.channels, n, n], img.into_iter().map(T::lit).collect()).expect("C×H×W")
}

/// Binary label vector implied by a placement list.
pub fn labels_from_placements(classes: usize, placements: &[Placement]) -> Vec<u8> {
    let mut y = vec![0u8; classes];
    for p in placements {
        y[p.class] = 1;
    }
    y
}

fn gen_split<T: Scalar>(spec: &SyntheticSpec, count: usize, stream: u64) -> Result<(Dataset<T>, Vec<Vec<Placement>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut ds = Dataset::new(spec.classes);
    let mut layouts = Vec::with_capacity(count);
    for i in 0..count {
        let forced = (i < spec.classes).then_some(i);
        let placements = place_objects(spec, forced, &mut rng)?;
        let labels = labels_from_placements(spec.classes, &placements);
        debug_assert_eq!(labels.iter().map(|&v| v as usize).sum::<usize>(), placements.len());
        let img = render(spec, &placements, &mut rng);
        ds.push(format!("img_{i:05}.fnt"), img, labels)?;
        layouts.push(placements);
    }
    Ok((ds, layouts))
}

/// Generates `(train, test)` splits. Deterministic in `spec.seed`; the first
/// `classes` images of each split each contain a different class, so every
/// class occurs in both splits whenever the split holds at least `classes`
/// images.
pub fn gen_dataset<T: Scalar>(spec: &SyntheticSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let (train, _) = gen_split(spec, spec.train_count, 0)?;
    let (test, _) = gen_split(spec, spec.test_count, 1)?;
    Ok((train, test))
}

/// Like [`gen_dataset`] but also returns each image's placement list.
pub fn gen_dataset_with_layouts<T: Scalar>(
    spec: &SyntheticSpec,
) -> Result<((Dataset<T>, Vec<Vec<Placement>>), (Dataset<T>, Vec<Vec<Placement>>))> {
    spec.validate()?;
    Ok((gen_split(spec, spec.train_count, 0)?, gen_split(spec, spec.test_count, 1)?))
}
