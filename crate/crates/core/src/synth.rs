//! Synthetic posed-shapes dataset: classes are (shape, colour) pairs;
//! posture and cluttered backgrounds are class-independent nuisances.
//! Ground-truth foreground masks are written as a saliency cache.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::sample_id;
use crate::error::{FotError, IoContext, Result};
use crate::raster::Image;
use crate::saliency::SaliencyCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Ellipse,
    LShape,
    TShape,
}

impl Shape {
    pub const ALL: [Shape; 9] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Diamond,
        Shape::Ellipse,
        Shape::LShape,
        Shape::TShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Diamond => "diamond",
            Shape::Ellipse => "ellipse",
            Shape::LShape => "lshape",
            Shape::TShape => "tshape",
        }
    }

    /// Membership test in the shape's canonical frame, `[-1, 1]^2`.
    pub fn contains(self, u: f32, v: f32) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Circle => r2 <= 0.85,
            Shape::Square => u.abs().max(v.abs()) <= 0.75,
            Shape::Triangle => {
                // apex up, base at v = 0.7
                v <= 0.7 && v >= -0.9 + 1.8 * u.abs()
            }
            Shape::Cross => {
                (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95)
            }
            Shape::Ring => (0.36..=0.9).contains(&r2),
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ellipse => u * u + (v / 0.5) * (v / 0.5) <= 0.9,
            Shape::LShape => {
                ((-0.8..=-0.25).contains(&u) && v.abs() <= 0.9)
                    || ((0.35..=0.9).contains(&v) && u.abs() <= 0.8)
            }
            Shape::TShape => {
                ((-0.9..=-0.4).contains(&v) && u.abs() <= 0.9) || (u.abs() <= 0.26 && v.abs() <= 0.9)
            }
        }
    }
}

pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.90, 0.12, 0.10]),
    ("green", [0.12, 0.78, 0.20]),
    ("blue", [0.15, 0.30, 0.95]),
    ("yellow", [0.95, 0.88, 0.10]),
    ("magenta", [0.88, 0.20, 0.85]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("orange", [1.00, 0.55, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posture {
    pub rotation_deg: f32,
    /// Object half-size as a fraction of the image side.
    pub scale: f32,
    /// Centre offset as a fraction of the image side.
    pub offset: (f32, f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub shapes: Vec<Shape>,
    /// Indices into [`PALETTE`].
    pub colours: Vec<usize>,
    pub rotations_deg: Vec<f32>,
    pub scales: Vec<f32>,
    pub offsets: Vec<(f32, f32)>,
    /// Clutter elements drawn per image, inclusive range.
    pub clutter: (usize, usize),
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 40,
            samples_per_class: 30,
            shapes: Shape::ALL[..8].to_vec(),
            colours: (0..5).collect(),
            rotations_deg: (0..8).map(|i| i as f32 * 45.0).collect(),
            scales: vec![0.22, 0.28, 0.34],
            offsets: vec![(-0.15, -0.15), (-0.15, 0.15), (0.0, 0.0), (0.15, -0.15), (0.15, 0.15)],
            clutter: (5, 9),
            image_size: 32,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.samples_per_class == 0 || self.image_size < 4 {
            return Err(FotError::Config("synthetic spec sizes must be positive".into()));
        }
        if self.shapes.is_empty()
            || self.colours.is_empty()
            || self.rotations_deg.is_empty()
            || self.scales.is_empty()
            || self.offsets.is_empty()
        {
            return Err(FotError::Config("synthetic vocabularies must be non-empty".into()));
        }
        if self.colours.iter().any(|&c| c >= PALETTE.len()) {
            return Err(FotError::Config("colour index outside the palette".into()));
        }
        if self.n_classes > self.shapes.len() * self.colours.len() {
            return Err(FotError::Config(format!(
                "{} classes requested but only {} shape/colour combinations exist",
                self.n_classes,
                self.shapes.len() * self.colours.len()
            )));
        }
        if self.clutter.0 > self.clutter.1 {
            return Err(FotError::Config("clutter range is inverted".into()));
        }
        Ok(())
    }

    /// `(shape, colour index)` of class `c`. Consecutive classes differ in
    /// both shape and colour.
    pub fn class_signature(&self, c: usize) -> (Shape, usize) {
        let s = self.shapes.len();
        let shape = self.shapes[c % s];
        let colour = self.colours[(c / s + c) % self.colours.len()];
        (shape, colour)
    }

    pub fn class_name(&self, c: usize) -> String {
        let (shape, colour) = self.class_signature(c);
        format!("{}_{}", shape.name(), PALETTE[colour].0)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| self.class_name(c)).collect()
    }
}

/// One rendered sample: RGB image, exact foreground mask and its posture.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    pub mask: Image,
    pub posture: Posture,
}

fn fill_shape(
    img: &mut Image,
    mask: Option<&mut Image>,
    shape: Shape,
    colour: [f32; 3],
    posture: Posture,
    rng: &mut ChaCha8Rng,
    noise: f32,
) {
    let n = img.height() as f32;
    let (cy, cx) = (n * (0.5 + posture.offset.0), n * (0.5 + posture.offset.1));
    let half = posture.scale * n;
    let (sin, cos) = posture.rotation_deg.to_radians().sin_cos();
    let mut mask = mask;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
            let u = (cos * dx + sin * dy) / half;
            let v = (-sin * dx + cos * dy) / half;
            if shape.contains(u, v) {
                for (ch, &base) in colour.iter().enumerate() {
                    let jitter = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                    img.set(ch, y, x, (base + jitter).clamp(0.0, 1.0));
                }
                if let Some(m) = mask.as_deref_mut() {
                    m.set(0, y, x, 1.0);
                }
            }
        }
    }
}

fn clutter(img: &mut Image, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) {
    let n = spec.image_size;
    let items = rng.random_range(spec.clutter.0..=spec.clutter.1);
    for _ in 0..items {
        let colour = PALETTE[spec.colours[rng.random_range(0..spec.colours.len())]].1;
        let dim = rng.random_range(0.55f32..0.9);
        let colour = colour.map(|c| c * dim);
        match rng.random_range(0..3) {
            0 => {
                // thin stripe
                let horizontal = rng.random_bool(0.5);
                let at = rng.random_range(0..n);
                let thick = rng.random_range(1..=2);
                for a in at..(at + thick).min(n) {
                    for b in 0..n {
                        let (y, x) = if horizontal { (a, b) } else { (b, a) };
                        for (ch, &c) in colour.iter().enumerate() {
                            img.set(ch, y, x, c);
                        }
                    }
                }
            }
            1 => {
                // small block
                let side = (n / 5).max(2);
                let (h, w) = (rng.random_range(2..=side), rng.random_range(2..=side));
                let (top, left) = (rng.random_range(0..n - h), rng.random_range(0..n - w));
                for y in top..top + h {
                    for x in left..left + w {
                        for (ch, &c) in colour.iter().enumerate() {
                            img.set(ch, y, x, c);
                        }
                    }
                }
            }
            _ => {
                // small distractor shape
                let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
                let posture = Posture {
                    rotation_deg: rng.random_range(0.0..360.0),
                    scale: rng.random_range(0.06..0.11),
                    offset: (rng.random_range(-0.42..0.42), rng.random_range(-0.42..0.42)),
                };
                fill_shape(img, None, shape, colour, posture, rng, 0.0);
            }
        }
    }
}

/// Renders sample `index` of class `class`; the result depends only on the
/// spec, the class and the index.
pub fn render(spec: &SyntheticSpec, class: usize, index: usize) -> Rendered {
    let seed = spec
        .seed
        .wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add((class as u64) << 32 | index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.image_size;
    let mut image = Image::zeros(3, n, n);
    let grey = rng.random_range(0.05f32..0.35);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05f32..0.05));
    let gy = rng.random_range(-0.1f32..0.1);
    for y in 0..n {
        for x in 0..n {
            for (ch, t) in tint.iter().enumerate() {
                let ramp = gy * (y as f32 / n as f32 - 0.5);
                let v = grey + t + ramp + rng.random_range(-0.03f32..0.03);
                image.set(ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    clutter(&mut image, spec, &mut rng);
    let posture = Posture {
        rotation_deg: spec.rotations_deg[rng.random_range(0..spec.rotations_deg.len())],
        scale: spec.scales[rng.random_range(0..spec.scales.len())],
        offset: spec.offsets[rng.random_range(0..spec.offsets.len())],
    };
    let (shape, colour) = spec.class_signature(class);
    let mut mask = Image::zeros(1, n, n);
    fill_shape(&mut image, Some(&mut mask), shape, PALETTE[colour].1, posture, &mut rng, 0.06);
    Rendered {
        image,
        mask,
        posture,
    }
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticLayout {
    pub images: usize,
    pub masks: usize,
    pub class_names: Vec<String>,
}

/// Writes `out/images/<class>/<stem>.png` and the matching ground-truth
/// masks under `out/saliency/`. A non-empty `out` is refused unless
/// `force` is set.
pub fn gen_synthetic(spec: &SyntheticSpec, out: &Path, force: bool) -> Result<SyntheticLayout> {
    spec.validate()?;
    if out.exists() {
        let non_empty = std::fs::read_dir(out).at(out)?.next().is_some();
        if non_empty && !force {
            return Err(FotError::Config(format!(
                "output directory {} is not empty (use force to overwrite)",
                out.display()
            )));
        }
    }
    let images_root = out.join("images");
    let cache = SaliencyCache::new(out.join("saliency"));
    let names = spec.class_names();
    let jobs: Vec<(usize, usize)> = (0..spec.n_classes)
        .flat_map(|c| (0..spec.samples_per_class).map(move |i| (c, i)))
        .collect();
    jobs.par_iter().try_for_each(|&(c, i)| -> Result<()> {
        let r = render(spec, c, i);
        let stem = format!("{i:04}");
        r.image.save_png(&images_root.join(&names[c]).join(format!("{stem}.png")))?;
        let map = crate::saliency::SaliencyMap::new(r.mask, sample_id(&names[c], &stem))?;
        cache.put(&map)
    })?;
    Ok(SyntheticLayout {
        images: jobs.len(),
        masks: jobs.len(),
        class_names: names,
    })
}
