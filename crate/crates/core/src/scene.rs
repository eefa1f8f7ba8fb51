//! Seeded synthetic rooms built from planes, boxes and cylinders.
//!
//! Every class has a fixed primitive kind and characteristic placement, so
//! geometry alone identifies it. Texture ids default to the class id. With
//! probability `texture_confusion` a scene makes two present classes of
//! different shape share one texture id, which is what the frozen semantic
//! head gets fooled by.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};

pub const CLASS_COUNT: usize = 10;
pub const TEXTURE_COUNT: usize = CLASS_COUNT;

const ROOM: f64 = 5.0;
const CEILING: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Plane,
    Box,
    Cylinder,
}

pub const CLASS_NAMES: [&str; CLASS_COUNT] = [
    "floor", "ceiling", "wall", "board", "table", "chair", "bookcase", "sofa", "column", "bin",
];

pub fn primitive_of(class: usize) -> Primitive {
    match class {
        0..=3 => Primitive::Plane,
        4..=7 => Primitive::Box,
        _ => Primitive::Cylinder,
    }
}

fn classes_of(kind: Primitive) -> Vec<usize> {
    (0..CLASS_COUNT).filter(|c| primitive_of(*c) == kind).collect()
}

/// Novel classes held out from meta-training for each fold.
pub fn novel_classes(fold: usize) -> Result<Vec<usize>> {
    match fold {
        0 => Ok(vec![3, 5, 7, 9]),
        1 => Ok(vec![2, 4, 6, 8]),
        _ => Err(CoreError::Config(format!("fold must be 0 or 1, got {fold}"))),
    }
}

pub fn base_classes(fold: usize) -> Result<Vec<usize>> {
    let novel = novel_classes(fold)?;
    Ok((0..CLASS_COUNT).filter(|c| !novel.contains(c)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub planes: (usize, usize),
    pub boxes: (usize, usize),
    pub cylinders: (usize, usize),
    pub points_per_object: (usize, usize),
    pub noise_sigma: f64,
    pub texture_confusion: f64,
    pub max_points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            planes: (1, 2),
            boxes: (1, 2),
            cylinders: (0, 1),
            points_per_object: (200, 400),
            noise_sigma: 0.01,
            texture_confusion: 0.25,
            max_points: 2048,
        }
    }
}

impl SceneConfig {
    /// Small scenes for tests: at most 480 points.
    pub fn small() -> Self {
        Self {
            points_per_object: (48, 96),
            max_points: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("planes", self.planes),
            ("boxes", self.boxes),
            ("cylinders", self.cylinders),
            ("points_per_object", self.points_per_object),
        ] {
            if lo > hi {
                return Err(CoreError::Config(format!(
                    "{name} range is empty: {lo}..{hi}"
                )));
            }
        }
        if self.points_per_object.0 == 0 {
            return Err(CoreError::Config("points_per_object must be positive".into()));
        }
        if self.planes.1 + self.boxes.1 + self.cylinders.1 == 0 {
            return Err(CoreError::Config("scene config allows no objects".into()));
        }
        if !(0.0..=1.0).contains(&self.texture_confusion) {
            return Err(CoreError::Config(format!(
                "texture_confusion must be in [0, 1], got {}",
                self.texture_confusion
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(CoreError::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        let required =
            (self.planes.1 + self.boxes.1 + self.cylinders.1) * self.points_per_object.1;
        if required > self.max_points {
            return Err(CoreError::Capacity {
                required,
                max: self.max_points,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub points: Vec<[f64; 3]>,
    pub texture: Vec<usize>,
    pub labels: Vec<usize>,
    pub class_set: Vec<usize>,
    pub seed: u64,
}

/// Equality over the stored content; the seed is provenance and is not
/// part of the file format.
impl PartialEq for Scene {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
            && self.texture == other.texture
            && self.labels == other.labels
            && self.class_set == other.class_set
    }
}

impl Scene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains_class(&self, class: usize) -> bool {
        self.class_set.binary_search(&class).is_ok()
    }

    /// Texture id used by each class present in the scene.
    pub fn class_textures(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .class_set
            .iter()
            .filter_map(|&c| {
                self.labels
                    .iter()
                    .position(|&l| l == c)
                    .map(|i| (c, self.texture[i]))
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Point subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Scene {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Scene {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            texture: indices.iter().map(|&i| self.texture[i]).collect(),
            class_set: class_set_of(&labels),
            labels,
            seed: self.seed,
        }
    }
}

fn class_set_of(labels: &[usize]) -> Vec<usize> {
    let mut set = labels.to_vec();
    set.sort_unstable();
    set.dedup();
    set
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| CoreError::Config(e.to_string()))?;

    let mut objects = Vec::new();
    for (kind, (lo, hi)) in [
        (Primitive::Plane, config.planes),
        (Primitive::Box, config.boxes),
        (Primitive::Cylinder, config.cylinders),
    ] {
        let count = rng.random_range(lo..=hi);
        let pool = classes_of(kind);
        for _ in 0..count {
            objects.push(*pool.choose(&mut rng).expect("every kind has classes"));
        }
    }
    if objects.is_empty() {
        let all: Vec<usize> = (0..CLASS_COUNT).collect();
        objects.push(*all.choose(&mut rng).expect("class list is non-empty"));
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for &class in &objects {
        let (lo, hi) = config.points_per_object;
        let n = rng.random_range(lo..=hi);
        let placement = Placement::sample(class, &mut rng);
        for _ in 0..n {
            let mut p = placement.surface_point(&mut rng);
            if config.noise_sigma > 0.0 {
                for v in &mut p {
                    *v += noise.sample(&mut rng);
                }
            }
            points.push(p);
            labels.push(class);
        }
    }

    let class_set = class_set_of(&labels);
    let mut texture_of: Vec<usize> = (0..CLASS_COUNT).collect();
    // One confusion event per scene: a pair of present classes with
    // different shapes ends up sharing one texture id.
    if rng.random_bool(config.texture_confusion) {
        let pairs: Vec<(usize, usize)> = class_set
            .iter()
            .flat_map(|&a| class_set.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| primitive_of(a) != primitive_of(b))
            .collect();
        if let Some(&(adopter, source)) = pairs.choose(&mut rng) {
            texture_of[adopter] = texture_of[source];
        }
    }
    let texture = labels.iter().map(|&l| texture_of[l]).collect();

    Ok(Scene {
        points,
        texture,
        labels,
        class_set,
        seed,
    })
}

enum Placement {
    /// Axis-aligned rectangle: origin, two spanning edges.
    Rect { origin: [f64; 3], u: [f64; 3], v: [f64; 3] },
    /// Box without its bottom face.
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Lateral surface of an upright cylinder.
    Tube { center: [f64; 2], radius: f64, z: (f64, f64) },
}

impl Placement {
    fn sample(class: usize, rng: &mut impl Rng) -> Self {
        let jitter = |rng: &mut dyn rand::RngCore, v: f64| v * rng.random_range(0.85..1.15);
        match class {
            0 | 1 => {
                let (w, d) = (rng.random_range(2.0..4.0), rng.random_range(2.0..4.0));
                let (x, y) = (rng.random_range(0.0..ROOM - w), rng.random_range(0.0..ROOM - d));
                let z = if class == 0 { 0.0 } else { CEILING };
                Placement::Rect {
                    origin: [x, y, z],
                    u: [w, 0.0, 0.0],
                    v: [0.0, d, 0.0],
                }
            }
            2 | 3 => {
                let (width, z0, height, inset) = if class == 2 {
                    (rng.random_range(2.0..4.0), 0.0, CEILING, 0.0)
                } else {
                    (rng.random_range(0.8..1.5), rng.random_range(0.8..1.0), 1.0, 0.05)
                };
                let along = rng.random_range(0.0..ROOM - width);
                let side = rng.random_range(0..4);
                let (origin, u) = match side {
                    0 => ([along, inset, z0], [width, 0.0, 0.0]),
                    1 => ([along, ROOM - inset, z0], [width, 0.0, 0.0]),
                    2 => ([inset, along, z0], [0.0, width, 0.0]),
                    _ => ([ROOM - inset, along, z0], [0.0, width, 0.0]),
                };
                Placement::Rect {
                    origin,
                    u,
                    v: [0.0, 0.0, height],
                }
            }
            4..=7 => {
                let (w, d, z0, z1) = match class {
                    4 => (1.2, 0.8, 0.7, 0.78),
                    5 => (0.5, 0.5, 0.0, 0.9),
                    6 => (0.9, 0.35, 0.0, 2.0),
                    _ => (1.8, 0.9, 0.0, 0.8),
                };
                let (w, d) = (jitter(rng, w), jitter(rng, d));
                let z1 = z0 + jitter(rng, z1 - z0);
                let cx = rng.random_range(0.5 + w / 2.0..ROOM - 0.5 - w / 2.0);
                let cy = rng.random_range(0.5 + d / 2.0..ROOM - 0.5 - d / 2.0);
                Placement::Cuboid {
                    min: [cx - w / 2.0, cy - d / 2.0, z0],
                    max: [cx + w / 2.0, cy + d / 2.0, z1],
                }
            }
            _ => {
                let (radius, height) = if class == 8 { (0.25, CEILING) } else { (0.18, 0.5) };
                let radius = jitter(rng, radius);
                let height = if class == 8 { height } else { jitter(rng, height) };
                Placement::Tube {
                    center: [rng.random_range(0.5..ROOM - 0.5), rng.random_range(0.5..ROOM - 0.5)],
                    radius,
                    z: (0.0, height),
                }
            }
        }
    }

    fn surface_point(&self, rng: &mut impl Rng) -> [f64; 3] {
        match self {
            Placement::Rect { origin, u, v } => {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                std::array::from_fn(|i| origin[i] + a * u[i] + b * v[i])
            }
            Placement::Cuboid { min, max } => {
                let [w, d, h] = std::array::from_fn(|i| max[i] - min[i]);
                // Top, then the four sides, weighted by area.
                let areas = [w * d, w * h, w * h, d * h, d * h];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut face = 0;
                while face < 4 && pick >= areas[face] {
                    pick -= areas[face];
                    face += 1;
                }
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                let x = min[0] + a * w;
                let y = min[1] + a * d;
                let z = min[2] + b * h;
                match face {
                    0 => [min[0] + a * w, min[1] + b * d, max[2]],
                    1 => [x, min[1], z],
                    2 => [x, max[1], z],
                    3 => [min[0], y, z],
                    _ => [max[0], y, z],
                }
            }
            Placement::Tube { center, radius, z } => {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let h = rng.random_range(z.0..z.1);
                [
                    center[0] + radius * theta.cos(),
                    center[1] + radius * theta.sin(),
                    h,
                ]
            }
        }
    }
}

/// Generates `count` scenes with consecutive seeds derived from `seed`.
pub fn generate_pool(config: &SceneConfig, count: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| generate_scene(config, seed.wrapping_mul(1_000_003).wrapping_add(i)))
        .collect()
}

pub fn format_scene(scene: &Scene) -> String {
    let mut out = String::with_capacity(scene.len() * 80 + 32);
    out.push_str("DAFS 1\n");
    let _ = writeln!(out, "{} {}", scene.len(), scene.class_set.len());
    for i in 0..scene.len() {
        let [x, y, z] = scene.points[i];
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            fmt_f64(x),
            fmt_f64(y),
            fmt_f64(z),
            scene.texture[i],
            scene.labels[i]
        );
    }
    out
}

/// Plain decimal with 17 significant digits, which round-trips any f64.
fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (16 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.parse::<f64>().ok() == Some(v) {
        s
    } else {
        // log10 can land one below the true exponent near powers of ten.
        format!("{v:.prec$}", prec = decimals + 1)
    }
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, format_scene(scene)).map_err(|e| CoreError::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_scene(&text, &path.display().to_string())
}

pub fn parse_scene(text: &str, origin: &str) -> Result<Scene> {
    let err = |line: usize, message: String| CoreError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim() == "DAFS 1" => {}
        Some(l) => return Err(err(1, format!("expected header `DAFS 1`, found `{l}`"))),
        None => return Err(err(1, "empty file".into())),
    }
    let counts = lines
        .next()
        .ok_or_else(|| err(2, "missing `<point_count> <class_count>` line".into()))?;
    let fields: Vec<&str> = counts.split_whitespace().collect();
    let parse_count = |s: &str| s.parse::<usize>().map_err(|e| err(2, format!("`{s}`: {e}")));
    let (n, class_count) = match fields.as_slice() {
        [a, b] => (parse_count(a)?, parse_count(b)?),
        _ => return Err(err(2, format!("expected two counts, found `{counts}`"))),
    };

    let mut points = Vec::with_capacity(n);
    let mut texture = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let line_no = i + 3;
        let line = lines
            .next()
            .ok_or_else(|| err(line_no, format!("expected {n} point rows, found {i}")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(err(line_no, format!("expected 5 fields, found {}", f.len())));
        }
        let coord = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line_no, format!("bad coordinate `{s}`")))
        };
        let id = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(line_no, format!("bad integer `{s}`")))
        };
        points.push([coord(f[0])?, coord(f[1])?, coord(f[2])?]);
        texture.push(id(f[3])?);
        labels.push(id(f[4])?);
    }
    if let Some((extra, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(n + 3 + extra, "unexpected row after the declared count".into()));
    }
    let class_set = class_set_of(&labels);
    if class_set.len() != class_count {
        return Err(err(
            2,
            format!(
                "declared {class_count} classes but rows contain {}",
                class_set.len()
            ),
        ));
    }
    Ok(Scene {
        points,
        texture,
        labels,
        class_set,
        seed: 0,
    })
}
