//! Seeded synthetic scenes: flat-colored shapes on a noisy background, with
//! exact instance masks.

mod coco;

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use coco::{
    decode_polygons, decode_rle, encode_polygons, encode_rle, read_dataset, read_png, resolve_index, write_annotations,
    write_dataset, write_dataset_with, write_png, MaskEncoding, INDEX_FILE,
};

use crate::contour::{BinaryMask, ContourPointSet};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Star,
    ];

    /// Shape drawn for a class; classes beyond four reuse the cycle.
    pub fn for_class(class_id: usize) -> ShapeKind {
        Self::ALL[class_id % Self::ALL.len()]
    }

    pub fn is_convex(self) -> bool {
        self != ShapeKind::Star
    }
}

/// An analytic shape in pixel-index coordinates (pixel `(r, c)` has its
/// center at `(r, c)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Radius for circles, triangles (circumradius) and stars (outer
    /// radius); half-height for rectangles.
    pub scale: f64,
    /// Rectangle half-width over half-height. Ignored by other kinds.
    pub aspect: f64,
    pub rotation: f64,
    pub class_id: usize,
}

const STAR_INNER: f64 = 0.45;

impl ShapeSpec {
    fn rotation(&self) -> f64 {
        self.rotation.rem_euclid(TAU)
    }

    /// Polygon vertices, or `None` for circles.
    fn vertices(&self) -> Option<Vec<(f64, f64)>> {
        let (sin, cos) = self.rotation().sin_cos();
        let place = |dy: f64, dx: f64| (self.center.0 + dy * cos - dx * sin, self.center.1 + dy * sin + dx * cos);
        let polar = |radius: f64, angle: f64| place(-radius * angle.cos(), radius * angle.sin());
        match self.kind {
            ShapeKind::Circle => None,
            ShapeKind::Rectangle => {
                let (h, w) = (self.scale, self.scale * self.aspect);
                Some(vec![place(-h, -w), place(-h, w), place(h, w), place(h, -w)])
            }
            ShapeKind::Triangle => Some((0..3).map(|i| polar(self.scale, i as f64 * TAU / 3.0)).collect()),
            ShapeKind::Star => Some(
                (0..10)
                    .map(|i| {
                        let r = if i % 2 == 0 {
                            self.scale
                        } else {
                            self.scale * STAR_INNER
                        };
                        polar(r, i as f64 * PI / 5.0)
                    })
                    .collect(),
            ),
        }
    }

    /// Analytic extent `(top, left, bottom, right)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        match self.vertices() {
            None => (
                self.center.0 - self.scale,
                self.center.1 - self.scale,
                self.center.0 + self.scale,
                self.center.1 + self.scale,
            ),
            Some(v) => v
                .iter()
                .fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |(t, l, b, r), &(y, x)| {
                    (t.min(y), l.min(x), b.max(y), r.max(x))
                }),
        }
    }

    /// Pixel-center containment. Unrotated rectangles are half-open so an
    /// `2h × 2w` rectangle covers exactly `4hw` pixels for integer extents.
    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (dy, dx) = (row - self.center.0, col - self.center.1);
        match self.kind {
            ShapeKind::Circle => dy * dy + dx * dx <= self.scale * self.scale,
            ShapeKind::Rectangle => {
                let (sin, cos) = self.rotation().sin_cos();
                let u = dy * cos + dx * sin;
                let v = -dy * sin + dx * cos;
                let (h, w) = (self.scale, self.scale * self.aspect);
                u >= -h && u < h && v >= -w && v < w
            }
            ShapeKind::Triangle | ShapeKind::Star => {
                let poly = self.vertices().expect("polygonal kind");
                even_odd(&poly, row, col)
            }
        }
    }
}

fn even_odd(poly: &[(f64, f64)], row: f64, col: f64) -> bool {
    let mut odd = false;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        if (a.0 > row) != (b.0 > row) && col < a.1 + (row - a.0) / (b.0 - a.0) * (b.1 - a.1) {
            odd = !odd;
        }
    }
    odd
}

/// Rasterizes a shape onto a `height × width` grid.
pub fn rasterize_shape(spec: &ShapeSpec, height: usize, width: usize) -> Result<BinaryMask> {
    let (t, l, b, r) = spec.extent();
    if !(spec.scale > 0.0) || t < -0.5 || l < -0.5 || b > height as f64 - 0.5 || r > width as f64 - 0.5 {
        return Err(Error::ShapeOutOfBounds { height, width });
    }
    let rows = (t.floor().max(0.0) as usize)..=(b.ceil() as usize).min(height.saturating_sub(1));
    let cols = (l.floor().max(0.0) as usize)..=(r.ceil() as usize).min(width.saturating_sub(1));
    let mut mask = BinaryMask::new(height, width);
    for row in rows {
        for col in cols.clone() {
            if spec.contains(row as f64, col as f64) {
                mask.set(row, col, true);
            }
        }
    }
    Ok(mask)
}

/// One object in a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub class_id: usize,
    /// Tight box of `mask`.
    pub bbox: Rect,
    pub mask: BinaryMask,
    pub contour_points: Option<ContourPointSet>,
}

impl InstanceAnnotation {
    pub fn from_mask(class_id: usize, mask: BinaryMask) -> Result<Self> {
        let bbox = mask.bbox().ok_or(Error::EmptyMask)?;
        Ok(Self {
            class_id,
            bbox,
            mask,
            contour_points: None,
        })
    }

    /// Mirror across the vertical image axis.
    pub fn flip_horizontal(&self) -> InstanceAnnotation {
        let width = self.mask.width();
        InstanceAnnotation {
            class_id: self.class_id,
            bbox: self.bbox.flip_horizontal(width as f64),
            mask: self.mask.flip_horizontal(),
            contour_points: self.contour_points.as_ref().map(|p| p.flip_horizontal(width)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub seed: u64,
    /// `[H, W, 3]`, values in `[0, 1]` quantized to multiples of 1/255.
    pub image: Tensor,
    pub instances: Vec<InstanceAnnotation>,
}

impl SceneRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn flip_horizontal(&self) -> SceneRecord {
        let (h, w) = (self.height(), self.width());
        let src = self.image.data();
        let mut data = vec![0.0; src.len()];
        for r in 0..h {
            for c in 0..w {
                let (to, from) = ((r * w + c) * 3, (r * w + w - 1 - c) * 3);
                data[to..to + 3].copy_from_slice(&src[from..from + 3]);
            }
        }
        SceneRecord {
            scene_id: self.scene_id,
            seed: self.seed,
            image: Tensor::new(vec![h, w, 3], data).expect("same size"),
            instances: self.instances.iter().map(InstanceAnnotation::flip_horizontal).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub num_classes: usize,
    pub allow_overlap: bool,
    /// Amplitude of the additive uniform pixel noise.
    pub noise: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_instances: 1,
            max_instances: 4,
            num_classes: 4,
            allow_overlap: false,
            noise: 0.05,
            min_scale: 9.0,
            max_scale: 20.0,
            max_attempts: 1000,
        }
    }
}

impl GeneratorConfig {
    /// Default settings for `size`×`size` images, with shape sizes scaled
    /// in proportion to the 128-pixel default.
    pub fn square(size: usize) -> Self {
        let d = Self::default();
        let f = size as f64 / d.height as f64;
        Self {
            height: size,
            width: size,
            min_scale: d.min_scale * f,
            max_scale: d.max_scale * f,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.min_instances > self.max_instances
            || !(self.min_scale > 0.0 && self.min_scale <= self.max_scale)
            || self.height < 8
            || self.width < 8
        {
            return Err(Error::Config(format!("invalid generator config {self:?}")));
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

/// Overlap-free placement keeps a one-pixel gap between instances.
fn touches(a: &BinaryMask, b: &BinaryMask) -> bool {
    a.pixels()
        .any(|(r, c)| (-1..=1).any(|dr| (-1..=1).any(|dc| b.get_signed(r as isize + dr, c as isize + dc))))
}

/// Draws one scene. Deterministic in `(config, scene_id, seed)`.
pub fn generate_scene(config: &GeneratorConfig, scene_id: u64, seed: u64) -> Result<SceneRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_id);
    let (h, w) = (config.height, config.width);

    let background = random_color(&mut rng);
    let n = rng.gen_range(config.min_instances..=config.max_instances);
    let mut placed: Vec<(usize, BinaryMask, [f64; 3])> = Vec::new();
    for instance in 0..n {
        let class_id = rng.gen_range(0..config.num_classes);
        let kind = ShapeKind::for_class(class_id);
        let color = loop {
            let c = random_color(&mut rng);
            if c.iter().zip(&background).any(|(a, b)| (a - b).abs() >= 0.3) {
                break c;
            }
        };
        let mut found = None;
        for _ in 0..config.max_attempts {
            let scale = rng.gen_range(config.min_scale..=config.max_scale);
            let aspect = rng.gen_range(0.6..1.6);
            let rotation = rng.gen_range(0.0..TAU);
            let mut spec = ShapeSpec {
                kind,
                center: (0.0, 0.0),
                scale,
                aspect,
                rotation,
                class_id,
            };
            let (t, l, b, r) = spec.extent();
            let (lo_r, hi_r) = (1.0 - t, h as f64 - 2.0 - b);
            let (lo_c, hi_c) = (1.0 - l, w as f64 - 2.0 - r);
            if lo_r > hi_r || lo_c > hi_c {
                continue;
            }
            spec.center = (rng.gen_range(lo_r..=hi_r), rng.gen_range(lo_c..=hi_c));
            let mask = rasterize_shape(&spec, h, w)?;
            if mask.count() < 4 {
                continue;
            }
            let ok = if config.allow_overlap {
                // Later shapes occlude earlier ones; keep every earlier
                // instance mostly visible.
                placed.iter().all(|(_, m, _)| {
                    let hidden = m.intersection_count(&mask);
                    (m.count() - hidden) * 10 >= m.count() * 6
                })
            } else {
                placed.iter().all(|(_, m, _)| !touches(m, &mask))
            };
            if ok {
                found = Some(mask);
                break;
            }
        }
        let mask = found.ok_or(Error::PlacementFailed {
            scene_id,
            instance,
            attempts: config.max_attempts,
        })?;
        if config.allow_overlap {
            for (_, m, _) in placed.iter_mut() {
                *m = BinaryMask::from_fn(h, w, |r, c| m.get(r, c) && !mask.get(r, c));
            }
        }
        placed.push((class_id, mask, color));
    }

    let mut pixels = vec![background; h * w];
    for (_, mask, color) in &placed {
        for (r, c) in mask.pixels() {
            pixels[r * w + c] = *color;
        }
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for px in pixels {
        for v in px {
            data.push(quantize(v + rng.gen_range(-config.noise..=config.noise)));
        }
    }
    let instances = placed
        .into_iter()
        .map(|(class_id, mask, _)| InstanceAnnotation::from_mask(class_id, mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneRecord {
        scene_id,
        seed,
        image: Tensor::new(vec![h, w, 3], data)?,
        instances,
    })
}

/// Scenes `first_id..first_id + count` with a shared seed.
pub fn generate_dataset(config: &GeneratorConfig, first_id: u64, count: usize, seed: u64) -> Result<Vec<SceneRecord>> {
    (0..count as u64)
        .map(|i| generate_scene(config, first_id + i, seed))
        .collect()
}
