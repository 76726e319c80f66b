//! COCO-style JSON index plus one PNG per scene.
//!
//! Masks are written as polygon rings along pixel edges, which the even-odd
//! rule reproduces exactly; an uncompressed column-major RLE is the fallback
//! and can be forced. Contour-point labels ride along as extra annotation
//! fields (`contour_points`, `center`, `contour_meta`).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{InstanceAnnotation, SceneRecord, ShapeKind};
use crate::contour::{BinaryMask, ContourPointSet, Sampling};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskEncoding {
    /// Polygons, with RLE for any mask the polygons fail to reproduce.
    #[default]
    Auto,
    Rle,
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    height: usize,
    width: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct RleJson {
    counts: Vec<u64>,
    size: [usize; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(RleJson),
}

#[derive(Serialize, Deserialize)]
struct ContourMeta {
    k: usize,
    sampling: Sampling,
    pad_count: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: usize,
    /// `[x, y, width, height]` with pixel edges on integers
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
    segmentation: Segmentation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contour_points: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contour_meta: Option<ContourMeta>,
}

/// Column-major run lengths, starting with a (possibly empty) background run.
pub fn encode_rle(mask: &BinaryMask) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for c in 0..mask.width() {
        for r in 0..mask.height() {
            if mask.get(r, c) != current {
                counts.push(run);
                run = 0;
                current = !current;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

pub fn decode_rle(counts: &[u64], height: usize, width: usize) -> Result<BinaryMask> {
    let total: u64 = counts.iter().sum();
    if total != (height * width) as u64 {
        return Err(Error::format(
            "rle",
            format!("run lengths sum to {total}, expected {}", height * width),
        ));
    }
    let mut mask = BinaryMask::new(height, width);
    let mut pos = 0usize;
    for (i, &n) in counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + n as usize {
                mask.set(p % height, p / height, true);
            }
        }
        pos += n as usize;
    }
    Ok(mask)
}

/// Closed rings along pixel edges, flattened `[x0, y0, x1, y1, ...]` with
/// pixel `(r, c)` covering `[c, c+1] × [r, r+1]`.
pub fn encode_polygons(mask: &BinaryMask) -> Vec<Vec<f64>> {
    type P = (i64, i64);
    let mut outgoing: BTreeMap<P, Vec<P>> = BTreeMap::new();
    for (r, c) in mask.pixels() {
        let (r, c) = (r as i64, c as i64);
        let bg = |dr: i64, dc: i64| !mask.get_signed((r + dr) as isize, (c + dc) as isize);
        // (x, y) vertices, foreground on the right of each directed edge.
        if bg(-1, 0) {
            outgoing.entry((c, r)).or_default().push((c + 1, r));
        }
        if bg(0, 1) {
            outgoing.entry((c + 1, r)).or_default().push((c + 1, r + 1));
        }
        if bg(1, 0) {
            outgoing.entry((c + 1, r + 1)).or_default().push((c, r + 1));
        }
        if bg(0, -1) {
            outgoing.entry((c, r + 1)).or_default().push((c, r));
        }
    }
    let mut rings = Vec::new();
    while let Some((&start, _)) = outgoing.iter().find(|(_, v)| !v.is_empty()) {
        let mut ring = vec![start];
        let mut at = start;
        loop {
            let next = outgoing
                .get_mut(&at)
                .and_then(Vec::pop)
                .expect("edges form closed loops");
            at = next;
            if at == start {
                break;
            }
            ring.push(at);
        }
        // Drop vertices in the middle of straight runs.
        let n = ring.len();
        let corners: Vec<P> = (0..n)
            .filter(|&i| {
                let (a, b, c) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
                (b.0 - a.0, b.1 - a.1) != (c.0 - b.0, c.1 - b.1)
            })
            .map(|i| ring[i])
            .collect();
        rings.push(corners.iter().flat_map(|&(x, y)| [x as f64, y as f64]).collect());
    }
    rings
}

/// Even-odd fill of polygon rings, sampling pixel centers.
pub fn decode_polygons(rings: &[Vec<f64>], height: usize, width: usize) -> Result<BinaryMask> {
    let mut edges = Vec::new();
    for ring in rings {
        if ring.len() % 2 != 0 || ring.len() < 6 {
            return Err(Error::format(
                "polygon",
                format!("ring with {} coordinates", ring.len()),
            ));
        }
        let pts: Vec<(f64, f64)> = ring.chunks(2).map(|p| (p[0], p[1])).collect();
        for i in 0..pts.len() {
            edges.push((pts[i], pts[(i + 1) % pts.len()]));
        }
    }
    let mut mask = BinaryMask::new(height, width);
    let mut xs = Vec::new();
    for r in 0..height {
        let y = r as f64 + 0.5;
        xs.clear();
        for &((x0, y0), (x1, y1)) in &edges {
            if (y0 > y) != (y1 > y) {
                xs.push(x0 + (y - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks(2) {
            let [a, b] = pair else { continue };
            for c in 0..width {
                let x = c as f64 + 0.5;
                if x > *a && x < *b {
                    mask.set(r, c, true);
                }
            }
        }
    }
    Ok(mask)
}

/// `path` may name the index file or the directory holding `index.json`.
pub fn resolve_index(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(INDEX_FILE)
    } else {
        path.to_path_buf()
    }
}

fn image_file(scene_id: u64) -> String {
    format!("images/{scene_id:06}.png")
}

/// Saves an `[H, W, 3]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized from tensor");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a PNG as an `[H, W, 3]` tensor in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

fn segmentation(mask: &BinaryMask, encoding: MaskEncoding) -> Segmentation {
    let rle = || {
        Segmentation::Rle(RleJson {
            counts: encode_rle(mask),
            size: [mask.height(), mask.width()],
        })
    };
    match encoding {
        MaskEncoding::Rle => rle(),
        MaskEncoding::Auto => {
            let rings = encode_polygons(mask);
            match decode_polygons(&rings, mask.height(), mask.width()) {
                Ok(m) if &m == mask => Segmentation::Polygons(rings),
                _ => rle(),
            }
        }
    }
}

fn to_json(records: &[SceneRecord], file_names: &[String], encoding: MaskEncoding) -> CocoFile {
    let num_classes = records
        .iter()
        .flat_map(|r| &r.instances)
        .map(|a| a.class_id + 1)
        .max()
        .unwrap_or(0);
    let mut next_id = 1;
    let mut annotations = Vec::new();
    for rec in records {
        for inst in &rec.instances {
            let b = &inst.bbox;
            let labels = inst.contour_points.as_ref();
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: rec.scene_id,
                category_id: inst.class_id + 1,
                bbox: [b.left + 0.5, b.top + 0.5, b.width, b.height],
                area: inst.mask.count() as f64,
                iscrowd: 0,
                segmentation: segmentation(&inst.mask, encoding),
                contour_points: labels.map(|p| p.points.iter().map(|&(r, c)| [r, c]).collect()),
                center: labels.and_then(|p| p.center).map(|(r, c)| [r, c]),
                contour_meta: labels.map(|p| ContourMeta {
                    k: p.k,
                    sampling: p.sampling,
                    pad_count: p.pad_count,
                    seed: p.seed,
                }),
            });
            next_id += 1;
        }
    }
    CocoFile {
        images: records
            .iter()
            .zip(file_names)
            .map(|(r, f)| CocoImage {
                id: r.scene_id,
                file_name: f.clone(),
                height: r.height(),
                width: r.width(),
                seed: r.seed,
            })
            .collect(),
        annotations,
        categories: (0..num_classes)
            .map(|i| CocoCategory {
                id: i + 1,
                name: format!("{:?}", ShapeKind::for_class(i)).to_lowercase(),
            })
            .collect(),
    }
}

fn write_json(file: &CocoFile, path: &Path) -> Result<()> {
    let text = serde_json::to_string(file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(records: &[SceneRecord], dir: impl AsRef<Path>) -> Result<()> {
    write_dataset_with(records, dir, MaskEncoding::Auto)
}

/// Writes `dir/index.json` and `dir/images/*.png`.
pub fn write_dataset_with(records: &[SceneRecord], dir: impl AsRef<Path>, encoding: MaskEncoding) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let names: Vec<String> = records.iter().map(|r| image_file(r.scene_id)).collect();
    for (rec, name) in records.iter().zip(&names) {
        write_png(&rec.image, &dir.join(name))?;
    }
    write_json(&to_json(records, &names, encoding), &dir.join(INDEX_FILE))
}

/// Writes only the JSON index to `path`, pointing at images that already
/// exist under `image_root` (as written by [`write_dataset`]).
pub fn write_annotations(records: &[SceneRecord], path: impl AsRef<Path>, image_root: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let root = image_root.as_ref();
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let same_dir = match (parent.canonicalize(), root.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    let names: Vec<String> = records
        .iter()
        .map(|r| {
            let rel = image_file(r.scene_id);
            if same_dir {
                rel
            } else {
                let abs = root.canonicalize().unwrap_or_else(|_| root.to_path_buf()).join(rel);
                abs.to_string_lossy().into_owned()
            }
        })
        .collect();
    write_json(&to_json(records, &names, MaskEncoding::Auto), path)
}

fn decode_annotation(
    a: &CocoAnnotation,
    height: usize,
    width: usize,
    class_of: &HashMap<usize, usize>,
) -> Result<InstanceAnnotation> {
    let record = format!("annotation {}", a.id);
    let mask = match &a.segmentation {
        Segmentation::Polygons(rings) => decode_polygons(rings, height, width),
        Segmentation::Rle(rle) => {
            if rle.size != [height, width] {
                return Err(Error::format(&record, "RLE size differs from image size"));
            }
            decode_rle(&rle.counts, height, width)
        }
    }
    .map_err(|e| Error::format(&record, e.to_string()))?;
    let class_id = *class_of
        .get(&a.category_id)
        .ok_or_else(|| Error::format(&record, format!("unknown category {}", a.category_id)))?;
    let contour_points = match (&a.contour_points, &a.contour_meta) {
        (Some(points), meta) => {
            let points: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
            let (k, sampling, pad_count, seed) = match meta {
                Some(m) => (m.k, m.sampling, m.pad_count, m.seed),
                None => (points.len(), Sampling::Uniform, 0, 0),
            };
            if k != points.len() {
                return Err(Error::format(&record, format!("k = {k} but {} points", points.len())));
            }
            Some(ContourPointSet {
                points,
                center: a.center.map(|c| (c[0], c[1])),
                k,
                sampling,
                pad_count,
                seed,
            })
        }
        (None, _) => None,
    };
    let [x, y, w, h] = a.bbox;
    Ok(InstanceAnnotation {
        class_id,
        bbox: Rect::new(y - 0.5, x - 0.5, h, w),
        mask,
        contour_points,
    })
}

/// Reads an index written by [`write_dataset`] (or any COCO file with
/// polygon / uncompressed RLE segmentations).
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let index = resolve_index(path.as_ref());
    let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| Error::format(index.display(), e.to_string()))?;
    let root = index.parent().unwrap_or(Path::new("."));

    let mut category_ids: Vec<usize> = file.categories.iter().map(|c| c.id).collect();
    if category_ids.is_empty() {
        category_ids = file.annotations.iter().map(|a| a.category_id).collect();
    }
    category_ids.sort_unstable();
    category_ids.dedup();
    let class_of: HashMap<usize, usize> = category_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut by_image: HashMap<u64, Vec<&CocoAnnotation>> = HashMap::new();
    for a in &file.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    if let Some(a) = file
        .annotations
        .iter()
        .find(|a| !file.images.iter().any(|i| i.id == a.image_id))
    {
        return Err(Error::format(
            format!("annotation {}", a.id),
            format!("refers to missing image {}", a.image_id),
        ));
    }

    file.images
        .iter()
        .map(|img| {
            let record = format!("image {}", img.id);
            let image = read_png(&root.join(&img.file_name)).map_err(|e| Error::format(&record, e.to_string()))?;
            if image.shape()[..2] != [img.height, img.width] {
                return Err(Error::format(&record, "PNG size differs from index"));
            }
            let instances = by_image
                .get(&img.id)
                .map(|anns| {
                    anns.iter()
                        .map(|a| decode_annotation(a, img.height, img.width, &class_of))
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?
                .unwrap_or_default();
            Ok(SceneRecord {
                scene_id: img.id,
                seed: img.seed,
                image,
                instances,
            })
        })
        .collect()
}
