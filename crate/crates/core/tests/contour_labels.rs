mod common;

use common::{dense_arc_oracle, polyline_distance, random_shape_mask};
use maskpoint::contour::{
    centroid, corner_sample, decode_heatmaps, encode_heatmaps, make_labels, multi_component_warnings, points_to_mask,
    trace_contour, uniform_sample, BinaryMask, ClosedContour, LabelConfig, Sampling,
};
use maskpoint::synth::{rasterize_shape, ShapeKind, ShapeSpec};
use maskpoint::{Error, Rect, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn block(
    h: usize,
    w: usize,
    rows: std::ops::RangeInclusive<usize>,
    cols: std::ops::RangeInclusive<usize>,
) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| rows.contains(&r) && cols.contains(&c))
}

fn shape_mask(seed: u64, convex: bool) -> BinaryMask {
    random_shape_mask(&mut ChaCha8Rng::seed_from_u64(seed), 48, convex)
}

fn as_f64(points: &[(usize, usize)]) -> Vec<(f64, f64)> {
    points.iter().map(|&(r, c)| (r as f64, c as f64)).collect()
}

#[test]
fn trace_two_by_two_block() {
    let c = trace_contour(&block(4, 4, 1..=2, 1..=2)).unwrap();
    assert_eq!(c.points, vec![(1, 1), (1, 2), (2, 2), (2, 1)]);
}

#[test]
fn trace_single_pixel() {
    let c = trace_contour(&BinaryMask::from_pixels(8, 8, &[(3, 5)])).unwrap();
    assert_eq!(c.points, vec![(3, 5)]);
}

#[test]
fn trace_full_three_by_three_ring() {
    let c = trace_contour(&block(3, 3, 0..=2, 0..=2)).unwrap();
    assert_eq!(
        c.points,
        vec![(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0)]
    );
}

#[test]
fn trace_empty_mask_is_an_error() {
    assert!(matches!(trace_contour(&BinaryMask::new(4, 4)), Err(Error::EmptyMask)));
}

#[test]
fn trace_keeps_largest_component_and_counts_the_warning() {
    let mut mask = block(10, 10, 0..=0, 0..=0);
    for r in 4..=6 {
        for c in 4..=6 {
            mask.set(r, c, true);
        }
    }
    let before = multi_component_warnings();
    let contour = trace_contour(&mask).unwrap();
    assert_eq!(contour.points[0], (4, 4));
    assert_eq!(contour.len(), 8);
    assert!(multi_component_warnings() > before);
}

#[test]
fn uniform_square_lands_on_pixels() {
    let c = trace_contour(&block(4, 4, 1..=2, 1..=2)).unwrap();
    let s = uniform_sample(&c, 4, 0).unwrap();
    assert_eq!(s.points, as_f64(&c.points));
    assert_eq!(s.pad_count, 0);
    assert_eq!(s.sampling, Sampling::Uniform);
}

#[test]
fn uniform_single_pixel_pads() {
    let c = ClosedContour { points: vec![(3, 5)] };
    let s = uniform_sample(&c, 5, 9).unwrap();
    assert_eq!(s.points, vec![(3.0, 5.0); 5]);
    assert_eq!(s.pad_count, 4);
}

#[test]
fn uniform_on_equal_spaced_ring_returns_the_ring() {
    for (h, w) in [(3, 3), (3, 5), (4, 7)] {
        let c = trace_contour(&block(h, w, 0..=h - 1, 0..=w - 1)).unwrap();
        assert!(c.segment_lengths().iter().all(|&l| l == 1.0));
        let s = uniform_sample(&c, c.len(), 0).unwrap();
        for (p, q) in s.points.iter().zip(as_f64(&c.points)) {
            assert!((p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_rejects_zero_k() {
    let c = ClosedContour { points: vec![(0, 0)] };
    assert!(uniform_sample(&c, 0, 0).is_err());
}

#[test]
fn corner_rectangle_gives_its_corners() {
    let c = trace_contour(&block(20, 20, 3..=9, 2..=15)).unwrap();
    let s = corner_sample(&c, 4, 1.0, 0).unwrap();
    assert_eq!(s.points, vec![(3.0, 2.0), (3.0, 15.0), (9.0, 15.0), (9.0, 2.0)]);
    assert_eq!((s.pad_count, s.sampling), (0, Sampling::Corner));
}

#[test]
fn corner_segment_gives_both_endpoints() {
    let c = trace_contour(&BinaryMask::from_pixels(4, 4, &[(1, 1), (1, 2)])).unwrap();
    let s = corner_sample(&c, 2, 1.0, 0).unwrap();
    let mut got = s.points.clone();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, vec![(1.0, 1.0), (1.0, 2.0)]);
}

#[test]
fn corner_circle_points_stay_on_the_circle() {
    let spec = ShapeSpec {
        kind: ShapeKind::Circle,
        center: (25.0, 25.0),
        scale: 20.0,
        aspect: 1.0,
        rotation: 0.0,
        class_id: 0,
    };
    let c = trace_contour(&rasterize_shape(&spec, 51, 51).unwrap()).unwrap();
    let s = corner_sample(&c, 8, 0.5, 0).unwrap();
    assert_eq!(s.points.len(), 8);
    for &p in &s.points {
        let nearest = c
            .points
            .iter()
            .map(|&(r, col)| (p.0 - r as f64).hypot(p.1 - col as f64))
            .fold(f64::INFINITY, f64::min);
        assert!(nearest <= 1.0);
        let radius = (p.0 - 25.0).hypot(p.1 - 25.0);
        assert!((radius - 20.0).abs() <= 1.0, "radius {radius}");
    }
}

#[test]
fn corner_rejects_non_positive_epsilon() {
    let c = ClosedContour { points: vec![(0, 0)] };
    assert!(corner_sample(&c, 1, 0.0, 0).is_err());
}

#[test]
fn centroid_examples() {
    assert_eq!(centroid(&block(4, 4, 1..=2, 1..=2)).unwrap(), (1.5, 1.5));
    assert_eq!(centroid(&BinaryMask::from_pixels(8, 8, &[(3, 5)])).unwrap(), (3.0, 5.0));
    let (r, c) = centroid(&BinaryMask::from_pixels(2, 2, &[(0, 0), (1, 0), (1, 1)])).unwrap();
    assert!((r - 2.0 / 3.0).abs() < 1e-12 && (c - 1.0 / 3.0).abs() < 1e-12);
    assert!(matches!(centroid(&BinaryMask::new(2, 2)), Err(Error::EmptyMask)));
}

#[test]
fn encode_corner_and_center() {
    let region = Rect::new(4.0, 8.0, 20.0, 12.0);
    let l = encode_heatmaps(&[(4.0, 8.0), region.center()], &region, 56).unwrap();
    assert_eq!(l.cells, vec![(0, 0), (28, 28)]);
}

#[test]
fn encode_one_hot_total() {
    let region = Rect::new(0.0, 0.0, 10.0, 10.0);
    let pts: Vec<(f64, f64)> = (0..6).map(|i| (i as f64 * 1.5, 9.0 - i as f64)).collect();
    let grid = encode_heatmaps(&pts, &region, 56).unwrap().to_tensor();
    assert_eq!(grid.shape(), &[6, 56, 56]);
    assert_eq!(grid.sum(), 6.0);
}

#[test]
fn encode_outside_box_is_an_error() {
    let region = Rect::new(0.0, 0.0, 10.0, 10.0);
    assert!(matches!(
        encode_heatmaps(&[(10.5, 2.0)], &region, 56),
        Err(Error::OutOfBox { .. })
    ));
}

#[test]
fn decode_uniform_grid_picks_first_cell() {
    let region = Rect::new(2.0, 3.0, 28.0, 14.0);
    let pts = decode_heatmaps(&Tensor::full(&[3, 28, 28], 0.7), &region).unwrap();
    assert_eq!(pts, vec![(2.5, 3.25); 3]);
}

#[test]
fn decode_single_peak() {
    let region = Rect::new(0.0, 0.0, 56.0, 56.0);
    let mut grid = Tensor::zeros(&[1, 56, 56]);
    grid.data_mut()[10 * 56 + 20] = 5.0;
    assert_eq!(decode_heatmaps(&grid, &region).unwrap(), vec![(10.5, 20.5)]);
}

#[test]
fn polygon_square_corners_refill_the_block() {
    let mask = points_to_mask(&[(1.0, 1.0), (1.0, 2.0), (2.0, 2.0), (2.0, 1.0)], 4, 4).unwrap();
    assert_eq!(mask, block(4, 4, 1..=2, 1..=2));
}

#[test]
fn polygon_collinear_points_keep_only_the_outline() {
    let mask = points_to_mask(&[(1.0, 1.0), (1.0, 3.0), (1.0, 5.0)], 4, 8).unwrap();
    assert_eq!(mask, block(4, 8, 1..=1, 1..=5));
}

#[test]
fn polygon_needs_three_points() {
    assert!(matches!(
        points_to_mask(&[(0.0, 0.0), (1.0, 1.0)], 4, 4),
        Err(Error::DegeneratePolygon(2))
    ));
}

#[test]
fn dense_uniform_contour_refills_convex_masks() {
    for seed in 0..20 {
        let mask = shape_mask(seed, true);
        let c = trace_contour(&mask).unwrap();
        let s = uniform_sample(&c, 200, seed).unwrap();
        let refilled = points_to_mask(&s.points, mask.height(), mask.width()).unwrap();
        let iou = refilled.iou(&mask);
        assert!(iou >= 0.9, "seed {seed}: IoU {iou}");
    }
}

#[test]
fn make_labels_attaches_centroid_when_asked() {
    let mask = block(8, 8, 2..=5, 1..=4);
    let config = LabelConfig {
        k: 6,
        ..LabelConfig::default()
    };
    let set = make_labels(&mask, &config).unwrap();
    assert_eq!(set.center, Some((3.5, 2.5)));
    assert_eq!(set.keypoints().len(), 7);
    let set = make_labels(
        &mask,
        &LabelConfig {
            use_center: false,
            ..config
        },
    )
    .unwrap();
    assert_eq!(set.center, None);
}

#[test]
fn uniform_matches_dense_oracle_on_100_masks() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mask = shape_mask(seed, false);
        let c = trace_contour(&mask).unwrap();
        let k = (8 + seed as usize % 93).min(c.distinct_pixels());
        let s = uniform_sample(&c, k, seed).unwrap();
        assert_eq!(s.pad_count, 0);
        for (p, (_, q)) in s.points.iter().zip(dense_arc_oracle(&c, k)) {
            worst = worst.max((p.0 - q.0).hypot(p.1 - q.1));
        }
    }
    assert!(worst < 1e-9, "worst deviation {worst:e}");
}

#[test]
fn refill_iou_grows_with_k_on_convex_masks() {
    for seed in 0..20 {
        let mask = shape_mask(1000 + seed, true);
        let c = trace_contour(&mask).unwrap();
        let ious: Vec<f64> = [8, 16, 32, 64]
            .iter()
            .map(|&k| {
                let s = uniform_sample(&c, k, 0).unwrap();
                points_to_mask(&s.points, mask.height(), mask.width())
                    .unwrap()
                    .iou(&mask)
            })
            .collect();
        assert!(ious.windows(2).all(|w| w[1] >= w[0]), "seed {seed}: {ious:?}");
    }
}

proptest! {
    #[test]
    fn traced_pixels_are_boundary_pixels(seed in any::<u64>()) {
        let mask = shape_mask(seed, false);
        let c = trace_contour(&mask).unwrap();
        prop_assert_eq!(c.points[0], mask.pixels().next().unwrap());
        for (i, &(r, col)) in c.points.iter().enumerate() {
            prop_assert!(mask.get(r, col));
            let (r, col) = (r as isize, col as isize);
            let exposed = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dr, dc)| !mask.get_signed(r + dr, col + dc));
            prop_assert!(exposed);
            let next = c.points[(i + 1) % c.len()];
            let step = (next.0 as isize - r).abs().max((next.1 as isize - col).abs());
            prop_assert!(c.len() == 1 || step == 1);
        }
    }

    #[test]
    fn uniform_points_lie_on_the_contour(seed in any::<u64>(), k in 1usize..150) {
        let c = trace_contour(&shape_mask(seed, false)).unwrap();
        let s = uniform_sample(&c, k, seed).unwrap();
        for &p in &s.points {
            prop_assert!(polyline_distance(&c, p) <= 0.5);
        }
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), k in 1usize..150, corner in any::<bool>()) {
        let mask = shape_mask(seed, false);
        let config = LabelConfig {
            k,
            sampling: if corner { Sampling::Corner } else { Sampling::Uniform },
            seed,
            ..LabelConfig::default()
        };
        prop_assert_eq!(make_labels(&mask, &config).unwrap(), make_labels(&mask, &config).unwrap());
    }

    #[test]
    fn sampled_count_is_always_k(seed in any::<u64>(), k in 1usize..300, corner in any::<bool>()) {
        let c = trace_contour(&shape_mask(seed, false)).unwrap();
        let s = if corner { corner_sample(&c, k, 2.0, seed) } else { uniform_sample(&c, k, seed) }.unwrap();
        prop_assert_eq!(s.points.len(), k);
        prop_assert!(s.pad_count <= k);
        let distinct = c.distinct_pixels();
        if !corner {
            prop_assert_eq!(s.pad_count, k.saturating_sub(distinct));
        }
        // Padded entries duplicate sampled ones.
        for p in &s.points {
            prop_assert!(polyline_distance(&c, *p) <= 0.5);
        }
    }

    #[test]
    fn heatmap_channels_are_one_hot(seed in any::<u64>(), m in 4usize..60) {
        let mask = shape_mask(seed, false);
        let set = make_labels(&mask, &LabelConfig { k: 12, ..LabelConfig::default() }).unwrap();
        let label = encode_heatmaps(&set.keypoints(), &mask.bbox().unwrap(), m).unwrap();
        let grid = label.to_tensor();
        let plane = m * m;
        for ch in 0..grid.shape()[0] {
            let data = &grid.data()[ch * plane..(ch + 1) * plane];
            prop_assert_eq!(data.iter().sum::<f64>(), 1.0);
            prop_assert!(data.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn decode_inverts_encode_within_a_cell(
        top in -50.0..50.0f64, left in -50.0..50.0f64,
        h in 1.0..80.0f64, w in 1.0..80.0f64,
        m in 1usize..64,
        fracs in prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 1..20),
    ) {
        let region = Rect::new(top, left, h, w);
        let pts: Vec<(f64, f64)> = fracs.iter().map(|&(a, b)| (top + a * h, left + b * w)).collect();
        let decoded = decode_heatmaps(&encode_heatmaps(&pts, &region, m).unwrap().to_tensor(), &region).unwrap();
        let diag = (h / m as f64).hypot(w / m as f64);
        for (p, q) in pts.iter().zip(&decoded) {
            prop_assert!((p.0 - q.0).hypot(p.1 - q.1) <= diag + 1e-9);
        }
    }
}
