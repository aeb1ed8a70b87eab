//! Property suites checked against independent reference implementations.

use std::collections::VecDeque;

use docpipe_core::backends::protocol::{DType, Frame, Tensor};
use docpipe_core::classify::{argmax, softmax};
use docpipe_core::detection::{connected_components, db_soft_binarize, hard_binarize, BinaryMap, DetectionParams, ScoreMaps};
use docpipe_core::geometry::{raster_iou, Polygon};
use docpipe_core::imaging::{
    clahe, clahe_tile_mappings, to_grayscale, upscale_tiled, ClaheParams, ColorImage, GrayImage, IdentityUpscaler,
    TilingParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

proptest! {
    #[test]
    fn grayscale_is_the_rounded_luma(r: u8, g: u8, b: u8) {
        let out = to_grayscale(&ColorImage::filled(1, 1, [r, g, b]).unwrap()).pixels()[0] as f64;
        let exact = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
        prop_assert!((out - exact).abs() <= 0.5 + 1e-9, "{out} vs {exact}");
    }

    #[test]
    fn soft_binarize_monotone(p1 in 0.0..1.0f64, p2 in 0.0..1.0f64, t in 0.0..1.0f64, k in 1.0..100.0f64) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        prop_assert!(db_soft_binarize(lo, t, k) <= db_soft_binarize(hi, t, k));
        // Decreasing in T: swap roles.
        prop_assert!(db_soft_binarize(t, hi, k) <= db_soft_binarize(t, lo, k));
        let v = db_soft_binarize(p1, t, k);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn protocol_round_trip(frame in arb_frame()) {
        prop_assert_eq!(Frame::decode(&frame.encode()).unwrap(), frame);
    }
}

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(1usize..5, 0..=4), any::<bool>(), "[a-z]{1,8}").prop_flat_map(|(shape, is_f32, name)| {
        let n: usize = shape.iter().product();
        let dtype = if is_f32 { DType::F32 } else { DType::U8 };
        prop::collection::vec(any::<u8>(), n * dtype.size())
            .prop_map(move |data| Tensor::new(name.clone(), dtype, shape.clone(), data).unwrap())
    })
}

fn arb_frame() -> impl Strategy<Value = Frame> {
    (
        "[a-z]{1,10}",
        any::<u64>(),
        prop::collection::vec(arb_tensor(), 0..4),
        prop::collection::vec(("[a-z.0-9]{1,8}", ".{0,20}"), 0..4),
    )
        .prop_map(|(op, id, tensors, strings)| {
            let f = tensors.into_iter().fold(Frame::new(op, id), Frame::with_tensor);
            strings.into_iter().fold(f, |f, (k, v)| f.with_string(k, v))
        })
}

#[test]
fn soft_binarize_reference_values() {
    assert!((db_soft_binarize(0.37, 0.37, 50.0) - 0.5).abs() < 1e-9);
    // 1 / (1 + e^-10) to 10 digits: 0.9999546021.
    assert!((db_soft_binarize(0.6, 0.4, 50.0) - 0.9999546021).abs() < 1e-6);
}

#[test]
fn soft_binarize_monotone_1000_cases() {
    let mut rng = StdRng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..1000 {
        let (p, t, k) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.5..100.0));
        let d = rng.gen_range(0.0..0.1);
        if db_soft_binarize(p + d, t, k) < db_soft_binarize(p, t, k) {
            violations += 1;
        }
        if db_soft_binarize(p, t + d, k) > db_soft_binarize(p, t, k) {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

/// Textbook CLAHE tile table: plain loops over the tile, clip, spread, cumulate.
fn reference_tile_lut(img: &GrayImage, x0: usize, y0: usize, w: usize, h: usize, clip: f64) -> Vec<u8> {
    let mut hist = [0u64; 256];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            hist[img.get(x, y) as usize] += 1;
        }
    }
    let n = (w * h) as u64;
    let ceiling = (clip * n as f64 / 256.0).ceil() as u64;
    let excess: u64 = hist.iter().map(|&c| c.saturating_sub(ceiling)).sum();
    for (i, c) in hist.iter_mut().enumerate() {
        *c = (*c).min(ceiling) + excess / 256 + u64::from((i as u64) < excess % 256);
    }
    let mut acc = 0;
    hist.iter()
        .map(|&c| {
            acc += c;
            (255.0 * acc as f64 / n as f64).round() as u8
        })
        .collect()
}

#[test]
fn clahe_gradient_tables_match_reference_and_are_monotone() {
    let img = GrayImage::from_fn(512, 512, |x, _| (x / 2) as u8).unwrap();
    let params = ClaheParams::default();
    let tables = clahe_tile_mappings(&img, &params).unwrap();
    assert_eq!(tables.len(), 8);
    for (r, row) in tables.iter().enumerate() {
        assert_eq!(row.len(), 8);
        for (c, lut) in row.iter().enumerate() {
            let want = reference_tile_lut(&img, c * 64, r * 64, 64, 64, 8.0);
            assert_eq!(lut.as_slice(), want.as_slice(), "tile ({r},{c})");
            assert!(lut.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

#[test]
fn clahe_constant_images_stay_constant() {
    for v in [0u8, 1, 100, 254, 255] {
        let out = clahe(&GrayImage::filled(256, 128, v).unwrap(), &ClaheParams::default()).unwrap();
        let first = out.pixels()[0];
        assert!(out.pixels().iter().all(|&p| p == first), "level {v}");
    }
}

#[test]
fn tiling_identity_over_random_images() {
    let mut rng = StdRng::seed_from_u64(11);
    let params = TilingParams {
        tile_size: 64,
        overlap: 16,
        scale_factor: 1,
    };
    for _ in 0..100 {
        let (w, h) = (rng.gen_range(1..200), rng.gen_range(1..200));
        let pixels: Vec<u8> = (0..w * h).map(|_| rng.gen()).collect();
        let img = GrayImage::new(w, h, pixels).unwrap();
        assert_eq!(upscale_tiled(&img, &params, &IdentityUpscaler).unwrap(), img);
    }
}

fn rect_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let iy = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

#[test]
fn raster_iou_matches_closed_form_for_rectangles() {
    let mut rng = StdRng::seed_from_u64(3);
    let mut r = || {
        [
            rng.gen_range(0.0..50.0),
            rng.gen_range(0.0..50.0),
            rng.gen_range(1.0..50.0),
            rng.gen_range(1.0..50.0),
        ]
    };
    for _ in 0..200 {
        let (a, b) = (r(), r());
        let pa = Polygon::rect(a[0], a[1], a[2], a[3]).unwrap();
        let pb = Polygon::rect(b[0], b[1], b[2], b[3]).unwrap();
        let got = raster_iou(&pa, &pb, 512);
        assert!((got - rect_iou(a, b)).abs() <= 0.02, "{a:?} {b:?}: {got}");
    }
    let unit = Polygon::rect(0.0, 0.0, 1.0, 1.0).unwrap();
    let shifted = Polygon::rect(0.5, 0.0, 1.0, 1.0).unwrap();
    assert!((raster_iou(&unit, &shifted, 512) - 1.0 / 3.0).abs() <= 0.02);
}

/// BFS flood fill with 8-connectivity; returns each pixel's component as a
/// canonical id (the smallest linear index in the component).
fn flood_fill_partition(mask: &BinaryMap) -> Vec<Option<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut id = vec![None; w * h];
    for start in 0..w * h {
        if !mask.data[start] || id[start].is_some() {
            continue;
        }
        let mut queue = VecDeque::from([start]);
        id[start] = Some(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && id[j].is_none() {
                        id[j] = Some(start);
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    id
}

#[test]
fn components_match_flood_fill() {
    let mut rng = StdRng::seed_from_u64(5);
    for trial in 0..50 {
        let density = 0.2 + 0.5 * (trial as f64 / 50.0);
        let data: Vec<bool> = (0..64 * 64).map(|_| rng.gen_bool(density)).collect();
        let mask = BinaryMap::new(64, 64, data);
        let oracle = flood_fill_partition(&mask);
        let labels = connected_components(&mask);

        let mut seen = std::collections::HashMap::new();
        for i in 0..64 * 64 {
            match (oracle[i], labels.labels[i]) {
                (None, 0) => {}
                (Some(root), l) if l > 0 => {
                    // The oracle root and our label must correspond one-to-one.
                    let prev = *seen.entry(l).or_insert(root);
                    assert_eq!(prev, root, "trial {trial}: label {l} spans two components");
                }
                other => panic!("trial {trial}: pixel {i} mismatch {other:?}"),
            }
        }
        let roots: std::collections::HashSet<_> = oracle.iter().flatten().collect();
        assert_eq!(roots.len(), labels.count as usize);
        assert_eq!(seen.len(), labels.count as usize);
        let mut used: Vec<u32> = seen.keys().copied().collect();
        used.sort_unstable();
        assert!(used.iter().enumerate().all(|(i, &l)| l as usize == i + 1), "labels not contiguous");
    }
}

#[test]
fn threshold_map_only_removes_pixels() {
    let mut rng = StdRng::seed_from_u64(9);
    let params = DetectionParams::default();
    for _ in 0..20 {
        let prob: Vec<f32> = (0..32 * 32).map(|_| rng.gen()).collect();
        let thresh: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(0.25..1.0)).collect();
        let with = hard_binarize(&ScoreMaps::new(32, 32, prob.clone(), Some(thresh)).unwrap(), &params).unwrap();
        let without = hard_binarize(&ScoreMaps::new(32, 32, prob, None).unwrap(), &params).unwrap();
        assert!(with.data.iter().zip(&without.data).all(|(&a, &b)| !a || b));
    }
}

#[test]
fn softmax_properties() {
    let mut rng = StdRng::seed_from_u64(13);
    for _ in 0..1000 {
        let n = rng.gen_range(2..8);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let probs = softmax(&logits);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(probs.iter().all(|&p| p > 0.0));
        let c = rng.gen_range(-100.0..100.0);
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        assert_eq!(argmax(&softmax(&shifted)), argmax(&probs));
        assert_eq!(argmax(&shifted), argmax(&logits));
    }
}
