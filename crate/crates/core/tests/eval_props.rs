use attnmap_core::eval::{
    aggregate, argmax, box_iou, evaluate_sample, pointing_game, quantile_sorted,
    threshold_top_percentile, tightest_bbox, AnnotationBox, BinaryMask, EvalOptions, EvalResult,
    PixelPos,
};
use attnmap_core::saliency::Method;
use attnmap_core::Tensor;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

fn boxes(max: usize) -> impl Strategy<Value = AnnotationBox> {
    (0..max, 0..max, 1..=max, 1..=max).prop_map(move |(x0, y0, w, h)| {
        let x0 = x0.min(max - 1);
        let y0 = y0.min(max - 1);
        AnnotationBox::new(x0, y0, (x0 + w).min(max), (y0 + h).min(max)).unwrap()
    })
}

/// Counts pixels of a `size x size` canvas covered by each box.
fn brute_iou(a: &AnnotationBox, b: &AnnotationBox, size: usize) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for row in 0..size {
        for col in 0..size {
            let p = PixelPos { row, col };
            let (ia, ib) = (a.contains(p), b.contains(p));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

fn random_map(rng: &mut StdRng, n: usize) -> Tensor<f64> {
    Tensor::from_fn([n, n], |_| rng.gen_range(-1.0..1.0))
}

/// Distinct values in random order.
fn distinct_map(rng: &mut StdRng, h: usize, w: usize) -> Tensor<f64> {
    let mut vals: Vec<f64> = (0..h * w).map(|i| i as f64 * 0.5 - 3.0).collect();
    vals.shuffle(rng);
    Tensor::new([h, w], vals).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn box_iou_equals_pixel_count(a in boxes(40), b in boxes(40)) {
        let iou = box_iou(&a, &b);
        prop_assert_eq!(iou, brute_iou(&a, &b, 40));
        prop_assert_eq!(iou, box_iou(&b, &a));
        prop_assert_eq!(box_iou(&a, &a), 1.0);
        prop_assert!((0.0..=1.0).contains(&iou));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tightest_box_equals_scan(seed in any::<u64>(), h in 1usize..30, w in 1usize..30, density in 0.01f64..0.5) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        let forced = rng.gen_range(0..h * w);
        bits[forced] = true;
        let mask = BinaryMask::new(h, w, bits.clone()).unwrap();
        let set: Vec<(usize, usize)> = (0..h * w).filter(|&i| bits[i]).map(|i| (i / w, i % w)).collect();
        let want = AnnotationBox::new(
            set.iter().map(|p| p.1).min().unwrap(),
            set.iter().map(|p| p.0).min().unwrap(),
            set.iter().map(|p| p.1).max().unwrap() + 1,
            set.iter().map(|p| p.0).max().unwrap() + 1,
        ).unwrap();
        prop_assert_eq!(tightest_bbox(&mask).unwrap(), want);
    }

    #[test]
    fn distinct_map_mask_size(seed in any::<u64>(), h in 1usize..40, w in 1usize..40, k in 0.5f64..99.5) {
        let mut rng = StdRng::seed_from_u64(seed);
        let map = distinct_map(&mut rng, h, w);
        let mask = threshold_top_percentile(&map, k).unwrap();
        let n = h * w;
        let want = ((k / 100.0 * n as f64).ceil() as usize).max(1);
        prop_assert_eq!(mask.count(), want);
        let five = threshold_top_percentile(&map, 5.0).unwrap();
        prop_assert_eq!(five.count(), ((0.05 * n as f64).ceil() as usize).max(1));
    }

    #[test]
    fn pointing_matches_full_scan(seed in any::<u64>(), n in 1usize..30, b in boxes(30)) {
        let mut rng = StdRng::seed_from_u64(seed);
        // coarse values so ties happen
        let map = Tensor::<f64>::from_fn([n, n], |_| rng.gen_range(0..5) as f64);
        let (hit, pos) = pointing_game(&map, &b).unwrap();
        let mut best = (0, 0);
        for r in 0..n {
            for c in 0..n {
                if map.get(&[r, c]).unwrap() > map.get(&[best.0, best.1]).unwrap() {
                    best = (r, c);
                }
            }
        }
        prop_assert_eq!((pos.row, pos.col), best);
        prop_assert_eq!(hit, b.x0 <= best.1 && best.1 < b.x1 && b.y0 <= best.0 && best.0 < b.y1);
    }

    #[test]
    fn positive_affine_invariance(seed in any::<u64>(), a in 1e-6f64..=10.0, b in -5.0f64..=5.0, gt in boxes(48)) {
        let mut rng = StdRng::seed_from_u64(seed);
        let map = random_map(&mut rng, 48);
        let moved = map.map(|v| a * v + b);
        let opts = EvalOptions::default();
        let x = evaluate_sample(&map, &gt, &opts).unwrap();
        let y = evaluate_sample(&moved, &gt, &opts).unwrap();
        prop_assert_eq!(x.hit, y.hit);
        prop_assert_eq!(x.argmax, y.argmax);
        prop_assert_eq!(x.predicted_box, y.predicted_box);
        prop_assert_eq!(x.iou, y.iou);
        prop_assert_eq!(threshold_top_percentile(&map, 5.0).unwrap(), threshold_top_percentile(&moved, 5.0).unwrap());
    }

    #[test]
    fn evaluate_composes_stages(seed in any::<u64>(), gt in boxes(32)) {
        let mut rng = StdRng::seed_from_u64(seed);
        let map = random_map(&mut rng, 32);
        let s = evaluate_sample(&map, &gt, &EvalOptions::default()).unwrap();

        let mut sorted = map.to_vec();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let cut = sorted[(0.05f64 * 1024.0).ceil() as usize - 1];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..32 {
            for c in 0..32 {
                if map.get(&[r, c]).unwrap() >= cut {
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c + 1);
                    y1 = y1.max(r + 1);
                }
            }
        }
        let pred = AnnotationBox::new(x0, y0, x1, y1).unwrap();
        prop_assert_eq!(s.predicted_box, pred);
        prop_assert_eq!(s.iou, brute_iou(&pred, &gt, 32));
        prop_assert_eq!(s.argmax, argmax(&map).unwrap());
    }
}

#[test]
fn worked_iou_identities() {
    let a = AnnotationBox::new(0, 0, 10, 10).unwrap();
    let b = AnnotationBox::new(5, 5, 15, 15).unwrap();
    assert_eq!(box_iou(&a, &a), 1.0);
    assert_eq!(
        box_iou(&a, &AnnotationBox::new(20, 20, 30, 30).unwrap()),
        0.0
    );
    assert!((box_iou(&a, &b) - 1.0 / 7.0).abs() <= 1e-9);
    assert_eq!(box_iou(&a, &b), brute_iou(&a, &b, 15));
}

#[test]
fn quartiles_match_sort_oracle() {
    let mut rng = StdRng::seed_from_u64(77);
    let ious: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b = AnnotationBox::new(0, 0, 1, 1).unwrap();
    let results: Vec<EvalResult> = ious
        .iter()
        .enumerate()
        .map(|(i, &iou)| EvalResult {
            image: format!("{i}"),
            method: Method::Chefer,
            hit: i % 3 == 0,
            iou,
            argmax: PixelPos { row: 0, col: 0 },
            predicted_box: b,
            gt_box: b,
        })
        .collect();
    let summary = &aggregate(&results).unwrap()[&Method::Chefer];

    let mut sorted = ious.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // 49 gaps: q1 at 12.25, median at 24.5, q3 at 36.75
    let q1 = sorted[12] + 0.25 * (sorted[13] - sorted[12]);
    let med = sorted[24] + 0.5 * (sorted[25] - sorted[24]);
    let q3 = sorted[36] + 0.75 * (sorted[37] - sorted[36]);
    assert_eq!(summary.iou_q1, q1);
    assert_eq!(summary.iou_median, med);
    assert_eq!(summary.iou_q3, q3);
    assert_eq!(summary.iou_min, sorted[0]);
    assert_eq!(summary.iou_max, sorted[49]);
    assert_eq!(summary.count, 50);
    assert_eq!(summary.hits, 17);
    assert_eq!(summary.pointing_accuracy, 17.0 / 50.0);
    assert_eq!(quantile_sorted(&sorted, 0.5), med);
}
