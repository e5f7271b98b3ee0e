use csdn::data::generate_dataset;
use csdn::metrics::{
    dsc, evaluate, evaluate_oracle, fps_benchmark, hausdorff, hd95, iou, region_masks, Mask, MetricsReport, Region,
    CSV_HEADER,
};
use csdn::{Csdn, LabelMap, NetworkConfig};
use proptest::prelude::*;

/// Pixels of `m` with any 4-neighbour off-mask or off-image.
fn oracle_boundary(m: &[Vec<bool>]) -> Vec<(i64, i64)> {
    let (h, w) = (m.len() as i64, m[0].len() as i64);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m[y as usize][x as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-pairs HD95 in pixel units.
fn oracle_hd95(a: &[Vec<bool>], b: &[Vec<bool>]) -> (f64, f64) {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap()
    };
    let mut d: Vec<f64> = ba.iter().map(|p| (nearest(p, &bb) as f64).sqrt()).collect();
    d.extend(bb.iter().map(|p| (nearest(p, &ba) as f64).sqrt()));
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    let j = (i + 1).min(d.len() - 1);
    (d[i] + frac * (d[j] - d[i]), *d.last().unwrap())
}

fn to_mask(rows: &[Vec<bool>]) -> Mask {
    let (h, w) = (rows.len(), rows[0].len());
    Mask::new(h, w, rows.iter().flatten().copied().collect()).unwrap()
}

fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Vec<Vec<bool>> {
    (0..h).map(|y| (0..w).map(|x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)).collect()).collect()
}

#[test]
fn offset_squares_match_brute_force() {
    let a = square(24, 24, 5, 5, 10);
    let b = square(24, 24, 5, 8, 10);
    let got = hd95(&to_mask(&a), &to_mask(&b), 0.02).unwrap();
    assert_eq!(got, oracle_hd95(&a, &b).0 * 0.02);
    assert!(got > 0.0);
}

#[test]
fn hand_counted_overlap() {
    let a = to_mask(&square(4, 5, 1, 1, 2));
    let b = to_mask(&square(4, 5, 1, 2, 2));
    assert_eq!(dsc(&a, &b).unwrap(), 0.5);
    let i = iou(&a, &b).unwrap();
    assert!((i - 1.0 / 3.0).abs() < 1e-15);
    assert!((2.0 * i / (1.0 + i) - 0.5).abs() < 1e-9);
}

fn mask_pair(max: usize) -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<Vec<bool>>)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        let grid = move || proptest::collection::vec(proptest::collection::vec(prop::bool::weighted(0.4), w), h);
        (grid(), grid())
    })
}

fn nonempty(m: &[Vec<bool>]) -> bool {
    m.iter().flatten().any(|&v| v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hd95_equals_brute_force((a, b) in mask_pair(32)) {
        prop_assume!(nonempty(&a) && nonempty(&b));
        let (ma, mb) = (to_mask(&a), to_mask(&b));
        let (want95, want_max) = oracle_hd95(&a, &b);
        prop_assert_eq!(hd95(&ma, &mb, 1.0).unwrap(), want95);
        prop_assert_eq!(hausdorff(&ma, &mb, 1.0).unwrap(), want_max);
        prop_assert!(hd95(&ma, &mb, 1.0).unwrap() <= hausdorff(&ma, &mb, 1.0).unwrap());
    }

    #[test]
    fn symmetric_and_dice_iou_identity((a, b) in mask_pair(32)) {
        let (ma, mb) = (to_mask(&a), to_mask(&b));
        let (d, i) = (dsc(&ma, &mb).unwrap(), iou(&ma, &mb).unwrap());
        prop_assert_eq!(d, dsc(&mb, &ma).unwrap());
        prop_assert_eq!(i, iou(&mb, &ma).unwrap());
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&i));
        if nonempty(&a) && nonempty(&b) {
            prop_assert_eq!(hd95(&ma, &mb, 0.02).unwrap(), hd95(&mb, &ma, 0.02).unwrap());
        }
    }

    #[test]
    fn translation_invariance((a, b) in mask_pair(20), dy in 0usize..8, dx in 0usize..8) {
        // Embed both masks in a larger canvas so the shift never clips, and
        // pad by one so the image border does not change which pixels are exposed.
        let (h, w) = (a.len(), a[0].len());
        let place = |m: &[Vec<bool>], oy: usize, ox: usize| -> Mask {
            Mask::from_fn(h + 10, w + 10, |y, x| {
                y > oy && x > ox && y - oy - 1 < h && x - ox - 1 < w && m[y - oy - 1][x - ox - 1]
            })
        };
        let (a0, b0, a1, b1) = (place(&a, 0, 0), place(&b, 0, 0), place(&a, dy, dx), place(&b, dy, dx));
        prop_assert_eq!(dsc(&a0, &b0).unwrap(), dsc(&a1, &b1).unwrap());
        prop_assert_eq!(iou(&a0, &b0).unwrap(), iou(&a1, &b1).unwrap());
        if nonempty(&a) && nonempty(&b) {
            prop_assert_eq!(hd95(&a0, &b0, 0.02).unwrap(), hd95(&a1, &b1, 0.02).unwrap());
        }
    }
}

#[test]
fn mask_definitions_on_two_class_label() {
    let l = LabelMap::new(1, 2, 3, vec![1, 2, 1, 1, 1, 2]).unwrap();
    let (lumen, eem) = region_masks(&l).unwrap();
    assert_eq!(eem.count(), 6);
    assert!(lumen.data.iter().zip(&eem.data).all(|(&l, &e)| !l || e));
}

#[test]
fn ground_truth_against_itself() {
    let ds = generate_dataset(0, 4, 64, 3).unwrap();
    let r = evaluate_oracle(&ds.samples).unwrap();
    for region in Region::ALL {
        let s = r.region(region);
        assert_eq!((s.dsc, s.iou, s.hd95_mm, s.hd95_excluded), (1.0, 1.0, Some(0.0), 0));
    }
    assert_eq!(r.to_csv().lines().next().unwrap(), CSV_HEADER);
    assert_eq!(r.to_csv().lines().count(), 1 + 8);
}

#[test]
fn untrained_network_reports() {
    let ds = generate_dataset(0, 3, 64, 4).unwrap();
    let net = Csdn::<f32>::new(NetworkConfig::tiny(), 1).unwrap();
    let r: MetricsReport = evaluate(&net, &ds.samples, 2).unwrap();
    assert_eq!(r.samples.len(), 6);
    for m in &r.samples {
        assert!((0.0..=1.0).contains(&m.dsc));
        assert!(m.hd95_mm.is_none_or(|v| v >= 0.0));
    }
    assert!(evaluate(&net, &[], 2).is_err());
}

#[test]
fn benchmark_ordering_and_limits() {
    let net = Csdn::<f32>::new(NetworkConfig::tiny(), 1).unwrap();
    let t = fps_benchmark(&net, (64, 64), 1, 1, 10).unwrap();
    assert!(t.fps > 0.0 && t.p95_ms >= t.p50_ms);
    assert!(fps_benchmark(&net, (64, 64), 1, 1, 5).is_err());
    assert!(fps_benchmark(&net, (64, 64), 1, 0, 10).is_err());
}

#[test]
fn larger_inputs_are_not_faster() {
    let net = Csdn::<f32>::new(NetworkConfig::small(), 1).unwrap();
    let small = fps_benchmark(&net, (128, 128), 1, 2, 10).unwrap();
    let large = fps_benchmark(&net, (128, 256), 1, 2, 10).unwrap();
    assert!(large.fps <= small.fps, "{} vs {}", large.fps, small.fps);
}
