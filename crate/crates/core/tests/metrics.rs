use a2o_core::curve::NUM_CLASSES;
use a2o_core::metrics::{
    assd, boundary, class_mask, dsc, iou, score, squared_distance_field, ClassScores, EvalReport,
};
use proptest::prelude::*;

/// Foreground pixels with a background 4-neighbor, out-of-image neighbors
/// counting as background.
fn oracle_boundary(m: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !m[i * w + j] {
                continue;
            }
            let neighbors = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            if neighbors
                .iter()
                .any(|&(a, b)| a >= h || b >= w || !m[a * w + b])
            {
                out.push((i, j));
            }
        }
    }
    out
}

fn nearest(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter()
        .map(|&(a, b)| {
            let (di, dj) = (p.0 as f64 - a as f64, p.1 as f64 - b as f64);
            di * di + dj * dj
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// All-pairs ASSD.
fn oracle_assd(p: &[bool], g: &[bool], h: usize, w: usize) -> Option<f64> {
    let (bp, bg) = (oracle_boundary(p, h, w), oracle_boundary(g, h, w));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let sum = bp.iter().map(|&x| nearest(x, &bg)).sum::<f64>()
        + bg.iter().map(|&x| nearest(x, &bp)).sum::<f64>();
    Some(sum / (bp.len() + bg.len()) as f64)
}

fn oracle_counts(p: &[bool], g: &[bool]) -> (f64, f64) {
    let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count() as f64;
    let (np, ng) = (
        p.iter().filter(|a| **a).count() as f64,
        g.iter().filter(|a| **a).count() as f64,
    );
    if np + ng == 0.0 {
        return (100.0, 100.0);
    }
    (200.0 * inter / (np + ng), 100.0 * inter / (np + ng - inter))
}

fn square(h: usize, w: usize, top: usize, left: usize, side: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for i in top..top + side {
        for j in left..left + side {
            m[i * w + j] = true;
        }
    }
    m
}

fn blobby(h: usize, w: usize) -> impl Strategy<Value = Vec<bool>> {
    // union of a few rectangles, sometimes empty
    prop::collection::vec((0..h, 0..w, 1..h / 2 + 1, 1..w / 2 + 1), 0..4).prop_map(move |rects| {
        let mut m = vec![false; h * w];
        for (i0, j0, rh, rw) in rects {
            for i in i0..(i0 + rh).min(h) {
                for j in j0..(j0 + rw).min(w) {
                    m[i * w + j] = true;
                }
            }
        }
        m
    })
}

fn mask_pair() -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (2usize..=64, 2usize..=64)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), blobby(h, w), blobby(h, w)))
}

#[test]
fn identical_and_disjoint_masks() {
    let a = square(8, 8, 1, 1, 3);
    let b = square(8, 8, 5, 5, 3);
    assert_eq!((dsc(&a, &a).unwrap(), iou(&a, &a).unwrap()), (100.0, 100.0));
    assert_eq!((dsc(&a, &b).unwrap(), iou(&a, &b).unwrap()), (0.0, 0.0));
    assert_eq!(assd(&a, &a, 8, 8).unwrap(), Some(0.0));
}

#[test]
fn half_overlapping_squares() {
    // 4x4 squares shifted by two columns share half their area
    let a = square(10, 10, 2, 1, 4);
    let b = square(10, 10, 2, 3, 4);
    assert!((dsc(&a, &b).unwrap() - 50.0).abs() <= 0.01);
    assert!((iou(&a, &b).unwrap() - 100.0 / 3.0).abs() <= 0.01);
}

#[test]
fn lines_three_rows_apart() {
    let (h, w) = (12, 20);
    let mut a = vec![false; h * w];
    let mut b = vec![false; h * w];
    for j in 0..w {
        a[4 * w + j] = true;
        b[7 * w + j] = true;
    }
    assert_eq!(assd(&a, &b, h, w).unwrap(), Some(3.0));
}

#[test]
fn empty_conventions() {
    let e = vec![false; 25];
    let f = square(5, 5, 1, 1, 2);
    assert_eq!((dsc(&e, &e).unwrap(), iou(&e, &e).unwrap()), (100.0, 100.0));
    assert_eq!((dsc(&e, &f).unwrap(), iou(&f, &e).unwrap()), (0.0, 0.0));
    assert_eq!(assd(&e, &f, 5, 5).unwrap(), None);
    assert_eq!(assd(&e, &e, 5, 5).unwrap(), None);
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(dsc(&[true; 4], &[true; 5]).is_err());
    assert!(iou(&[true; 4], &[true; 5]).is_err());
    assert!(assd(&[true; 4], &[true; 4], 3, 3).is_err());
}

#[test]
fn report_macro_means_and_csv() {
    let mut r = EvalReport::default();
    let s = |d: f64, a: Option<f64>| ClassScores {
        dsc: d,
        iou: d / (200.0 - d) * 100.0,
        assd: a,
    };
    r.push(
        "a",
        [s(100.0, Some(0.0)), s(50.0, Some(2.0)), s(100.0, None)],
    );
    r.push("b", [s(0.0, None), s(50.0, Some(4.0)), s(100.0, None)]);
    r.finish();
    assert_eq!(r.classes[0].dsc, 50.0);
    assert_eq!(r.classes[0].skipped, 1);
    assert_eq!(r.classes[1].assd, Some(3.0));
    assert_eq!(r.classes[2].assd, None);
    assert!((r.mean.dsc - 200.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.mean.assd, Some(1.5));
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sample_id,class,dsc,iou,assd");
    assert_eq!(lines.len(), 1 + 2 * NUM_CLASSES + NUM_CLASSES + 1);
    assert_eq!(lines[1], "a,ridge,100.0000,100.0000,0.0000");
    assert_eq!(lines[4], "b,ridge,0.0000,0.0000,");
    assert!(lines.last().unwrap().starts_with("mean,all,66.6667,"));
}

#[test]
fn class_mask_selects_one_label() {
    let m = [0u8, 1, 2, 3, 2];
    assert_eq!(class_mask(&m, 1), vec![false, false, true, false, true]);
}

#[test]
fn distance_field_on_a_single_point() {
    let f = squared_distance_field(&[(1, 2)], 3, 4);
    for i in 0..3 {
        for j in 0..4 {
            let d = (i as f64 - 1.0).powi(2) + (j as f64 - 2.0).powi(2);
            assert_eq!(f[i * 4 + j], d);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_bruteforce((h, w, p, g) in mask_pair()) {
        prop_assert_eq!(boundary(&p, h, w).unwrap(), oracle_boundary(&p, h, w));
        prop_assert_eq!(assd(&p, &g, h, w).unwrap(), oracle_assd(&p, &g, h, w));
        let (d, i) = oracle_counts(&p, &g);
        prop_assert_eq!(dsc(&p, &g).unwrap(), d);
        prop_assert_eq!(iou(&p, &g).unwrap(), i);
    }

    #[test]
    fn metrics_are_symmetric((h, w, p, g) in mask_pair()) {
        prop_assert_eq!(dsc(&p, &g).unwrap(), dsc(&g, &p).unwrap());
        prop_assert_eq!(iou(&p, &g).unwrap(), iou(&g, &p).unwrap());
        let (a, b) = (assd(&p, &g, h, w).unwrap(), assd(&g, &p, h, w).unwrap());
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0)),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn dice_iou_identity((h, w, p, g) in mask_pair()) {
        let s = score(&p, &g, h, w).unwrap();
        let (d, i) = (s.dsc / 100.0, s.iou / 100.0);
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
        prop_assert!(s.dsc >= s.iou);
        prop_assert!((0.0..=100.0).contains(&s.dsc));
        if let Some(a) = s.assd {
            prop_assert!(a >= 0.0);
        }
    }
}
