mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use urbanvit::geo::{BBox, Point};
use urbanvit::poi::{
    auc, divide_by_four, fit_binary_classifier, fit_poi_logit, logit_gradient, logit_loglik,
    poi_scores, tertile_labels, Class, PoiCategory, PoiLayer,
};
use urbanvit::raster::ImageletId;

fn grid_imagelets(n: usize) -> Vec<(ImageletId, BBox)> {
    (0..n)
        .map(|i| {
            let x = i as f64 * 640.0;
            (
                ImageletId {
                    city: "c".into(),
                    row: 0,
                    col: i,
                },
                BBox {
                    min_x: x,
                    min_y: 0.0,
                    max_x: x + 640.0,
                    max_y: 640.0,
                },
            )
        })
        .collect()
}

#[test]
fn ten_imagelet_scores_span_unit_range() {
    let ims = grid_imagelets(10);
    let mut r = rng(10);
    let mut points = Vec::new();
    for (i, (_, b)) in ims.iter().enumerate() {
        for c in PoiCategory::ALL {
            for _ in 0..(i * (c.index() + 1)) % 7 {
                points.push((
                    Point::new(
                        r.random_range(b.min_x..b.max_x),
                        r.random_range(b.min_y..b.max_y),
                    ),
                    c,
                ));
            }
        }
    }
    let s = poi_scores(&ims, &PoiLayer { points });
    for c in 0..3 {
        let lo = s
            .iter()
            .map(|v| v.normalized[c])
            .fold(f64::INFINITY, f64::min);
        let hi = s
            .iter()
            .map(|v| v.normalized[c])
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }
    assert_eq!(s[0].raw, [0.0; 3]);
    let one = s.iter().find(|v| v.counts[0] == 1).unwrap();
    assert!((one.raw[0] - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn uniform_tertiles_hold_a_third_each() {
    let mut r = rng(100);
    let v: Vec<f64> = (0..100).map(|_| r.random()).collect();
    let t = tertile_labels(&v, "v").unwrap();
    assert!(t.count(Class::High).abs_diff(33) <= 2 && t.count(Class::Low).abs_diff(33) <= 2);
    assert!(tertile_labels(&[2.0; 10], "v").is_err());
}

#[test]
fn classifier_auc_extremes() {
    let mut r = rng(500);
    let x: Vec<Vec<f64>> = (0..500)
        .map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        .collect();
    let separable: Vec<bool> = x.iter().map(|p| p[0] > 0.0).collect();
    let rep = fit_binary_classifier("v", &x, &separable, 5, 1).unwrap();
    assert_eq!(rep.auc.unwrap().mean, 1.0);

    let shuffled: Vec<bool> = (0..500).map(|_| r.random()).collect();
    let rep = fit_binary_classifier("v", &x, &shuffled, 5, 1).unwrap();
    assert!((rep.auc.unwrap().mean - 0.5).abs() <= 0.1);
    assert!(fit_binary_classifier("v", &x, &vec![true; 500], 5, 1).is_err());
}

#[test]
fn planted_sustenance_is_significant() {
    let mut r = rng(1000);
    let scores = random_poi_scores(&mut r, 1000, 12);
    let classes: Vec<bool> = scores
        .iter()
        .map(|s| r.random::<f64>() < sigmoid(4.0 * (s.score(PoiCategory::Sustenance) - 0.5)))
        .collect();
    let m = fit_poi_logit("vitality", &classes, &scores).unwrap();
    let sus = m
        .coefficients
        .iter()
        .find(|c| c.name == "sustenance")
        .unwrap();
    assert!(sus.beta > 0.0 && sus.significant, "{sus:?}");
}

#[test]
fn median_threshold_separates_and_is_flagged() {
    let mut r = rng(1001);
    let scores = random_poi_scores(&mut r, 1000, 12);
    let mut s: Vec<f64> = scores
        .iter()
        .map(|v| v.score(PoiCategory::Sustenance))
        .collect();
    s.sort_by(f64::total_cmp);
    let median = 0.5 * (s[499] + s[500]);
    let classes: Vec<bool> = scores
        .iter()
        .map(|v| v.score(PoiCategory::Sustenance) > median)
        .collect();
    let m = fit_poi_logit("vitality", &classes, &scores).unwrap();
    let sus = m
        .coefficients
        .iter()
        .find(|c| c.name == "sustenance")
        .unwrap();
    assert!(m.separated && sus.beta > 0.0, "{m:?}");
}

#[test]
fn null_scores_are_rarely_significant() {
    let mut clean = 0;
    for seed in 0..20 {
        let mut r = rng(2000 + seed);
        let scores = random_poi_scores(&mut r, 1000, 12);
        let classes: Vec<bool> = (0..1000).map(|_| r.random()).collect();
        let m = fit_poi_logit("null", &classes, &scores).unwrap();
        assert!(m.coefficients.iter().all(|c| c.beta.abs() < 1.0));
        if m.coefficients.iter().all(|c| !c.significant) {
            clean += 1;
        }
    }
    assert!(clean >= 18, "{clean}/20");
}

#[test]
fn divide_by_four_values() {
    let mut r = rng(3);
    let scores = random_poi_scores(&mut r, 200, 5);
    let classes: Vec<bool> = (0..200).map(|_| r.random()).collect();
    let mut m = fit_poi_logit("v", &classes, &scores).unwrap();
    for (c, b) in m.coefficients.iter_mut().zip([0.06, 0.0, -0.04]) {
        c.beta = b;
    }
    let e = divide_by_four(&m);
    assert!((e[0].percent - 1.5).abs() < 1e-12);
    assert_eq!(e[1].percent, 0.0);
    assert!((e[2].percent + 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x: Vec<Vec<f64>> = (0..40).map(|_| vec![1.0, r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let y: Vec<bool> = (0..40).map(|_| r.random()).collect();
        let beta: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let g = logit_gradient(&beta, &x, &y);
        for j in 0..3 {
            let h = 1e-5;
            let (mut up, mut dn) = (beta.clone(), beta.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (logit_loglik(&up, &x, &y) - logit_loglik(&dn, &x, &y)) / (2.0 * h);
            prop_assert!((g[j] - fd).abs() <= 1e-6 * g[j].abs().max(1.0));
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms(seed in any::<u64>(), n in 4usize..60) {
        let mut r = rng(seed);
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut l: Vec<bool> = (0..n).map(|_| r.random()).collect();
        l[0] = true;
        l[1] = false;
        let t: Vec<f64> = s.iter().map(|v| v.exp() * 5.0 + 1.0).collect();
        prop_assert!((auc(&s, &l).unwrap() - auc(&t, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn adding_a_poi_never_lowers_raw_score(seed in any::<u64>(), cat in 0usize..3) {
        let mut r = rng(seed);
        let ims = grid_imagelets(4);
        let points: Vec<(Point, PoiCategory)> = (0..30)
            .map(|_| (Point::new(r.random_range(0.0..2560.0), r.random_range(0.0..640.0)), PoiCategory::ALL[r.random_range(0..3)]))
            .collect();
        let before = poi_scores(&ims, &PoiLayer { points: points.clone() });
        let mut more = points;
        more.push((Point::new(r.random_range(0.0..2560.0), r.random_range(0.0..640.0)), PoiCategory::ALL[cat]));
        let after = poi_scores(&ims, &PoiLayer { points: more });
        for (a, b) in before.iter().zip(&after) {
            prop_assert!(b.raw[cat] >= a.raw[cat]);
        }
    }

    #[test]
    fn effects_scale_with_beta(b in -5.0f64..5.0, k in -3.0f64..3.0) {
        let mut r = rng(1);
        let scores = random_poi_scores(&mut r, 50, 4);
        let classes: Vec<bool> = (0..50).map(|i| i % 2 == 0).collect();
        let mut m = fit_poi_logit("v", &classes, &scores).unwrap();
        m.coefficients[0].beta = b;
        let e1 = divide_by_four(&m)[0].percent;
        m.coefficients[0].beta = k * b;
        let e2 = divide_by_four(&m)[0].percent;
        prop_assert!((e2 - k * e1).abs() < 1e-9);
    }

    #[test]
    fn tertile_classes_are_disjoint(seed in any::<u64>(), n in 3usize..200) {
        let mut r = rng(seed);
        let v: Vec<f64> = (0..n).map(|_| r.random_range(0.0..100.0)).collect();
        prop_assume!(v.iter().any(|x| x != &v[0]) && { let mut s = v.clone(); s.sort_by(f64::total_cmp); s.dedup(); s.len() >= 3 });
        let t = tertile_labels(&v, "v").unwrap();
        prop_assert!(t.count(Class::High) + t.count(Class::Low) <= n);
        for (x, l) in v.iter().zip(&t.labels) {
            match l {
                Some(Class::High) => prop_assert!(*x >= t.upper),
                Some(Class::Low) => prop_assert!(*x <= t.lower),
                None => prop_assert!(*x > t.lower && *x < t.upper),
            }
        }
    }
}
