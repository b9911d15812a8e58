use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsi_attention::geometry::Point;
use wsi_attention::heatmap::{gaussian_smooth, Grid2D, Scale};
use wsi_attention::ingest::{Grade, Region, SlideManifest, TumorAnnotation};
use wsi_attention::metrics::{
    cross_correlation, evaluate_case, histogram_match, pearson, rasterize_annotation, tumor_probability_map,
    welch_t_test, EvalConfig, MetricsError, ObserverSet,
};
use wsi_attention::synthetic::{synthetic_case, SyntheticConfig};

fn grid(w: usize, h: usize, values: Vec<f64>) -> Grid2D {
    Grid2D::from_values(w, h, Scale::FULL, values).unwrap()
}

fn arb_pair() -> impl Strategy<Value = (Grid2D, Grid2D)> {
    (1usize..16, 1usize..16).prop_flat_map(|(w, h)| {
        (
            prop::collection::vec(-5.0f64..5.0, w * h),
            prop::collection::vec(0.0f64..1.0, w * h),
        )
            .prop_map(move |(a, b)| (grid(w, h, a), grid(w, h, b)))
    })
}

#[test]
fn two_by_two_hand_case() {
    let a = grid(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let b = grid(2, 2, vec![1.0, 3.0, 2.0, 5.0]);
    // means 2.5 and 2.75; cross sum 5.5; squared sums 5 and 8.75
    let expected = 5.5 / (5.0f64 * 8.75).sqrt();
    assert!((cross_correlation(&a, &b).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn constant_maps_are_rejected() {
    let a = grid(2, 2, vec![1.0; 4]);
    let b = grid(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(cross_correlation(&a, &b).unwrap_err(), MetricsError::ConstantInput("first"));
    assert_eq!(cross_correlation(&b, &a).unwrap_err(), MetricsError::ConstantInput("second"));
    let c = grid(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
    assert!(matches!(cross_correlation(&b, &c), Err(MetricsError::DimensionMismatch(_))));
}

proptest! {
    #[test]
    fn cc_affine_invariance((m, _) in arb_pair(), a in 0.01f64..100.0, b in -100.0f64..100.0) {
        prop_assume!(m.max() - m.min() > 1e-3);
        prop_assert!((cross_correlation(&m, &m).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((cross_correlation(&m, &m.map(|v| a * v + b)).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((cross_correlation(&m, &m.map(|v| -v)).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn cc_is_symmetric_and_bounded((a, b) in arb_pair()) {
        prop_assume!(a.max() > a.min() && b.max() > b.min());
        let ab = cross_correlation(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - cross_correlation(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn histogram_match_takes_reference_distribution((src, reference) in arb_pair()) {
        let out = histogram_match(&src, &reference).unwrap();
        let mut got = out.values.clone();
        let mut want = reference.values.clone();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        prop_assert_eq!(got, want);
        for i in 0..src.values.len() {
            for j in 0..src.values.len() {
                if src.values[i] < src.values[j] {
                    prop_assert!(out.values[i] <= out.values[j]);
                }
            }
        }
    }

    #[test]
    fn welch_is_shift_invariant_and_antisymmetric(
        xs in prop::collection::vec(-10.0f64..10.0, 2..12),
        ys in prop::collection::vec(-10.0f64..10.0, 2..12),
        c in -100.0f64..100.0,
    ) {
        let base = match welch_t_test(&xs, &ys) {
            Ok(t) => t,
            Err(_) => return Ok(()),
        };
        let xs2: Vec<f64> = xs.iter().map(|v| v + c).collect();
        let ys2: Vec<f64> = ys.iter().map(|v| v + c).collect();
        let shifted = welch_t_test(&xs2, &ys2).unwrap();
        prop_assert!((base.t - shifted.t).abs() <= 1e-6 * base.t.abs().max(1.0));
        prop_assert!((base.p - shifted.p).abs() <= 1e-6);
        let swapped = welch_t_test(&ys, &xs).unwrap();
        prop_assert!((base.t + swapped.t).abs() < 1e-12);
        prop_assert!((base.p - swapped.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base.p));
    }
}

#[test]
fn welch_identical_samples() {
    let xs = [0.3, 0.7, 0.55, 0.61, 0.2];
    let w = welch_t_test(&xs, &xs).unwrap();
    assert!(w.t.abs() < 1e-9);
    assert!((w.p - 1.0).abs() < 1e-9);
}

#[test]
fn welch_matches_high_precision_oracle() {
    // Oracle: 50-digit integration of the Student t density.
    let w = welch_t_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).unwrap();
    assert!((w.t - -1.0954451150103322).abs() < 1e-12);
    assert!((w.df - 6.0).abs() < 1e-12);
    assert!((w.p - 0.31533359620122973).abs() < 1e-6);
}

fn even_odd(polygon: &[Point], p: Point) -> bool {
    // Ray cast to +x, counting crossings with each edge's half-open y span.
    let mut inside = false;
    let n = polygon.len();
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + n - 1) % n]);
        if (a.y > p.y) != (b.y > p.y) {
            let t = (p.y - a.y) / (b.y - a.y);
            if p.x < a.x + t * (b.x - a.x) {
                inside = !inside;
            }
        }
    }
    inside
}

#[test]
fn rasterization_matches_per_cell_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let manifest = SlideManifest::new("S", 1000, 700);
    for scale in [Scale::SIXTEENTH, Scale::new(1, 5).unwrap(), Scale::new(1, 2).unwrap()] {
        for _ in 0..20 {
            // Star-shaped (hence simple) polygon with fractional vertices.
            let (cx, cy) = (rng.random_range(200.0..800.0), rng.random_range(150.0..550.0));
            let k = rng.random_range(3..9);
            let polygon: Vec<Point> = (0..k)
                .map(|i| {
                    let a = std::f64::consts::TAU * (i as f64 + rng.random_range(0.0..0.8)) / k as f64;
                    let r = rng.random_range(40.0..150.0);
                    Point::new(cx + r * a.cos() + 0.137, cy + r * a.sin() + 0.291)
                })
                .collect();
            let ann = TumorAnnotation {
                slide_id: "S".into(),
                regions: vec![Region { polygon: polygon.clone(), grade: Grade::G4 }],
            };
            let mask = rasterize_annotation(&ann, &manifest, scale);
            for y in 0..mask.height {
                for x in 0..mask.width {
                    let c = Point::new(scale.cell_center(x), scale.cell_center(y));
                    let expected = if even_odd(&polygon, c) { 1.0 } else { 0.0 };
                    assert_eq!(mask.get(x, y), expected, "cell ({x},{y}) at scale {scale}");
                }
            }
        }
    }
}

#[test]
fn overlapping_regions_form_a_union() {
    let manifest = SlideManifest::new("S", 320, 320);
    let sq = |x0: f64, y0: f64, x1: f64, y1: f64, grade| Region {
        polygon: vec![Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1)],
        grade,
    };
    let ann = TumorAnnotation {
        slide_id: "S".into(),
        regions: vec![sq(0.0, 0.0, 200.0, 200.0, Grade::G3), sq(100.0, 100.0, 300.0, 300.0, Grade::G5)],
    };
    let mask = rasterize_annotation(&ann, &manifest, Scale::SIXTEENTH);
    assert_eq!(mask.get(8, 8), 1.0);
    // Centres at 8, 24, ...: 12 cells inside [0, 200), 13 inside [100, 300), 6 shared.
    assert_eq!(mask.sum(), (12 * 12 + 13 * 13 - 6 * 6) as f64);
}

#[test]
fn half_plane_tumor_map_matches_direct_convolution() {
    let (w, h) = (40usize, 30usize);
    let mut mask = Grid2D::zeros(w, h, Scale::FULL);
    for y in 0..h {
        for x in 0..w / 2 {
            mask.set(x, y, 1.0);
        }
    }
    let sigma: f64 = 4.0;
    let r = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    // Along x the mask is a step; with mirror padding the left edge stays 1.
    let mirror = |i: isize| -> usize {
        let n = w as isize;
        let m = i.rem_euclid(2 * n);
        (if m < n { m } else { 2 * n - 1 - m }) as usize
    };
    let mut smoothed = Vec::with_capacity(w);
    for x in 0..w as isize {
        let v: f64 = (-r..=r)
            .map(|k| weights[(k + r) as usize] * if mirror(x + k) < w / 2 { 1.0 } else { 0.0 })
            .sum::<f64>()
            / total;
        smoothed.push(v);
    }
    let (lo, hi) = (smoothed[w - 1], smoothed[0]);
    let map = tumor_probability_map(&mask, sigma);
    for y in 0..h {
        for x in 0..w {
            let expected = (smoothed[x] - lo) / (hi - lo);
            assert!((map.grid.get(x, y) - expected).abs() < 1e-9);
        }
    }
    let direct = gaussian_smooth(&mask, sigma);
    assert!((direct.sum() - mask.sum()).abs() < 1e-9);
}

#[test]
fn evaluate_case_rows_for_synthetic_groups() {
    let case = synthetic_case(&SyntheticConfig::default());
    let report = evaluate_case("SYN", &case.sessions, &case.annotation, &case.manifest, &EvalConfig::default()).unwrap();
    let all = report.row(ObserverSet::All).unwrap();
    assert_eq!(all.n_observers, 8);
    assert!(all.cc > 0.5);
    assert!(all.sss.unwrap() > 0.0);
    assert_eq!(report.row(ObserverSet::GuSpecialists).unwrap().n_observers, 4);
    assert_eq!(report.row(ObserverSet::General).unwrap().n_observers, 4);
}

#[test]
fn pearson_on_raw_slices() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
}
