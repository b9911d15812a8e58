use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsi_attention::heatmap::{
    accumulate_viewports, build_attention_heatmap, gaussian_smooth, min_max_normalize, Grid2D, HeatmapParams,
    Scale,
};
use wsi_attention::ingest::{Group, NavigationSession, SlideManifest, ViewportEvent};

fn session(id: &str, boxes: Vec<(i64, i64, i64, i64)>) -> NavigationSession {
    NavigationSession {
        slide_id: "S".into(),
        observer_id: id.into(),
        group: Group::General,
        end_ms: None,
        events: boxes
            .into_iter()
            .enumerate()
            .map(|(i, (x0, y0, x1, y1))| ViewportEvent { x0, y0, x1, y1, mag: 10.0, t_ms: i as u64 })
            .collect(),
    }
}

fn random_boxes(rng: &mut impl Rng, n: usize, w: i64, h: i64) -> Vec<(i64, i64, i64, i64)> {
    (0..n)
        .map(|_| {
            let x0 = rng.random_range(0..w);
            let y0 = rng.random_range(0..h);
            (x0, y0, rng.random_range(x0 + 1..=w), rng.random_range(y0 + 1..=h))
        })
        .collect()
}

/// Per-cell count: a cell is covered when its base-pixel span overlaps the box.
fn brute_force(sessions: &[NavigationSession], w: usize, h: usize, num: i64, den: i64) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for s in sessions {
        for e in &s.events {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    // cell x spans base [x*den/num, (x+1)*den/num)
                    let overlaps_x = x * den < e.x1 * num && (x + 1) * den > e.x0 * num;
                    let overlaps_y = y * den < e.y1 * num && (y + 1) * den > e.y0 * num;
                    if overlaps_x && overlaps_y {
                        out[y as usize * w + x as usize] += 1.0;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn accumulation_matches_brute_force_full_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = SlideManifest::new("S", 64, 64);
    let sessions = vec![session("a", random_boxes(&mut rng, 10, 64, 64))];
    let grid = accumulate_viewports(&sessions, &m, Scale::FULL, None).unwrap();
    assert_eq!(grid.values, brute_force(&sessions, 64, 64, 1, 1));
}

#[test]
fn accumulation_matches_brute_force_downsampled() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (num, den) in [(1u64, 16u64), (1, 3), (2, 5)] {
        let m = SlideManifest::new("S", 517, 301);
        let scale = Scale::new(num, den).unwrap();
        let sessions: Vec<_> = (0..3)
            .map(|i| session(&format!("o{i}"), random_boxes(&mut rng, 8, 517, 301)))
            .collect();
        let grid = accumulate_viewports(&sessions, &m, scale, None).unwrap();
        let expected = brute_force(&sessions, grid.width, grid.height, num as i64, den as i64);
        assert_eq!(grid.values, expected, "scale {num}/{den}");
    }
}

fn reflect_by_folding(mut i: isize, n: isize) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn kernel_weight(k: isize, sigma: f64) -> f64 {
    let r = (3.0 * sigma).ceil() as isize;
    let norm: f64 = (-r..=r).map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp()).sum();
    (-((k * k) as f64) / (2.0 * sigma * sigma)).exp() / norm
}

/// Non-separable 2-D convolution with reflect padding.
fn direct_convolution(grid: &Grid2D, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let (w, h) = (grid.width as isize, grid.height as isize);
    let taps: Vec<f64> = (-r..=r).map(|k| kernel_weight(k, sigma)).collect();
    let mut out = vec![0.0; grid.values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = reflect_by_folding(x + dx, w);
                    let sy = reflect_by_folding(y + dy, h);
                    acc += taps[(dx + r) as usize] * taps[(dy + r) as usize] * grid.get(sx, sy);
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

#[test]
fn impulse_response_matches_kernel() {
    let sigma = 4.0;
    let mut g = Grid2D::zeros(65, 65, Scale::FULL);
    g.set(32, 32, 1.0);
    let s = gaussian_smooth(&g, sigma);
    let peak = kernel_weight(0, sigma);
    assert!((s.get(32, 32) - peak * peak).abs() < 1e-9);
    for y in 0..65isize {
        for x in 0..65isize {
            let expected = if (x - 32).abs() <= 12 && (y - 32).abs() <= 12 {
                kernel_weight(x - 32, sigma) * kernel_weight(y - 32, sigma)
            } else {
                0.0
            };
            assert!((s.get(x as usize, y as usize) - expected).abs() < 1e-9);
        }
    }
    assert!((s.sum() - 1.0).abs() < 1e-9);
}

#[test]
fn smoothing_matches_direct_convolution_near_borders() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Kernel radius (9) exceeds the height, so reflection folds repeatedly.
    let g = Grid2D::from_values(23, 7, Scale::FULL, (0..23 * 7).map(|_| rng.random::<f64>()).collect()).unwrap();
    let s = gaussian_smooth(&g, 3.0);
    let oracle = direct_convolution(&g, 3.0);
    for (a, b) in s.values.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn arb_grid() -> impl Strategy<Value = Grid2D> {
    (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f64..100.0, w * h)
            .prop_map(move |v| Grid2D::from_values(w, h, Scale::FULL, v).unwrap())
    })
}

proptest! {
    #[test]
    fn smoothing_conserves_mass(g in arb_grid(), sigma in 0.2f64..6.0) {
        let s = gaussian_smooth(&g, sigma);
        let before = g.sum();
        prop_assert!((s.sum() - before).abs() <= 1e-9 * before.abs().max(1.0));
    }

    #[test]
    fn smoothing_is_homogeneous(g in arb_grid(), sigma in 0.2f64..6.0, c in -50.0f64..50.0) {
        let a = gaussian_smooth(&g.map(|v| c * v), sigma);
        let b = gaussian_smooth(&g, sigma).map(|v| c * v);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn normalization_hits_exact_bounds(g in arb_grid()) {
        let n = min_max_normalize(&g);
        if g.max() > g.min() {
            prop_assert_eq!(n.min(), 0.0);
            prop_assert_eq!(n.max(), 1.0);
        } else {
            prop_assert!(n.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn session_order_is_irrelevant(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = SlideManifest::new("S", 800, 600);
        let mut sessions: Vec<_> = (0..4)
            .map(|i| session(&format!("o{i}"), random_boxes(&mut rng, 5, 800, 600)))
            .collect();
        let params = HeatmapParams { sigma: 2.0, ..Default::default() };
        let a = build_attention_heatmap(&sessions, &m, &params).unwrap();
        sessions.reverse();
        let b = build_attention_heatmap(&sessions, &m, &params).unwrap();
        prop_assert_eq!(a.grid.values, b.grid.values);
    }

    #[test]
    fn heatmap_range_invariant(seed in 0u64..1000, sigma in 0.0f64..8.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = SlideManifest::new("S", 640, 480);
        let n = rng.random_range(1..6);
        let sessions = vec![session("o", random_boxes(&mut rng, n, 640, 480))];
        let params = HeatmapParams { sigma, ..Default::default() };
        let h = build_attention_heatmap(&sessions, &m, &params).unwrap();
        if h.degenerate {
            prop_assert!(h.grid.values.iter().all(|&v| v == 0.0));
        } else {
            prop_assert_eq!(h.grid.min(), 0.0);
            prop_assert_eq!(h.grid.max(), 1.0);
        }
    }
}

#[test]
fn average_of_disjoint_plateaus_keeps_both() {
    let m = SlideManifest::new("S", 1600, 800);
    let params = HeatmapParams { sigma: 2.0, ..Default::default() };
    let left = build_attention_heatmap(&[session("a", vec![(160, 160, 480, 480)])], &m, &params).unwrap();
    let right = build_attention_heatmap(&[session("b", vec![(1120, 160, 1440, 480)])], &m, &params).unwrap();
    let avg = wsi_attention::heatmap::average_heatmaps(&[left.clone(), right.clone()]).unwrap();
    for (i, &v) in avg.grid.values.iter().enumerate() {
        if left.grid.values[i] > 0.5 || right.grid.values[i] > 0.5 {
            assert!(v > 0.0);
        }
    }
    assert_eq!(avg.observers.len(), 2);
    assert_eq!(avg.grid.max(), 1.0);
}
