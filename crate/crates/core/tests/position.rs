use bbam_core::analysis::{head_position_study, radial_profile, relative_position, MaskGeometry};
use bbam_core::masks::{boundary, BinaryMask};
use ndarray::Array2;
use proptest::prelude::*;

fn disk(size: usize, radius: f64) -> BinaryMask {
    let c = (size as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((size, size), |(y, x)| {
        (y as f64 - c).hypot(x as f64 - c) <= radius
    })
}

#[test]
fn all_activated_disk_matches_uniform_profile() {
    // For a uniform disk ‖R‖ equals ρ/r, whose density on [0, 1] is 2s.
    // Contour pixel centres sit half a pixel inside the continuous edge.
    let radius = 78.0;
    let effective = radius - 0.5;
    let cdf = |s: f64| ((s * effective / radius).powi(2)).min(1.0);
    let mask = disk(161, radius);
    let map = mask.mapv(|v| if v { 1.0 } else { 0.0 });
    let study = head_position_study(&[(map, &mask)], 0.9).unwrap();
    let bins = 10;
    let profile = radial_profile(&study.points, bins);
    for (i, got) in profile.iter().enumerate() {
        let (lo, hi) = (i as f64 / bins as f64, (i + 1) as f64 / bins as f64);
        let want = if i + 1 == bins {
            1.0 - cdf(lo)
        } else {
            cdf(hi) - cdf(lo)
        } * bins as f64;
        assert!((got - want).abs() < 0.05, "bin {i}: {got} vs {want}");
    }
    // mean of 2s·s over [0, 1]
    let mean = study.mean_norm.unwrap();
    assert!((mean - 2.0 / 3.0).abs() < 0.01, "{mean}");
}

#[test]
fn half_radius_on_a_disk() {
    let mask = disk(101, 40.0);
    let r = relative_position(50, 70, &mask).unwrap();
    assert!((r.r[0] - 0.5).abs() < 0.02, "{:?}", r.r);
    assert!(r.r[1].abs() < 1e-9);
}

#[test]
fn cutoff_above_one_gives_no_points() {
    let mask = disk(21, 8.0);
    let map = mask.mapv(|v| if v { 1.0 } else { 0.0 });
    let study = head_position_study(&[(map, &mask)], 1.0 + 1e-9).unwrap();
    assert!(study.points.is_empty());
    assert_eq!(study.mean_norm, None);
}

fn small_mask() -> impl Strategy<Value = BinaryMask> {
    (
        2usize..10,
        2usize..10,
        prop::collection::vec(any::<bool>(), 100),
    )
        .prop_filter_map("empty", |(h, w, bits)| {
            let m = BinaryMask::from_shape_fn((h, w), |(y, x)| bits[y * 10 + x]);
            m.iter().any(|&v| v).then_some(m)
        })
}

proptest! {
    #[test]
    fn invariants_hold_for_every_pixel(mask in small_mask()) {
        let geometry = MaskGeometry::new(&mask).unwrap();
        let contour = boundary(&mask);
        for ((y, x), &inside) in mask.indexed_iter() {
            if !inside {
                continue;
            }
            let p = relative_position(y, x, &mask).unwrap();
            let n = p.norm();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
            if contour[[y, x]] && p.r1 > 0.0 {
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
            if (y as f64, x as f64) == geometry.centroid {
                prop_assert_eq!(p.r, [0.0, 0.0]);
            }
        }
    }
}
