use bbam_core::analysis::mask_iou;
use bbam_core::bbam::{bbam_for_instance, BbamConfig, LinearProbe, StridePolicy};
use bbam_core::detector::BBox;
use bbam_core::masks::BinaryMask;
use bbam_core::pseudogt::JitterConfig;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 32;
const OBJECT: usize = 8;

fn mean_iou(policy: StridePolicy) -> (f64, Vec<usize>) {
    let config = BbamConfig {
        stride: policy,
        lambda: 0.01,
        iterations: 150,
        ..Default::default()
    };
    let jitter = JitterConfig {
        rate: 0.05,
        count: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut sum, mut strides) = (0.0, Vec::new());
    let corners = [(0, 0), (4, 12), (16, 8), (22, 22), (10, 20)];
    for (k, &(y0, x0)) in corners.iter().enumerate() {
        let inside =
            |y: usize, x: usize| (y0..y0 + OBJECT).contains(&y) && (x0..x0 + OBJECT).contains(&x);
        let probe = LinearProbe::window(SIDE, SIDE, y0, x0, OBJECT);
        let img = Array3::<f64>::from_shape_fn((3, SIDE, SIDE), |(_, y, x)| {
            if inside(y, x) {
                1.0
            } else {
                rng.random_range(0.0..1.0)
            }
        });
        let b = BBox::new(
            x0 as f64,
            y0 as f64,
            (x0 + OBJECT) as f64,
            (y0 + OBJECT) as f64,
        );
        let r = bbam_for_instance(
            &probe,
            img.view(),
            [0.0; 3],
            &b,
            0,
            &jitter,
            &config,
            k as u64,
        )
        .unwrap();
        let gt = BinaryMask::from_shape_fn((SIDE, SIDE), |(y, x)| inside(y, x));
        sum += mask_iou(&r.mask, &gt, 0.5);
        strides.push(r.mask.stride);
    }
    (sum / corners.len() as f64, strides)
}

// With a single object size the adaptive law picks one stride for every
// object, so it must match the fixed stride of that value.
#[test]
fn adaptive_ties_the_matching_fixed_stride_on_one_object_size() {
    let adaptive = StridePolicy::Adaptive {
        reference_side: 448.0,
    };
    let area = (OBJECT * OBJECT) as f64 / (SIDE * SIDE) as f64;
    let matching = adaptive.stride(area, SIDE, SIDE).unwrap();
    let (a, strides) = mean_iou(adaptive);
    assert!(
        strides.iter().all(|&s| s == matching),
        "{strides:?} vs {matching}"
    );
    let (f, _) = mean_iou(StridePolicy::Fixed { stride: matching });
    assert!(a > 0.5, "adaptive IoU {a}");
    assert!((a - f).abs() <= 0.02, "adaptive {a} vs fixed {f}");
}
