use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::masks::{self, BinaryMask};

/// Bumped whenever the generator's output for a given seed changes.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Triangle,
    Rectangle,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Rectangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Textured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Class id `i` draws shape `classes[i]`.
    pub classes: Vec<ShapeKind>,
    /// Nominal shape size as a fraction of the shorter image side.
    pub scale_range: [f64; 2],
    /// Height/width ratio range for rectangles.
    pub aspect_range: [f64; 2],
    /// Maximum absolute rotation in degrees.
    pub max_rotation_deg: f64,
    pub background: Background,
    /// Every instance keeps at least this fraction of its pixels visible.
    pub min_visible: f64,
    /// Standard deviation of per-pixel colour noise.
    pub pixel_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_instances: 1,
            max_instances: 3,
            classes: ShapeKind::ALL.to_vec(),
            scale_range: [0.2, 0.8],
            aspect_range: [0.55, 1.0],
            max_rotation_deg: 30.0,
            background: Background::Textured,
            min_visible: 0.6,
            pixel_noise: 0.03,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(64..=256).contains(&self.width) || !(64..=256).contains(&self.height) {
            return bad(format!(
                "image size {}x{} outside 64..=256",
                self.width, self.height
            ));
        }
        if self.min_instances == 0
            || self.max_instances > 4
            || self.min_instances > self.max_instances
        {
            return bad(format!(
                "instance count range {}..={} must lie in 1..=4",
                self.min_instances, self.max_instances
            ));
        }
        if self.classes.is_empty() {
            return bad("no shape classes configured".into());
        }
        let [lo, hi] = self.scale_range;
        let side = self.width.min(self.height) as f64;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!(
                "scale range [{lo}, {hi}] is not increasing and positive"
            ));
        }
        if hi > 1.0 {
            return bad(format!(
                "shapes of scale {hi} do not fit the {}x{} canvas",
                self.width, self.height
            ));
        }
        if lo * side < 6.0 {
            return bad(format!("shapes of scale {lo} are smaller than 6 px"));
        }
        let [alo, ahi] = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            return bad(format!(
                "aspect range [{alo}, {ahi}] must satisfy 0 < lo <= hi <= 1"
            ));
        }
        if !(0.0..=90.0).contains(&self.max_rotation_deg) {
            return bad("max_rotation_deg must lie in [0, 90]".into());
        }
        if !(0.0..=1.0).contains(&self.min_visible) || !(0.0..=0.5).contains(&self.pixel_noise) {
            return bad("min_visible must lie in [0,1] and pixel_noise in [0,0.5]".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    /// Tight box of the visible mask.
    pub bbox: BBox,
    /// Visible pixels (occluded parts removed).
    pub mask: BinaryMask,
    /// Drawing order; higher values are drawn on top.
    pub z_order: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Array3<f32>,
    pub instances: Vec<Instance>,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Image as `3×H×W` in the requested precision.
    pub fn chw<T: crate::nn::Real>(&self) -> Array3<T> {
        let (h, w, _) = self.image.dim();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| T::lit(self.image[[y, x, c]] as f64))
    }
}

/// SplitMix64 mix of a global seed and an index.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    let mut z = global ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    size: f64,
    aspect: f64,
    angle: f64,
}

impl Placed {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.size / 2.0;
        match self.kind {
            ShapeKind::Disk => u * u + v * v <= r * r,
            ShapeKind::Ring => {
                let d = u * u + v * v;
                d <= r * r && d >= 0.25 * r * r
            }
            ShapeKind::Rectangle => u.abs() <= r && v.abs() <= r * self.aspect,
            ShapeKind::Triangle => {
                // Equilateral, circumradius r, apex pointing up (−v).
                let inside = |a: f64| {
                    let (na, nb) = (a.cos(), a.sin());
                    u * na + v * nb <= r / 2.0
                };
                inside(PI / 2.0)
                    && inside(PI / 2.0 + 2.0 * PI / 3.0)
                    && inside(PI / 2.0 + 4.0 * PI / 3.0)
            }
            ShapeKind::Cross => {
                let arm = self.size / 6.0;
                (u.abs() <= r && v.abs() <= arm) || (v.abs() <= r && u.abs() <= arm)
            }
        }
    }

    /// Half extents of the rotated shape's bounding rectangle.
    fn half_extent(kind: ShapeKind, size: f64, aspect: f64, angle: f64) -> (f64, f64) {
        let r = size / 2.0;
        let (s, c) = (angle.sin().abs(), angle.cos().abs());
        match kind {
            ShapeKind::Disk | ShapeKind::Ring => (r, r),
            ShapeKind::Rectangle => (r * c + r * aspect * s, r * s + r * aspect * c),
            ShapeKind::Triangle | ShapeKind::Cross => (r * (c + s).min(1.5), r * (c + s).min(1.5)),
        }
    }

    fn rasterize(&self, width: usize, height: usize) -> BinaryMask {
        let mut m = BinaryMask::from_elem((height, width), false);
        let reach = self.size * 0.75 + 1.0;
        let x0 = (self.cx - reach).floor().max(0.0) as usize;
        let y0 = (self.cy - reach).floor().max(0.0) as usize;
        let x1 = ((self.cx + reach).ceil() as usize).min(width);
        let y1 = ((self.cy + reach).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m[[y, x]] = true;
                }
            }
        }
        m
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn paint_background<R: Rng>(rng: &mut R, cfg: &GeneratorConfig) -> Array3<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = Array3::<f64>::zeros((h, w, 3));
    match cfg.background {
        Background::Flat => {
            let col = [
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
            ];
            for ((_, _, c), v) in img.indexed_iter_mut() {
                *v = col[c];
            }
        }
        Background::Textured => {
            let side = w.max(h) as f64;
            for c in 0..3 {
                let base: f64 = rng.random_range(0.35..0.65);
                let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                    .map(|_| {
                        let amp = rng.random_range(0.04..0.11);
                        let freq = rng.random_range(2.0..10.0) * 2.0 * PI / side;
                        let dir = rng.random_range(0.0..PI);
                        let phase = rng.random_range(0.0..2.0 * PI);
                        (amp, freq, dir, phase)
                    })
                    .collect();
                for y in 0..h {
                    for x in 0..w {
                        let mut v = base;
                        for &(amp, freq, dir, phase) in &waves {
                            v += amp
                                * (freq * (x as f64 * dir.cos() + y as f64 * dir.sin()) + phase)
                                    .sin();
                        }
                        img[[y, x, c]] = v;
                    }
                }
            }
        }
    }
    img
}

/// Generates one scene; a pure function of `(config, seed)`.
pub fn generate_scene(cfg: &GeneratorConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let side = w.min(h) as f64;
    let mut image = paint_background(&mut rng, cfg);

    let target = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut placed: Vec<(Placed, usize, BinaryMask)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < target && attempts < 60 * target {
        attempts += 1;
        let class_id = rng.random_range(0..cfg.classes.len());
        let kind = cfg.classes[class_id];
        let scale = if cfg.scale_range[0] == cfg.scale_range[1] {
            cfg.scale_range[0]
        } else {
            rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1])
        };
        let size = scale * side;
        let aspect = if cfg.aspect_range[0] == cfg.aspect_range[1] {
            cfg.aspect_range[0]
        } else {
            rng.random_range(cfg.aspect_range[0]..=cfg.aspect_range[1])
        };
        let max_rot = cfg.max_rotation_deg.to_radians();
        let mut angle = if max_rot > 0.0 {
            rng.random_range(-max_rot..=max_rot)
        } else {
            0.0
        };
        let (mut hx, mut hy) = Placed::half_extent(kind, size, aspect, angle);
        if 2.0 * hx > w as f64 || 2.0 * hy > h as f64 {
            angle = 0.0;
            (hx, hy) = Placed::half_extent(kind, size, aspect, angle);
        }
        let cx = if 2.0 * hx >= w as f64 {
            w as f64 / 2.0
        } else {
            rng.random_range(hx..=(w as f64 - hx))
        };
        let cy = if 2.0 * hy >= h as f64 {
            h as f64 / 2.0
        } else {
            rng.random_range(hy..=(h as f64 - hy))
        };
        let shape = Placed {
            kind,
            cx,
            cy,
            size,
            aspect,
            angle,
        };
        let full = shape.rasterize(w, h);
        let full_area = masks::area(&full);
        if full_area < 16 {
            continue;
        }
        // The new shape goes on top: every earlier visible mask loses the overlap.
        let ok = placed.iter().all(|(_, _, vis)| {
            let lost = masks::intersection(vis, &full);
            let orig = masks::area(vis);
            (orig - lost) as f64 >= cfg.min_visible * orig as f64 && orig - lost >= 16
        });
        if !ok {
            continue;
        }
        for (_, _, vis) in placed.iter_mut() {
            ndarray::Zip::from(vis).and(&full).for_each(|v, &f| {
                if f {
                    *v = false;
                }
            });
        }
        placed.push((shape, class_id, full));
    }
    if placed.is_empty() {
        return Err(Error::Config(
            "could not place any instance on the canvas".into(),
        ));
    }

    let mut instances = Vec::with_capacity(placed.len());
    for (z, (shape, class_id, visible)) in placed.into_iter().enumerate() {
        let hue: f64 = rng.random();
        let sat = rng.random_range(0.6..1.0);
        let val = rng.random_range(0.55..1.0);
        let col = hsv_to_rgb(hue, sat, val);
        let shade_dir = rng.random_range(0.0..2.0 * PI);
        let shade = rng.random_range(0.0..0.08);
        for ((y, x), &v) in visible.indexed_iter() {
            if v {
                let proj = ((x as f64 - shape.cx) * shade_dir.cos()
                    + (y as f64 - shape.cy) * shade_dir.sin())
                    / shape.size.max(1.0);
                for c in 0..3 {
                    image[[y, x, c]] = col[c] + shade * proj;
                }
            }
        }
        let bbox = masks::tight_box(&visible).expect("visible mask is non-empty");
        instances.push(Instance {
            class_id,
            bbox,
            mask: visible,
            z_order: z as u32,
        });
    }

    let image = if cfg.pixel_noise > 0.0 {
        image.mapv(|v| (v + cfg.pixel_noise * gaussian(&mut rng)).clamp(0.0, 1.0) as f32)
    } else {
        image.mapv(|v| v.clamp(0.0, 1.0) as f32)
    };
    Ok(Scene {
        image,
        instances,
        seed,
    })
}

/// Per-channel mean colour over a set of scenes.
pub fn channel_mean(scenes: &[Scene]) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for s in scenes {
        for ((_, _, c), &v) in s.image.indexed_iter() {
            sum[c] += v as f64;
        }
        n += s.height() * s.width();
    }
    sum.map(|v| if n == 0 { 0.5 } else { v / n as f64 })
}

/// Semantic ground truth: `0` background, `class_id + 1` for instance pixels.
pub fn semantic_labels(scene: &Scene) -> Array2<u8> {
    let mut labels = Array2::<u8>::zeros((scene.height(), scene.width()));
    for inst in &scene.instances {
        for ((y, x), &v) in inst.mask.indexed_iter() {
            if v {
                labels[[y, x]] = inst.class_id as u8 + 1;
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = GeneratorConfig::default();
        assert_eq!(
            generate_scene(&cfg, 0).unwrap(),
            generate_scene(&cfg, 0).unwrap()
        );
        assert_ne!(
            generate_scene(&cfg, 0).unwrap().image,
            generate_scene(&cfg, 1).unwrap().image
        );
    }

    #[test]
    fn full_canvas_rectangle() {
        let cfg = GeneratorConfig {
            width: 64,
            height: 64,
            min_instances: 1,
            max_instances: 1,
            classes: vec![ShapeKind::Rectangle],
            scale_range: [1.0, 1.0],
            aspect_range: [1.0, 1.0],
            max_rotation_deg: 0.0,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 7).unwrap();
        assert_eq!(s.instances.len(), 1);
        assert_eq!(s.instances[0].bbox, BBox::new(0.0, 0.0, 64.0, 64.0));
        assert_eq!(masks::area(&s.instances[0].mask), 64 * 64);
    }

    #[test]
    fn disk_area_matches_analytic() {
        let cfg = GeneratorConfig {
            min_instances: 1,
            max_instances: 1,
            classes: vec![ShapeKind::Disk],
            scale_range: [0.5, 0.5],
            ..Default::default()
        };
        for seed in 0..5 {
            let s = generate_scene(&cfg, seed).unwrap();
            let r = 0.25 * 128.0;
            let expected = PI * r * r;
            let got = masks::area(&s.instances[0].mask) as f64;
            assert!(
                (got - expected).abs() / expected < 0.02,
                "{got} vs {expected}"
            );
        }
    }

    #[test]
    fn rejects_oversized_shapes() {
        let cfg = GeneratorConfig {
            scale_range: [0.5, 1.3],
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            width: 300,
            ..Default::default()
        };
        assert!(generate_scene(&cfg, 0).is_err());
    }

    #[test]
    fn boxes_are_tight_and_contain_masks() {
        let cfg = GeneratorConfig {
            max_instances: 4,
            ..Default::default()
        };
        for seed in 0..40 {
            let s = generate_scene(&cfg, derive_seed(11, seed)).unwrap();
            for inst in &s.instances {
                let b = inst.bbox;
                let inside = masks::box_mask(&b, s.height(), s.width());
                assert_eq!(masks::containment(&inst.mask, &inside), 1.0);
                // shrinking any side by one pixel drops a mask pixel
                for shrunk in [
                    BBox::new(b.x_min + 1.0, b.y_min, b.x_max, b.y_max),
                    BBox::new(b.x_min, b.y_min + 1.0, b.x_max, b.y_max),
                    BBox::new(b.x_min, b.y_min, b.x_max - 1.0, b.y_max),
                    BBox::new(b.x_min, b.y_min, b.x_max, b.y_max - 1.0),
                ] {
                    let m = masks::box_mask(&shrunk, s.height(), s.width());
                    assert!(masks::containment(&inst.mask, &m) < 1.0);
                }
            }
            for (i, a) in s.instances.iter().enumerate() {
                for b in &s.instances[i + 1..] {
                    assert_eq!(masks::intersection(&a.mask, &b.mask), 0);
                }
            }
        }
    }
}
