use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::BinaryMask;

pub const BG: u8 = 0;
pub const FG: u8 = 1;
pub const IGNORE: u8 = 255;

/// Per-pixel foreground / background / ignore labels of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trimap {
    /// Values in {[`BG`], [`FG`], [`IGNORE`]}.
    pub labels: Array2<u8>,
    pub instance_id: usize,
    pub class_id: usize,
}

impl Trimap {
    pub fn from_mask(mask: &BinaryMask, instance_id: usize, class_id: usize) -> Self {
        Self {
            labels: mask.mapv(|v| if v { FG } else { BG }),
            instance_id,
            class_id,
        }
    }

    pub fn foreground(&self) -> BinaryMask {
        self.labels.mapv(|v| v == FG)
    }

    pub fn background(&self) -> BinaryMask {
        self.labels.mapv(|v| v == BG)
    }

    pub fn ignored(&self) -> BinaryMask {
        self.labels.mapv(|v| v == IGNORE)
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&v| v == label).count()
    }
}

/// `fg = M̂ > θ_fg`, `bg = M̂ < θ_bg`, ignore otherwise. With equal thresholds,
/// pixels exactly at the threshold go to background.
pub fn threshold_trimap(
    up: ArrayView2<f64>,
    theta_fg: f64,
    theta_bg: f64,
    instance_id: usize,
    class_id: usize,
) -> Result<Trimap> {
    if theta_bg > theta_fg {
        return Err(Error::Config(format!(
            "theta_bg {theta_bg} exceeds theta_fg {theta_fg}"
        )));
    }
    let labels = up.mapv(|v| {
        if v > theta_fg {
            FG
        } else if v < theta_bg || (theta_bg == theta_fg && v == theta_bg) {
            BG
        } else {
            IGNORE
        }
    });
    Ok(Trimap {
        labels,
        instance_id,
        class_id,
    })
}

/// Colour-contrast refinement of the ignore band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeRefineConfig {
    /// Half-size of the square window for local colour statistics.
    pub radius: usize,
    /// Minimum gap between the distances to the local fg and bg colours.
    pub min_contrast: f64,
    /// The chosen side must be at most this fraction of the other distance.
    pub ratio: f64,
    pub max_sweeps: usize,
}

impl Default for EdgeRefineConfig {
    fn default() -> Self {
        Self {
            radius: 4,
            min_contrast: 0.08,
            ratio: 0.5,
            max_sweeps: 12,
        }
    }
}

/// Summed-area table with a zero first row and column.
fn integral(values: &Array2<f64>) -> Array2<f64> {
    let (h, w) = values.dim();
    let mut s = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[[y, x]];
            s[[y + 1, x + 1]] = s[[y, x + 1]] + row;
        }
    }
    s
}

fn window_sum(s: &Array2<f64>, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
    s[[y1, x1]] - s[[y0, x1]] - s[[y1, x0]] + s[[y0, x0]]
}

/// Resolves ignore pixels whose colour clearly matches the nearby
/// foreground or background colour. Labelled pixels never change, so a
/// pixel can never move between foreground and background. `image` is
/// `H×W×3`.
pub fn edge_refine(trimap: &Trimap, image: ArrayView3<f32>, cfg: &EdgeRefineConfig) -> Trimap {
    let (h, w) = trimap.labels.dim();
    let mut labels = trimap.labels.clone();
    let r = cfg.radius;
    for _ in 0..cfg.max_sweeps {
        let fg = labels.mapv(|v| f64::from(v == FG));
        let bg = labels.mapv(|v| f64::from(v == BG));
        let sf = integral(&fg);
        let sb = integral(&bg);
        let chan = |mask: &Array2<f64>| -> Vec<Array2<f64>> {
            (0..3)
                .map(|c| {
                    integral(&Array2::from_shape_fn((h, w), |(y, x)| {
                        mask[[y, x]] * image[[y, x, c]] as f64
                    }))
                })
                .collect()
        };
        let (cf, cb) = (chan(&fg), chan(&bg));
        let mut next = labels.clone();
        let mut changed = 0;
        for y in 0..h {
            for x in 0..w {
                if labels[[y, x]] != IGNORE {
                    continue;
                }
                let (y0, x0, y1, x1) = (
                    y.saturating_sub(r),
                    x.saturating_sub(r),
                    (y + r + 1).min(h),
                    (x + r + 1).min(w),
                );
                let nf = window_sum(&sf, y0, x0, y1, x1);
                let nb = window_sum(&sb, y0, x0, y1, x1);
                if nf < 1.0 || nb < 1.0 {
                    continue;
                }
                let mut df = 0.0;
                let mut db = 0.0;
                for c in 0..3 {
                    let v = image[[y, x, c]] as f64;
                    df += (v - window_sum(&cf[c], y0, x0, y1, x1) / nf).powi(2);
                    db += (v - window_sum(&cb[c], y0, x0, y1, x1) / nb).powi(2);
                }
                let (df, db) = (df.sqrt(), db.sqrt());
                if (df - db).abs() < cfg.min_contrast {
                    continue;
                }
                if df <= cfg.ratio * db {
                    next[[y, x]] = FG;
                    changed += 1;
                } else if db <= cfg.ratio * df {
                    next[[y, x]] = BG;
                    changed += 1;
                }
            }
        }
        labels = next;
        if changed == 0 {
            break;
        }
    }
    Trimap {
        labels,
        instance_id: trimap.instance_id,
        class_id: trimap.class_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{erode, iou};
    use ndarray::Array3;

    /// `H×W×3` image in `[0, 1]` filled with a single colour.
    fn flat_image(h: usize, w: usize, rgb: [f32; 3]) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(_, _, c)| rgb[c])
    }

    #[test]
    fn threshold_cases() {
        let ones = Array2::<f64>::ones((4, 4));
        assert_eq!(
            threshold_trimap(ones.view(), 0.8, 0.2, 0, 0)
                .unwrap()
                .count(FG),
            16
        );
        let half = Array2::<f64>::from_elem((4, 4), 0.5);
        assert_eq!(
            threshold_trimap(half.view(), 0.8, 0.2, 0, 0)
                .unwrap()
                .count(IGNORE),
            16
        );
        let eq = threshold_trimap(half.view(), 0.5, 0.5, 0, 0).unwrap();
        assert_eq!(eq.count(BG), 16);
        assert!(threshold_trimap(half.view(), 0.2, 0.9, 0, 0).is_err());
    }

    fn disk(h: usize, r: f64) -> BinaryMask {
        let c = h as f64 / 2.0;
        BinaryMask::from_shape_fn((h, h), |(y, x)| {
            ((y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2)).sqrt() <= r
        })
    }

    #[test]
    fn uniform_image_is_left_alone() {
        let gt = disk(32, 10.0);
        let inner = erode(&gt, 2);
        let mut t = Trimap::from_mask(&inner, 0, 0);
        t.labels.zip_mut_with(&gt, |l, &g| {
            if g && *l == BG {
                *l = IGNORE
            }
        });
        let img = flat_image(32, 32, [0.4, 0.5, 0.6]);
        assert_eq!(edge_refine(&t, img.view(), &EdgeRefineConfig::default()), t);
    }

    #[test]
    fn eroded_disk_rim_is_recovered() {
        let gt = disk(48, 15.0);
        let inner = erode(&gt, 2);
        let mut t = Trimap::from_mask(&inner, 0, 0);
        // rim plus two pixels outside it are unknown
        let outer = crate::masks::dilate(&gt, 2);
        t.labels.zip_mut_with(&outer, |l, &o| {
            if o && *l == BG {
                *l = IGNORE
            }
        });
        let img = Array3::from_shape_fn((48, 48, 3), |(y, x, c)| {
            if gt[[y, x]] {
                [0.9f32, 0.2, 0.1][c]
            } else if (x / 3 + y / 3) % 2 == 0 {
                0.3
            } else {
                0.45
            }
        });
        let out = edge_refine(&t, img.view(), &EdgeRefineConfig::default());
        let rim: Vec<(usize, usize)> = gt
            .indexed_iter()
            .filter(|&(p, &g)| g && !inner[p])
            .map(|(p, _)| p)
            .collect();
        let got = rim.iter().filter(|&&p| out.labels[p] == FG).count();
        assert!(got as f64 >= 0.9 * rim.len() as f64, "{got}/{}", rim.len());
        assert!(iou(&out.foreground(), &gt) > 0.95);
        // labelled pixels are untouched
        for (p, &l) in t.labels.indexed_iter() {
            if l != IGNORE {
                assert_eq!(out.labels[p], l);
            }
        }
        let again = edge_refine(&out, img.view(), &EdgeRefineConfig::default());
        let diff = again
            .labels
            .iter()
            .zip(out.labels.iter())
            .filter(|(a, b)| a != b)
            .count();
        assert!((diff as f64) < 0.01 * (48.0 * 48.0));
    }
}
