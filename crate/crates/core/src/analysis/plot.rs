//! Minimal raster figures. Titles, legends and provenance go into PNG text
//! chunks since no font rendering is available.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Config hash and seed stamped on every emitted table and figure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    /// Comment lines placed at the top of CSV files.
    pub fn csv_preamble(&self, notes: &[(&str, String)]) -> String {
        let mut s = format!("# config_hash={}\n# seed={}\n", self.config_hash, self.seed);
        for (k, v) in notes {
            s += &format!("# {k}={v}\n");
        }
        s
    }
}

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![255; width * height * 3],
        }
    }

    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = x0 as f64 + t * (x1 - x0) as f64;
            let y = y0 as f64 + t * (y1 - y0) as f64;
            self.put(x.round() as i64, y.round() as i64, c);
        }
    }

    pub fn dot(&mut self, x: i64, y: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(x + dx, y + dy, c);
                }
            }
        }
    }

    pub fn write_png(&self, path: &Path, prov: &Provenance, caption: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
        enc.add_text_chunk("config_hash".into(), prov.config_hash.clone())
            .map_err(png_err)?;
        enc.add_text_chunk("seed".into(), prov.seed.to_string())
            .map_err(png_err)?;
        enc.add_text_chunk("caption".into(), caption.into())
            .map_err(png_err)?;
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&self.rgb).map_err(png_err)?;
        w.finish().map_err(png_err)
    }
}

/// A named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with a frame and light grid (5 divisions per axis). The
/// caption should list the series names in palette order and the axis ranges.
pub fn line_chart(series: &[Series], width: usize, height: usize) -> (Canvas, String) {
    let mut c = Canvas::new(width, height);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let m = 20i64;
    let (pw, ph) = (width as i64 - 2 * m, height as i64 - 2 * m);
    let px = |x: f64| m + ((x - x0) / (x1 - x0) * pw as f64).round() as i64;
    let py = |y: f64| m + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64;
    for i in 0..=5 {
        let gx = m + pw * i / 5;
        let gy = m + ph * i / 5;
        c.line((gx, m), (gx, m + ph), [225, 225, 225]);
        c.line((m, gy), (m + pw, gy), [225, 225, 225]);
    }
    c.line((m, m + ph), (m + pw, m + ph), [0, 0, 0]);
    c.line((m, m), (m, m + ph), [0, 0, 0]);
    for (k, s) in series.iter().enumerate() {
        let col = PALETTE[k % PALETTE.len()];
        for w in s.points.windows(2) {
            c.line((px(w[0].0), py(w[0].1)), (px(w[1].0), py(w[1].1)), col);
        }
        for &(x, y) in &s.points {
            c.dot(px(x), py(y), 2, col);
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    let caption = format!(
        "series (palette order): {}; x in [{x0:.4}, {x1:.4}], y in [{y0:.4}, {y1:.4}]",
        names.join(", ")
    );
    (c, caption)
}

/// Heatmap of `values` scaled to its own maximum, each cell drawn as a
/// `scale×scale` block (white = 0, dark blue = max).
pub fn heatmap(values: &Array2<f64>, scale: usize) -> Canvas {
    let (h, w) = values.dim();
    let mut c = Canvas::new(w * scale, h * scale);
    let max = values.iter().cloned().fold(0.0, f64::max);
    for ((y, x), &v) in values.indexed_iter() {
        let t = if max > 0.0 {
            (v / max).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let col = [
            (255.0 * (1.0 - t)) as u8,
            (255.0 * (1.0 - 0.8 * t)) as u8,
            (255.0 * (1.0 - 0.45 * t)) as u8,
        ];
        for dy in 0..scale {
            for dx in 0..scale {
                c.put((x * scale + dx) as i64, (y * scale + dy) as i64, col);
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_carries_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let (c, cap) = line_chart(
            &[Series {
                name: "s".into(),
                points: vec![(0.0, 0.0), (1.0, 2.0)],
            }],
            80,
            60,
        );
        let prov = Provenance {
            config_hash: "abc123".into(),
            seed: 7,
        };
        c.write_png(&p, &prov, &cap).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&p).unwrap()));
        let reader = dec.read_info().unwrap();
        let texts: Vec<(String, String)> = reader
            .info()
            .uncompressed_latin1_text
            .iter()
            .map(|t| (t.keyword.clone(), t.text.clone()))
            .collect();
        assert!(texts.contains(&("config_hash".into(), "abc123".into())));
        assert!(texts.contains(&("seed".into(), "7".into())));
    }
}
