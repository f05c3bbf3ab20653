//! Unsupervised mask proposals: graph-based segmentation at several scales
//! followed by greedy hierarchical merging of adjacent regions.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::refine::{MaskProposalSet, ProposalOrigin};
use crate::error::{Error, Result};
use crate::masks::{self, BinaryMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Merge thresholds of the graph segmentation, one per scale.
    pub scales: Vec<f64>,
    pub min_size: usize,
    pub smoothing_sigma: f64,
    pub min_proposals: usize,
    pub max_proposals: usize,
    /// Proposals with IoU above this against an earlier one are dropped.
    pub dedup_iou: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.4, 1.0, 2.5],
            min_size: 20,
            smoothing_sigma: 0.8,
            min_proposals: 20,
            max_proposals: 300,
            dedup_iou: 0.95,
        }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, w: f64) -> usize {
        let (a, b) = if self.size[a] < self.size[b] {
            (b, a)
        } else {
            (a, b)
        };
        self.parent[b] = a;
        self.size[a] += self.size[b];
        self.internal[a] = w;
        a
    }
}

fn gaussian_blur(image: ArrayView3<f32>, sigma: f64) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let src = image.mapv(f64::from);
    if sigma <= 0.0 {
        return src;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let pass = |a: &Array3<f64>, horizontal: bool| {
        Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let d = j as isize - r;
                let (yy, xx) = if horizontal {
                    (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                } else {
                    ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                };
                acc += kv * a[[yy as usize, xx as usize, ch]];
            }
            acc / norm
        })
    };
    pass(&pass(&src, true), false)
}

/// Graph-based segmentation on an 8-connected pixel graph; returns a dense
/// label map with labels `0..n`.
pub fn graph_segment(
    image: ArrayView3<f32>,
    k: f64,
    min_size: usize,
    sigma: f64,
) -> (Array2<usize>, usize) {
    let (h, w, _) = image.dim();
    let img = gaussian_blur(image, sigma);
    let idx = |y: usize, x: usize| y * w + x;
    let diff = |a: (usize, usize), b: (usize, usize)| {
        (0..3)
            .map(|c| (img[[a.0, a.1, c]] - img[[b.0, b.1, c]]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut edges = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                edges.push((diff((y, x), (y, x + 1)), idx(y, x), idx(y, x + 1)));
            }
            if y + 1 < h {
                edges.push((diff((y, x), (y + 1, x)), idx(y, x), idx(y + 1, x)));
            }
            if x + 1 < w && y + 1 < h {
                edges.push((diff((y, x), (y + 1, x + 1)), idx(y, x), idx(y + 1, x + 1)));
            }
            if x > 0 && y + 1 < h {
                edges.push((diff((y, x), (y + 1, x - 1)), idx(y, x), idx(y + 1, x - 1)));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ds = DisjointSet::new(h * w);
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb {
            let ta = ds.internal[ra] + k / ds.size[ra] as f64;
            let tb = ds.internal[rb] + k / ds.size[rb] as f64;
            if wt <= ta.min(tb) {
                ds.union(ra, rb, wt);
            }
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra] < min_size || ds.size[rb] < min_size) {
            let wt = ds.internal[ra].max(ds.internal[rb]);
            ds.union(ra, rb, wt);
        }
    }
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let mut labels = Array2::<usize>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let root = ds.find(idx(y, x));
            let next = ids.len();
            labels[[y, x]] = *ids.entry(root).or_insert(next);
        }
    }
    let n = ids.len();
    (labels, n)
}

struct Region {
    pixels: Vec<usize>,
    color: [f64; 3],
    bbox: (usize, usize, usize, usize),
}

/// Greedy merging of the most similar adjacent pair until one region is
/// left; every intermediate region is recorded as pixel index lists.
fn hierarchy(image: ArrayView3<f32>, labels: &Array2<usize>, n: usize) -> Vec<Vec<usize>> {
    let (h, w, _) = image.dim();
    let mut regions: Vec<Option<Region>> = (0..n)
        .map(|_| {
            Some(Region {
                pixels: Vec::new(),
                color: [0.0; 3],
                bbox: (usize::MAX, usize::MAX, 0, 0),
            })
        })
        .collect();
    for ((y, x), &l) in labels.indexed_iter() {
        let r = regions[l].as_mut().expect("fresh region");
        r.pixels.push(y * w + x);
        for c in 0..3 {
            r.color[c] += image[[y, x, c]] as f64;
        }
        r.bbox = (
            r.bbox.0.min(y),
            r.bbox.1.min(x),
            r.bbox.2.max(y + 1),
            r.bbox.3.max(x + 1),
        );
    }
    for r in regions.iter_mut().flatten() {
        let n = r.pixels.len() as f64;
        r.color.iter_mut().for_each(|v| *v /= n);
    }
    let mut adj: BTreeSet<(usize, usize)> = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let a = labels[[y, x]];
            for (yy, xx) in [(y + 1, x), (y, x + 1)] {
                if yy < h && xx < w {
                    let b = labels[[yy, xx]];
                    if a != b {
                        adj.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    let total = (h * w) as f64;
    let similarity = |a: &Region, b: &Region| {
        let col = 1.0
            - ((0..3)
                .map(|c| (a.color[c] - b.color[c]).powi(2))
                .sum::<f64>()
                .sqrt()
                / 3f64.sqrt());
        let size = 1.0 - (a.pixels.len() + b.pixels.len()) as f64 / total;
        let bb = (
            a.bbox.0.min(b.bbox.0),
            a.bbox.1.min(b.bbox.1),
            a.bbox.2.max(b.bbox.2),
            a.bbox.3.max(b.bbox.3),
        );
        let bb_area = ((bb.2 - bb.0) * (bb.3 - bb.1)) as f64;
        let fill = 1.0 - (bb_area - (a.pixels.len() + b.pixels.len()) as f64) / total;
        2.0 * col + size + fill
    };
    let mut out: Vec<Vec<usize>> = regions.iter().flatten().map(|r| r.pixels.clone()).collect();
    while let Some(&(a, b)) = adj.iter().max_by(|p, q| {
        let s = |&(i, j): &(usize, usize)| {
            similarity(regions[i].as_ref().unwrap(), regions[j].as_ref().unwrap())
        };
        s(p).total_cmp(&s(q)).then(q.cmp(p))
    }) {
        let rb = regions[b].take().expect("live region");
        let ra = regions[a].as_mut().expect("live region");
        let (na, nb) = (ra.pixels.len() as f64, rb.pixels.len() as f64);
        for c in 0..3 {
            ra.color[c] = (ra.color[c] * na + rb.color[c] * nb) / (na + nb);
        }
        ra.pixels.extend(rb.pixels);
        ra.bbox = (
            ra.bbox.0.min(rb.bbox.0),
            ra.bbox.1.min(rb.bbox.1),
            ra.bbox.2.max(rb.bbox.2),
            ra.bbox.3.max(rb.bbox.3),
        );
        out.push(ra.pixels.clone());
        let moved: Vec<(usize, usize)> = adj
            .iter()
            .filter(|&&(i, j)| i == b || j == b || (i, j) == (a, b))
            .cloned()
            .collect();
        for e in moved {
            adj.remove(&e);
            let other = if e.0 == b { e.1 } else { e.0 };
            if e != (a, b) && other != a {
                adj.insert((a.min(other), a.max(other)));
            }
        }
    }
    out
}

/// Mask proposals for an `H×W×3` image. Deterministic for a given `seed`.
pub fn builtin_mask_proposals(
    image: ArrayView3<f32>,
    cfg: &SegmentConfig,
    seed: u64,
) -> MaskProposalSet {
    let (h, w, _) = image.dim();
    let mut candidates: Vec<BinaryMask> = Vec::new();
    for &k in &cfg.scales {
        let (labels, n) = graph_segment(image, k, cfg.min_size, cfg.smoothing_sigma);
        for pixels in hierarchy(image, &labels, n) {
            // the whole image is not a useful object proposal
            if pixels.len() == h * w || pixels.is_empty() {
                continue;
            }
            let mut m = BinaryMask::from_elem((h, w), false);
            for p in pixels {
                m[[p / w, p % w]] = true;
            }
            candidates.push(m);
        }
    }
    let mut kept: Vec<BinaryMask> = Vec::new();
    for m in candidates {
        if kept.iter().all(|k| masks::iou(k, &m) <= cfg.dedup_iou) {
            kept.push(m);
        }
    }
    if kept.len() > cfg.max_proposals {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        kept.shuffle(&mut rng);
        kept.truncate(cfg.max_proposals);
    }
    let mut cells = 2;
    while kept.len() < cfg.min_proposals {
        // pad with grid cells so downstream refinement always has candidates
        for gy in 0..cells {
            for gx in 0..cells {
                let (y0, y1) = (gy * h / cells, (gy + 1) * h / cells);
                let (x0, x1) = (gx * w / cells, (gx + 1) * w / cells);
                if y1 > y0 && x1 > x0 && kept.len() < cfg.min_proposals {
                    kept.push(BinaryMask::from_shape_fn((h, w), |(y, x)| {
                        y >= y0 && y < y1 && x >= x0 && x < x1
                    }));
                }
            }
        }
        cells += 1;
    }
    MaskProposalSet {
        masks: kept,
        origin: ProposalOrigin::Builtin,
    }
}

/// Reads every `*.png` in `dir` (sorted by name) as a mask: non-zero pixels
/// are inside.
pub fn load_mask_proposals(dir: &Path, height: usize, width: usize) -> Result<MaskProposalSet> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io_at(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let img = image::open(&p)?.into_luma8();
        if img.width() as usize != width || img.height() as usize != height {
            return Err(Error::ShapeMismatch(format!(
                "{} is {}x{}, expected {width}x{height}",
                p.display(),
                img.width(),
                img.height()
            )));
        }
        let m = BinaryMask::from_shape_fn((height, width), |(y, x)| {
            img.get_pixel(x as u32, y as u32)[0] > 0
        });
        if masks::area(&m) > 0 {
            out.push(m);
        }
    }
    Ok(MaskProposalSet {
        masks: out,
        origin: ProposalOrigin::External(dir.display().to_string()),
    })
}
