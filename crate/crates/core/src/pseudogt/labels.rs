use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::refine::{refine_with_proposals, MaskProposalSet, CONTAINMENT};
use super::trimap::{edge_refine, threshold_trimap, EdgeRefineConfig, Trimap, BG, FG, IGNORE};
use super::JitterConfig;
use crate::bbam::{bbam_for_instance, AttributionMask, BbamConfig, IterationLog};
use crate::detector::HeadModel;
use crate::error::{Error, Result};
use crate::masks::{box_mask, BinaryMask};
use crate::nn::Real;
use crate::segtrain::IGNORE_LABEL;
use crate::synthdata::{derive_seed, Scene};

/// Attribution result for one ground-truth instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAttribution {
    pub class_id: usize,
    /// `None` when no jittered proposal was positive.
    pub mask: Option<AttributionMask>,
    pub positive_fraction: f64,
    pub area_ratio: f64,
    /// Per-iteration objective and head losses of the optimization.
    #[serde(default)]
    pub trajectory: Vec<IterationLog>,
}

/// Attributions for every instance of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAttributions {
    pub scene_seed: u64,
    pub instances: Vec<InstanceAttribution>,
}

/// Runs the attribution for every ground-truth box of `scene`.
pub fn attribute_scene<T: Real, D: HeadModel<T>>(
    detector: &D,
    scene: &Scene,
    mean: [f64; 3],
    jitter: &JitterConfig,
    config: &BbamConfig,
    seed: u64,
) -> Result<SceneAttributions> {
    let image = scene.chw::<T>();
    let mut instances = Vec::with_capacity(scene.instances.len());
    for (i, inst) in scene.instances.iter().enumerate() {
        let s = derive_seed(seed ^ scene.seed, i as u64);
        match bbam_for_instance(
            detector,
            image.view(),
            mean,
            &inst.bbox,
            inst.class_id,
            jitter,
            config,
            s,
        ) {
            Ok(b) => instances.push(InstanceAttribution {
                class_id: inst.class_id,
                positive_fraction: b.proposals.positive_fraction(),
                area_ratio: b.area_ratio,
                mask: Some(b.mask),
                trajectory: b.trajectory,
            }),
            Err(Error::NoPositiveProposals(msg)) => {
                log::warn!("scene {} instance {i}: {msg}", scene.seed);
                instances.push(InstanceAttribution {
                    class_id: inst.class_id,
                    mask: None,
                    positive_fraction: 0.0,
                    area_ratio: 0.0,
                    trajectory: Vec::new(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SceneAttributions {
        scene_seed: scene.seed,
        instances,
    })
}

/// How attribution maps become trimaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub theta_fg: f64,
    pub theta_bg: f64,
    pub edge_refine: bool,
    pub edge: EdgeRefineConfig,
    pub containment: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            theta_fg: 0.8,
            theta_bg: 0.2,
            edge_refine: true,
            edge: EdgeRefineConfig::default(),
            containment: CONTAINMENT,
        }
    }
}

/// Box-fill trimap: the whole box is foreground, everything else background.
pub fn box_fill_trimap(scene: &Scene, index: usize) -> Trimap {
    let inst = &scene.instances[index];
    Trimap::from_mask(
        &box_mask(&inst.bbox, scene.height(), scene.width()),
        index,
        inst.class_id,
    )
}

/// Threshold, optional edge refinement, and optional proposal union for one
/// instance. Without a map the box-fill trimap is returned.
pub fn instance_trimap(
    scene: &Scene,
    index: usize,
    attribution: &InstanceAttribution,
    proposals: Option<&MaskProposalSet>,
    cfg: &LabelConfig,
) -> Result<Trimap> {
    let Some(mask) = &attribution.mask else {
        return Ok(box_fill_trimap(scene, index));
    };
    let up = mask.upsampled();
    let mut t = threshold_trimap(
        up.view(),
        cfg.theta_fg,
        cfg.theta_bg,
        index,
        attribution.class_id,
    )?;
    if cfg.edge_refine {
        t = edge_refine(&t, scene.image.view(), &cfg.edge);
    }
    if let Some(p) = proposals {
        if !p.masks.is_empty() {
            let fg = t.foreground();
            if fg.iter().any(|&v| v) {
                let refined = refine_with_proposals(&fg, &p.masks, cfg.containment)?;
                t.labels.zip_mut_with(&refined, |l, &r| {
                    if r {
                        *l = FG;
                    } else if *l == FG {
                        *l = IGNORE;
                    }
                });
            }
        }
    }
    Ok(t)
}

/// Merges instance trimaps into a semantic label map (`0` background,
/// `class + 1` foreground, [`IGNORE_LABEL`] ignore). Pixels claimed by two or
/// more classes are ignored.
pub fn semantic_from_trimaps(trimaps: &[Trimap], height: usize, width: usize) -> Array2<u8> {
    Array2::from_shape_fn((height, width), |p| {
        let mut class: Option<usize> = None;
        let mut conflict = false;
        let mut unsure = false;
        for t in trimaps {
            match t.labels[p] {
                FG => match class {
                    None => class = Some(t.class_id),
                    Some(c) if c != t.class_id => conflict = true,
                    _ => {}
                },
                IGNORE => unsure = true,
                _ => {}
            }
        }
        match class {
            _ if conflict => IGNORE_LABEL,
            Some(c) => (c + 1) as u8,
            None if unsure => IGNORE_LABEL,
            None => 0,
        }
    })
}

/// Pseudo labels of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePseudoLabels {
    pub instances: Vec<Trimap>,
    pub semantic: Array2<u8>,
    /// Instances that fell back to box-fill.
    pub fallbacks: usize,
}

/// Builds trimaps and the semantic map for every scene. `proposals[i]`, when
/// given, refines scene `i`.
pub fn build_pseudo_labels(
    scenes: &[Scene],
    attributions: &[SceneAttributions],
    proposals: Option<&[MaskProposalSet]>,
    cfg: &LabelConfig,
) -> Result<Vec<ScenePseudoLabels>> {
    if attributions.len() != scenes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scenes but {} attribution sets",
            scenes.len(),
            attributions.len()
        )));
    }
    scenes
        .iter()
        .zip(attributions)
        .enumerate()
        .map(|(si, (scene, attr))| {
            let props = proposals.map(|p| &p[si]);
            let mut fallbacks = 0;
            let instances = attr
                .instances
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    fallbacks += usize::from(a.mask.is_none());
                    instance_trimap(scene, i, a, props, cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let semantic = semantic_from_trimaps(&instances, scene.height(), scene.width());
            Ok(ScenePseudoLabels {
                instances,
                semantic,
                fallbacks,
            })
        })
        .collect()
}

/// Box-fill labels for every scene.
pub fn box_fill_labels(scenes: &[Scene]) -> Vec<ScenePseudoLabels> {
    scenes
        .iter()
        .map(|s| {
            let instances: Vec<Trimap> = (0..s.instances.len())
                .map(|i| box_fill_trimap(s, i))
                .collect();
            let semantic = semantic_from_trimaps(&instances, s.height(), s.width());
            ScenePseudoLabels {
                instances,
                semantic,
                fallbacks: 0,
            }
        })
        .collect()
}

/// Ground-truth masks in the same form.
pub fn ground_truth_labels(scenes: &[Scene]) -> Vec<ScenePseudoLabels> {
    scenes
        .iter()
        .map(|s| ScenePseudoLabels {
            instances: s
                .instances
                .iter()
                .enumerate()
                .map(|(i, inst)| Trimap::from_mask(&inst.mask, i, inst.class_id))
                .collect(),
            semantic: crate::synthdata::semantic_labels(s),
            fallbacks: 0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrimapIndexEntry {
    scene: usize,
    instance: usize,
    class_id: usize,
    file: String,
}

/// Writes one PNG per instance trimap and per semantic map plus `index.json`.
pub fn save_pseudo_labels(dir: &Path, labels: &[ScenePseudoLabels]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let mut index = Vec::new();
    for (si, s) in labels.iter().enumerate() {
        for t in &s.instances {
            let file = format!("scene_{si:05}_inst_{:02}.png", t.instance_id);
            write_label_png(&dir.join(&file), &t.labels)?;
            index.push(TrimapIndexEntry {
                scene: si,
                instance: t.instance_id,
                class_id: t.class_id,
                file,
            });
        }
        write_label_png(
            &dir.join(format!("scene_{si:05}_semantic.png")),
            &s.semantic,
        )?;
    }
    fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

/// Reads labels written by [`save_pseudo_labels`].
pub fn load_pseudo_labels(dir: &Path) -> Result<Vec<ScenePseudoLabels>> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
    let index: Vec<TrimapIndexEntry> = serde_json::from_str(&text)?;
    let scenes = index.iter().map(|e| e.scene + 1).max().unwrap_or(0);
    let mut out = Vec::with_capacity(scenes);
    for si in 0..scenes {
        let semantic = read_label_png(&dir.join(format!("scene_{si:05}_semantic.png")))?;
        let instances = index
            .iter()
            .filter(|e| e.scene == si)
            .map(|e| {
                Ok(Trimap {
                    labels: read_label_png(&dir.join(&e.file))?,
                    instance_id: e.instance,
                    class_id: e.class_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ScenePseudoLabels {
            instances,
            semantic,
            fallbacks: 0,
        });
    }
    Ok(out)
}

pub fn write_label_png(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([labels[[y as usize, x as usize]]])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_label_png(path: &Path) -> Result<Array2<u8>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)?.into_luma8();
    Ok(Array2::from_shape_fn(
        (img.height() as usize, img.width() as usize),
        |(y, x)| img.get_pixel(x as u32, y as u32)[0],
    ))
}

/// Foreground of each instance trimap as a binary mask.
pub fn foreground_masks(labels: &ScenePseudoLabels) -> Vec<BinaryMask> {
    labels.instances.iter().map(|t| t.foreground()).collect()
}

/// Fraction of pixels labelled background/foreground/ignore.
pub fn label_fractions(t: &Trimap) -> [f64; 3] {
    let n = t.labels.len() as f64;
    [
        t.count(BG) as f64 / n,
        t.count(FG) as f64 / n,
        t.count(IGNORE) as f64 / n,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, GeneratorConfig};

    #[test]
    fn single_instance_semantic_equals_trimap() {
        let mut t = Trimap::from_mask(
            &BinaryMask::from_shape_fn((4, 4), |(y, x)| y < 2 && x < 3),
            0,
            2,
        );
        t.labels[[3, 3]] = IGNORE;
        let sem = semantic_from_trimaps(std::slice::from_ref(&t), 4, 4);
        for (p, &l) in t.labels.iter().enumerate() {
            let want = match l {
                FG => 3,
                BG => 0,
                _ => IGNORE_LABEL,
            };
            assert_eq!(sem.as_slice().unwrap()[p], want);
        }
    }

    #[test]
    fn class_conflicts_are_ignored() {
        let a = Trimap::from_mask(&BinaryMask::from_shape_fn((3, 3), |(_, x)| x < 2), 0, 0);
        let b = Trimap::from_mask(&BinaryMask::from_shape_fn((3, 3), |(_, x)| x > 0), 1, 1);
        let sem = semantic_from_trimaps(&[a, b], 3, 3);
        assert_eq!(sem.column(0).to_vec(), vec![1; 3]);
        assert_eq!(sem.column(1).to_vec(), vec![IGNORE_LABEL; 3]);
        assert_eq!(sem.column(2).to_vec(), vec![2; 3]);
    }

    #[test]
    fn missing_attribution_falls_back_to_box() {
        let scene = generate_scene(
            &GeneratorConfig {
                width: 64,
                height: 64,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let attr = InstanceAttribution {
            class_id: scene.instances[0].class_id,
            mask: None,
            positive_fraction: 0.0,
            area_ratio: 0.0,
            trajectory: Vec::new(),
        };
        let t = instance_trimap(&scene, 0, &attr, None, &LabelConfig::default()).unwrap();
        assert_eq!(t, box_fill_trimap(&scene, 0));
    }

    #[test]
    fn label_files_round_trip() {
        let scenes: Vec<Scene> = (0..2)
            .map(|i| {
                generate_scene(
                    &GeneratorConfig {
                        width: 64,
                        height: 64,
                        ..Default::default()
                    },
                    i,
                )
                .unwrap()
            })
            .collect();
        let labels = box_fill_labels(&scenes);
        let dir = tempfile::tempdir().unwrap();
        save_pseudo_labels(dir.path(), &labels).unwrap();
        let back = load_pseudo_labels(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].semantic, labels[1].semantic);
        assert_eq!(back[0].instances, labels[0].instances);
    }
}
