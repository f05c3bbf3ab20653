use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::run::{Pipeline, Split};
use crate::analysis::{
    bucket_iou, comparator_strides, default_thresholds, density, growth_ratio, head_position_study,
    heatmap, indicator, line_chart, localization_accuracy, loss_curves, mass_inside, noise_csv,
    non_increasing_in_noise, pseudo_quality, radial_profile, simple_grad, smooth_grad,
    stride_table, LossCurves, NoisePoint, Provenance, PseudoQuality, Series, SizeBuckets,
    StrideTable, BUCKET_NAMES, GRADIENT_SCALAR,
};
use crate::bbam::{Heads, StridePolicy};
use crate::detector::DetectorEval;
use crate::error::Result;
use crate::masks::box_mask;
use crate::pseudogt::SceneAttributions;
use crate::segtrain::EvalReport;
use crate::synthdata::derive_seed;

/// Best-threshold localization IoU of each attribution method on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionQuality {
    pub seed: u64,
    pub instances: usize,
    pub bbam: f64,
    pub smooth_grad: f64,
    pub simple_grad: f64,
    pub box_fill: f64,
    /// Mean share of map mass inside the ground-truth box.
    pub bbam_mass_inside: f64,
    pub simple_grad_mass_inside: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrideRun {
    pub seed: u64,
    pub fixed_small: usize,
    pub fixed_large: usize,
    pub table: StrideTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStudy {
    /// Mean `‖R‖` of highly activated pixels per head setting.
    pub mean_norm: BTreeMap<String, Option<f64>>,
    pub curves: Vec<LossCurves>,
    /// Growth of the cls loss while only the box head is preserved.
    pub cls_growth_box_only: f64,
    /// Growth of the box loss while only the cls head is preserved.
    pub box_growth_cls_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalAblation {
    pub with_proposals: [f64; 3],
    pub without_proposals: [f64; 3],
    pub counts: [usize; 3],
}

impl ProposalAblation {
    /// Count-weighted mean over the medium and large buckets.
    pub fn medium_large(v: &[f64; 3], counts: &[usize; 3]) -> f64 {
        let n = (counts[1] + counts[2]).max(1) as f64;
        (v[1] * counts[1] as f64 + v[2] * counts[2] as f64) / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub quality: PseudoQuality,
}

/// One pass/fail line of the acceptance checklist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Every metric the acceptance criteria read, plus the criteria verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub detector: DetectorEval,
    pub attribution: Vec<AttributionQuality>,
    pub strides: Vec<StrideRun>,
    pub heads: HeadStudy,
    pub seg: BTreeMap<String, EvalReport>,
    pub pseudo: BTreeMap<String, PseudoQuality>,
    pub proposals: ProposalAblation,
    pub noise: Vec<NoisePoint>,
    pub lambda: Vec<LambdaRow>,
    pub criteria: Vec<Criterion>,
}

/// Label sources that get a segmentation model.
pub const SEG_SOURCES: [&str; 6] = [
    "gt",
    "boxfill",
    "bbam",
    "bbam_box",
    "bbam_cls",
    "bbam_t0.2_0.2",
];

impl Pipeline {
    fn provenance(&self, seed: u64) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed,
        }
    }

    fn seeds(&self) -> Vec<u64> {
        self.config.analysis.seeds.clone()
    }

    pub fn attribution_quality(&self, seed: u64) -> Result<AttributionQuality> {
        self.cached(&format!("analysis/grad_compare_s{seed}.json"), || {
            let attrs =
                self.attributions(&self.val_job(seed, Some(Heads::Both), None, None, 0.0))?;
            let scenes = self.split(Split::Val, self.config.analysis.scenes, 0.0)?;
            let det = self.detector()?;
            let a = &self.config.analysis;
            let (mut bb, mut sm, mut si, mut bf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let (mut mass_b, mut mass_s) = (0.0, 0.0);
            for (scene, sa) in scenes.iter().zip(&attrs) {
                let img = scene.chw::<f32>();
                for (k, (inst, attr)) in scene.instances.iter().zip(&sa.instances).enumerate() {
                    let Some(mask) = &attr.mask else { continue };
                    let up = mask.upsampled();
                    let simple =
                        simple_grad(det, img.view(), &inst.bbox, inst.class_id, Heads::Both)?;
                    let s = derive_seed(seed ^ scene.seed, k as u64);
                    let smooth = smooth_grad(
                        det,
                        img.view(),
                        &inst.bbox,
                        inst.class_id,
                        Heads::Both,
                        a.smooth_grad_sigma,
                        a.smooth_grad_samples,
                        s,
                    )?;
                    mass_b += mass_inside(&up, &inst.bbox);
                    mass_s += mass_inside(&simple, &inst.bbox);
                    let fill = indicator(&box_mask(&inst.bbox, scene.height(), scene.width()));
                    bb.push((up, &inst.mask));
                    si.push((simple, &inst.mask));
                    sm.push((smooth, &inst.mask));
                    bf.push((fill, &inst.mask));
                }
            }
            let t = default_thresholds();
            let n = bb.len();
            let q = AttributionQuality {
                seed,
                instances: n,
                bbam: localization_accuracy(&bb, &t)?.best_iou,
                smooth_grad: localization_accuracy(&sm, &t)?.best_iou,
                simple_grad: localization_accuracy(&si, &t)?.best_iou,
                box_fill: localization_accuracy(&bf, &t)?.best_iou,
                bbam_mass_inside: mass_b / n.max(1) as f64,
                simple_grad_mass_inside: mass_s / n.max(1) as f64,
            };
            if let Some(first) = scenes.first() {
                if let (Some(inst), Some(Some(m))) = (
                    first.instances.first(),
                    attrs[0].instances.first().map(|a| a.mask.as_ref()),
                ) {
                    let img = first.chw::<f32>();
                    let prov = self.provenance(seed);
                    heatmap(&m.upsampled(), 2).write_png(
                        &self.artifact(&format!("analysis/example_s{seed}_bbam.png")),
                        &prov,
                        "BBAM, first val instance",
                    )?;
                    let g = simple_grad(det, img.view(), &inst.bbox, inst.class_id, Heads::Both)?;
                    heatmap(&g, 2).write_png(
                        &self.artifact(&format!("analysis/example_s{seed}_simple_grad.png")),
                        &prov,
                        GRADIENT_SCALAR,
                    )?;
                }
            }
            Ok(q)
        })
    }

    pub fn stride_run(&self, seed: u64) -> Result<StrideRun> {
        let run: StrideRun = self.cached(&format!("analysis/strides_s{seed}.json"), || {
            let scenes = self.split(Split::Val, self.config.analysis.scenes, 0.0)?;
            let policy = match self.config.bbam.stride {
                StridePolicy::Fixed { .. } => StridePolicy::default(),
                p => p,
            };
            let (small, large) = comparator_strides(&scenes, &policy)?;
            let adaptive = self.attributions(&self.val_job(seed, None, None, Some(policy), 0.0))?;
            let fs = self.attributions(&self.val_job(
                seed,
                None,
                None,
                Some(StridePolicy::Fixed { stride: small }),
                0.0,
            ))?;
            let fl = self.attributions(&self.val_job(
                seed,
                None,
                None,
                Some(StridePolicy::Fixed { stride: large }),
                0.0,
            ))?;
            let variants: Vec<(String, &[SceneAttributions])> = vec![
                (policy.label(), &adaptive),
                (format!("fixed_small_{small}"), &fs),
                (format!("fixed_large_{large}"), &fl),
            ];
            let table = stride_table(
                &scenes,
                &variants,
                SizeBuckets::from_scenes(&scenes),
                self.config.analysis.mask_threshold,
            )?;
            Ok(StrideRun {
                seed,
                fixed_small: small,
                fixed_large: large,
                table,
            })
        })?;
        let prov = self.provenance(seed);
        self.write_text(
            &format!("analysis/strides_s{seed}.csv"),
            &run.table.to_csv(&prov),
        )?;
        let series: Vec<Series> = run
            .table
            .policies
            .iter()
            .zip(&run.table.iou)
            .map(|(p, row)| Series {
                name: p.clone(),
                points: (0..3).map(|b| (b as f64, row[b])).collect(),
            })
            .collect();
        let (c, cap) = line_chart(&series, 360, 240);
        c.write_png(
            &self.artifact(&format!("analysis/strides_s{seed}.png")),
            &prov,
            &format!(
                "mean IoU by size bucket (x = {}); {cap}",
                BUCKET_NAMES.join("/")
            ),
        )?;
        Ok(run)
    }

    pub fn head_study(&self) -> Result<HeadStudy> {
        let seed = self.seeds()[0];
        let study: HeadStudy = self.cached("analysis/heads.json", || {
            let scenes = self.split(Split::Val, self.config.analysis.scenes, 0.0)?;
            let a = &self.config.analysis;
            let mut mean_norm = BTreeMap::new();
            let mut curves = Vec::new();
            let prov = self.provenance(seed);
            for heads in [Heads::Box, Heads::Cls, Heads::Both] {
                let attrs = self.attributions(&self.val_job(seed, Some(heads), None, None, 0.0))?;
                let mut maps = Vec::new();
                for (scene, sa) in scenes.iter().zip(&attrs) {
                    for (inst, attr) in scene.instances.iter().zip(&sa.instances) {
                        if let Some(m) = &attr.mask {
                            maps.push((m.upsampled(), &inst.mask));
                        }
                    }
                }
                let pos = head_position_study(&maps, a.activation_cutoff)?;
                mean_norm.insert(heads.name().to_string(), pos.mean_norm);
                let d = density(&pos.points, a.kde_bins, a.kde_bandwidth);
                let caption = format!(
                    "relative positions of pixels above {} for the {} head; gaussian kernel density, fixed bandwidth {}, grid {}x{} over [-1,1]^2",
                    a.activation_cutoff, heads.name(), a.kde_bandwidth, a.kde_bins, a.kde_bins
                );
                heatmap(&d, 4).write_png(&self.artifact(&format!("analysis/heads_density_{}.png", heads.name())), &prov, &caption)?;
                let prof = radial_profile(&pos.points, 10);
                let mut csv = prov.csv_preamble(&[("head", heads.name().into()), ("points", pos.points.len().to_string())]);
                csv += "r_bin_center,density\n";
                for (i, v) in prof.iter().enumerate() {
                    csv += &format!("{:.2},{v:.6}\n", (i as f64 + 0.5) / 10.0);
                }
                self.write_text(&format!("analysis/heads_radial_{}.csv", heads.name()), &csv)?;
                curves.push(loss_curves(heads.name(), &attrs)?);
            }
            let (w, e) = (a.loss_smoothing, a.loss_reference_iteration);
            let get = |h: &str| curves.iter().find(|c| c.heads == h).expect("curve computed");
            Ok(HeadStudy {
                cls_growth_box_only: growth_ratio(&get("box").cls_loss, w, e),
                box_growth_cls_only: growth_ratio(&get("cls").box_loss, w, e),
                mean_norm,
                curves,
            })
        })?;
        let prov = self.provenance(seed);
        let mut csv = prov.csv_preamble(&[(
            "smoothing_window",
            self.config.analysis.loss_smoothing.to_string(),
        )]);
        csv += "optimized_heads,iteration,box_loss,cls_loss\n";
        let mut series = Vec::new();
        for c in &study.curves {
            for (i, (b, l)) in c.box_loss.iter().zip(&c.cls_loss).enumerate() {
                csv += &format!("{},{i},{b:.6},{l:.6}\n", c.heads);
            }
            let sm = |v: &[f64]| crate::bbam::smoothed(v, self.config.analysis.loss_smoothing);
            series.push(Series {
                name: format!("{} opt: box loss", c.heads),
                points: sm(&c.box_loss)
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| (i as f64, v))
                    .collect(),
            });
            series.push(Series {
                name: format!("{} opt: cls loss", c.heads),
                points: sm(&c.cls_loss)
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| (i as f64, v))
                    .collect(),
            });
        }
        self.write_text("analysis/cross_head_losses.csv", &csv)?;
        let (c, cap) = line_chart(&series, 420, 280);
        c.write_png(
            &self.artifact("analysis/cross_head_losses.png"),
            &prov,
            &cap,
        )?;
        Ok(study)
    }

    /// Pseudo-label quality of a val-study attribution job.
    fn val_label_quality(
        &self,
        attrs: &[SceneAttributions],
        box_noise: f64,
    ) -> Result<PseudoQuality> {
        let clean = self.split(Split::Val, self.config.analysis.scenes, 0.0)?;
        let noisy = self.split(Split::Val, self.config.analysis.scenes, box_noise)?;
        let main = self
            .label_variants()
            .into_iter()
            .next()
            .expect("main variant");
        let props = if main.proposals {
            self.mask_proposals(Split::Val, clean.len())?
        } else {
            vec![None; clean.len()]
        };
        let labels = self.build_labels(&noisy, attrs, &main, &props)?;
        pseudo_quality(&clean, &labels, Some(attrs), self.num_classes())
    }

    pub fn noise_study(&self) -> Result<Vec<NoisePoint>> {
        let seed = self.seeds()[0];
        let points: Vec<NoisePoint> = self.cached("analysis/noise.json", || {
            let mut out = Vec::new();
            for &level in &self.config.analysis.noise_levels {
                let attrs = self.attributions(&self.val_job(seed, None, None, None, level))?;
                out.push(NoisePoint {
                    level,
                    ap50: self.val_label_quality(&attrs, level)?.ap50,
                });
            }
            Ok(out)
        })?;
        let prov = self.provenance(seed);
        self.write_text("analysis/noise.csv", &noise_csv(&points, &prov))?;
        let branch = |sign: f64| {
            let mut v: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.level == 0.0 || p.level.signum() == sign)
                .map(|p| (p.level.abs() * 100.0, p.ap50))
                .collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            v
        };
        let (c, cap) = line_chart(
            &[
                Series {
                    name: "expanded".into(),
                    points: branch(1.0),
                },
                Series {
                    name: "contracted".into(),
                    points: branch(-1.0),
                },
            ],
            360,
            240,
        );
        c.write_png(
            &self.artifact("analysis/noise.png"),
            &prov,
            &format!("pseudo-mask AP50 vs box noise (%); {cap}"),
        )?;
        Ok(points)
    }

    pub fn lambda_study(&self) -> Result<Vec<LambdaRow>> {
        let seed = self.seeds()[0];
        let rows: Vec<LambdaRow> = self.cached("analysis/lambda.json", || {
            let mut out = Vec::new();
            for &lambda in &self.config.analysis.lambdas {
                let attrs =
                    self.attributions(&self.val_job(seed, None, Some(lambda), None, 0.0))?;
                out.push(LambdaRow {
                    lambda,
                    quality: self.val_label_quality(&attrs, 0.0)?,
                });
            }
            Ok(out)
        })?;
        let prov = self.provenance(seed);
        let best = rows
            .iter()
            .max_by(|a, b| a.quality.ap50.total_cmp(&b.quality.ap50))
            .map(|r| r.lambda);
        let mut csv = prov.csv_preamble(&[("argmax_lambda_ap50", format!("{best:?}"))]);
        csv += "lambda,ins_ap50,ins_mean_iou,sem_miou,precision,config_hash\n";
        for r in &rows {
            let q = r.quality;
            csv += &format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.lambda, q.ap50, q.mean_iou, q.semantic_miou, q.precision, prov.config_hash
            );
        }
        self.write_text("analysis/lambda.csv", &csv)?;
        let (c, cap) = line_chart(
            &[
                Series {
                    name: "ins ap50".into(),
                    points: rows.iter().map(|r| (r.lambda, r.quality.ap50)).collect(),
                },
                Series {
                    name: "sem miou".into(),
                    points: rows
                        .iter()
                        .map(|r| (r.lambda, r.quality.semantic_miou))
                        .collect(),
                },
            ],
            360,
            240,
        );
        c.write_png(&self.artifact("analysis/lambda.png"), &prov, &cap)?;
        Ok(rows)
    }

    /// Label quality on the train subset for every variant.
    pub fn pseudo_qualities(&self) -> Result<BTreeMap<String, PseudoQuality>> {
        self.cached("pseudo/quality.json", || {
            let scenes = self.split(Split::Train, self.config.pseudo.scenes, 0.0)?;
            let mut out = BTreeMap::new();
            let names: Vec<String> = ["boxfill".to_string()]
                .into_iter()
                .chain(self.label_variants().into_iter().map(|v| v.name))
                .collect();
            for name in names {
                let labels = self.pseudo_labels(&name)?;
                let attrs = match name.as_str() {
                    "boxfill" => None,
                    _ => {
                        let v = self
                            .label_variants()
                            .into_iter()
                            .find(|v| v.name == name)
                            .expect("variant");
                        Some(self.attributions(&self.train_job(v.heads))?)
                    }
                };
                out.insert(
                    name,
                    pseudo_quality(&scenes, &labels, attrs.as_deref(), self.num_classes())?,
                );
            }
            Ok(out)
        })
    }

    pub fn proposal_ablation(&self) -> Result<ProposalAblation> {
        self.cached("pseudo/proposal_ablation.json", || {
            let scenes = self.split(Split::Train, self.config.pseudo.scenes, 0.0)?;
            let buckets = SizeBuckets::from_scenes(&scenes);
            let main = self
                .label_variants()
                .into_iter()
                .next()
                .expect("main variant");
            let attrs = self.attributions(&self.train_job(main.heads))?;
            let props = self.mask_proposals(Split::Train, scenes.len())?;
            let with = crate::pipeline::LabelVariant {
                proposals: true,
                ..main.clone()
            };
            let lw = self.build_labels(&scenes, &attrs, &with, &props)?;
            let lo = self.pseudo_labels("bbam_noprop")?;
            let (w, counts) = bucket_iou(&scenes, &lw, buckets);
            let (o, _) = bucket_iou(&scenes, &lo, buckets);
            Ok(ProposalAblation {
                with_proposals: w,
                without_proposals: o,
                counts,
            })
        })
    }

    /// Runs every stage and writes `summary.json` and `summary.txt`.
    pub fn summary(&self) -> Result<Summary> {
        let detector = self.detector_eval()?;
        let mut seg = BTreeMap::new();
        for s in SEG_SOURCES {
            seg.insert(s.to_string(), self.seg_report(s)?);
        }
        let pseudo = self.pseudo_qualities()?;
        let proposals = self.proposal_ablation()?;
        let attribution = self
            .seeds()
            .into_iter()
            .map(|s| self.attribution_quality(s))
            .collect::<Result<Vec<_>>>()?;
        let strides = self
            .seeds()
            .into_iter()
            .map(|s| self.stride_run(s))
            .collect::<Result<Vec<_>>>()?;
        let heads = self.head_study()?;
        let noise = self.noise_study()?;
        let lambda = self.lambda_study()?;
        let mut summary = Summary {
            config_hash: self.hash(),
            seed: self.config.seed,
            detector,
            attribution,
            strides,
            heads,
            seg,
            pseudo,
            proposals,
            noise,
            lambda,
            criteria: Vec::new(),
        };
        summary.criteria = evaluate_criteria(&summary, &self.config.analysis.noise_levels);
        super::run::write_json_atomic(&self.dir.join("summary.json"), &summary)?;
        self.write_text("summary.txt", &summary_text(&summary))?;
        Ok(summary)
    }
}

fn count_pass(v: impl Iterator<Item = bool>) -> (usize, usize) {
    v.fold((0, 0), |(p, n), ok| (p + usize::from(ok), n + 1))
}

/// Verdicts for the pipeline-level criteria (3 to 10).
pub fn evaluate_criteria(s: &Summary, noise_levels: &[f64]) -> Vec<Criterion> {
    let mut out = Vec::new();
    let mut push = |id, name: &str, passed, detail: String| {
        out.push(Criterion {
            id,
            name: name.into(),
            passed,
            detail,
        })
    };

    push(
        3,
        "detector gate",
        s.detector.ap50 >= 0.90,
        format!("val AP50 {:.3} (need >= 0.900)", s.detector.ap50),
    );

    let (p, n) = count_pass(s.attribution.iter().map(|a| {
        a.bbam > a.smooth_grad
            && a.smooth_grad > 0.0
            && a.bbam > a.simple_grad
            && a.bbam >= a.box_fill + 0.05
    }));
    let d = s
        .attribution
        .iter()
        .map(|a| {
            format!(
                "s{}: bbam {:.3} smooth {:.3} simple {:.3} boxfill {:.3}",
                a.seed, a.bbam, a.smooth_grad, a.simple_grad, a.box_fill
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    push(
        4,
        "attribution quality ordering",
        n > 0 && p == n,
        format!("{p}/{n} seeds; {d}"),
    );

    let (p, n) = count_pass(s.strides.iter().map(|r| {
        let t = &r.table;
        let ad = &t.policies[0];
        let fs = &t.policies[1];
        let fl = &t.policies[2];
        let g = |a: &str, b| t.get(a, b).unwrap_or(0.0);
        g(ad, 2) >= g(fs, 2) + 0.02 && g(ad, 0) >= g(fl, 0) + 0.02
    }));
    let d = s
        .strides
        .iter()
        .map(|r| {
            let t = &r.table;
            format!(
                "s{}: large {:.3} vs small-stride {:.3}, small {:.3} vs large-stride {:.3}",
                r.seed, t.iou[0][2], t.iou[1][2], t.iou[0][0], t.iou[2][0]
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    push(
        5,
        "adaptive stride trend",
        p >= 2.min(n) && n > 0,
        format!("{p}/{n} seeds; {d}"),
    );

    let miou = |k: &str| s.seg.get(k).map_or(0.0, |r| r.miou);
    let ok6 = miou("bbam") >= miou("bbam_box")
        && miou("bbam") >= miou("bbam_cls")
        && s.heads.cls_growth_box_only >= 2.0
        && s.heads.box_growth_cls_only >= 2.0;
    push(
        6,
        "head complementarity",
        ok6,
        format!(
            "mIoU both {:.3} box {:.3} cls {:.3}; cross-loss growth cls|box-only {:.2}x, box|cls-only {:.2}x",
            miou("bbam"),
            miou("bbam_box"),
            miou("bbam_cls"),
            s.heads.cls_growth_box_only,
            s.heads.box_growth_cls_only
        ),
    );

    let ok7 = miou("bbam") >= 0.8 * miou("gt") && miou("bbam") > miou("boxfill");
    push(
        7,
        "end-to-end relative performance",
        ok7,
        format!(
            "mIoU bbam {:.3} ({:.1}% of gt {:.3}), boxfill {:.3}",
            miou("bbam"),
            100.0 * miou("bbam") / miou("gt").max(1e-12),
            miou("gt"),
            miou("boxfill")
        ),
    );

    let ap = |k: &str| s.seg.get(k).and_then(|r| r.ap_at(0.5)).unwrap_or(0.0);
    push(
        8,
        "threshold ablation",
        ap("bbam") >= ap("bbam_t0.2_0.2"),
        format!(
            "AP50 (0.8,0.2) {:.3} vs (0.2,0.2) {:.3}",
            ap("bbam"),
            ap("bbam_t0.2_0.2")
        ),
    );

    let pa = &s.proposals;
    let w = ProposalAblation::medium_large(&pa.with_proposals, &pa.counts);
    let o = ProposalAblation::medium_large(&pa.without_proposals, &pa.counts);
    push(
        9,
        "proposal refinement ablation",
        w >= o,
        format!("medium+large mean IoU with {w:.3} vs without {o:.3}"),
    );

    let emitted = noise_levels
        .iter()
        .all(|l| s.noise.iter().any(|p| p.level == *l))
        && s.noise.iter().any(|p| p.level > 0.0)
        && s.noise.iter().any(|p| p.level < 0.0);
    let mono = non_increasing_in_noise(&s.noise, 0.02);
    let mut pts = s.noise.clone();
    pts.sort_by(|a, b| a.level.total_cmp(&b.level));
    let d = pts
        .iter()
        .map(|p| format!("{:+.0}%: {:.3}", p.level * 100.0, p.ap50))
        .collect::<Vec<_>>()
        .join(", ");
    push(10, "noise robustness", emitted && mono, d);
    out
}

pub fn summary_text(s: &Summary) -> String {
    let mut t = format!("config {} seed {}\n", s.config_hash, s.seed);
    t += &format!(
        "detector AP50 {:.3} AP70 {:.3}\n",
        s.detector.ap50, s.detector.ap70
    );
    for (k, r) in &s.seg {
        t += &format!(
            "seg[{k}] mIoU {:.3} AP50 {:.3} AP70 {:.3} ABO {:.3}\n",
            r.miou,
            r.ap_at(0.5).unwrap_or(0.0),
            r.ap_at(0.7).unwrap_or(0.0),
            r.abo
        );
    }
    for (k, q) in &s.pseudo {
        t += &format!(
            "pseudo[{k}] AP50 {:.3} IoU {:.3} sem mIoU {:.3} precision {:.3}\n",
            q.ap50, q.mean_iou, q.semantic_miou, q.precision
        );
    }
    for (h, v) in &s.heads.mean_norm {
        t += &format!(
            "mean |R| {h}: {}\n",
            v.map_or("n/a".into(), |x| format!("{x:.3}"))
        );
    }
    for c in &s.criteria {
        t += &format!(
            "[{}] {:>2} {}: {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            c.detail
        );
    }
    t
}
