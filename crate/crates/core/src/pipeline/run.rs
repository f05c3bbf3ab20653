use std::cell::{OnceCell, RefCell};
use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ProposalSource, RunConfig};
use crate::bbam::{BbamConfig, Heads, StridePolicy};
use crate::detector::{
    evaluate_detector, infer, load_checkpoint, save_checkpoint, train_detector, Detection,
    Detector, DetectorEval, InferConfig, TrainingLog,
};
use crate::error::{Error, Result};
use crate::pseudogt::{
    attribute_scene, box_fill_labels, build_pseudo_labels, builtin_mask_proposals,
    ground_truth_labels, load_mask_proposals, load_pseudo_labels, save_pseudo_labels, LabelConfig,
    MaskProposalSet, SceneAttributions, ScenePseudoLabels,
};
use crate::segtrain::{
    evaluate_instance_model, evaluate_model, load_seg_model, save_seg_model, train_instance_seg,
    train_seg, EvalReport, SegEpochLog, SegMode, SegModel,
};
use crate::synthdata::{
    channel_mean, dataset_digest, derive_seed, load_dataset, save_dataset, DatasetManifest, Scene,
};

/// Exclusive writer lock on a run directory. A lock left by a process that
/// no longer exists is taken over.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("run.lock");
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    let stale = cfg!(target_os = "linux")
                        && owner.is_some_and(|pid| !Path::new(&format!("/proc/{pid}")).exists());
                    if !stale {
                        return Err(Error::Locked(path));
                    }
                    log::warn!("removing stale lock {}", path.display());
                    fs::remove_file(&path)?;
                }
                Err(e) => return Err(Error::io_at(&path, e)),
            }
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One batch of attribution maps: a scene subset, an optimizer setting, a
/// box corruption level and a seed. Cached under `attributions/<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionJob {
    pub name: String,
    pub split: Split,
    pub scenes: usize,
    pub bbam: BbamConfig,
    pub box_noise: f64,
    pub seed: u64,
}

/// How a set of pseudo labels is derived from attribution maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVariant {
    pub name: String,
    pub heads: Heads,
    pub theta_fg: f64,
    pub theta_bg: f64,
    pub proposals: bool,
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io_at(p, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Stage runner over one content-addressed run directory. Each stage
/// reuses its artifact when present; `force` recomputes every stage once.
pub struct Pipeline {
    pub config: RunConfig,
    pub dir: PathBuf,
    force: bool,
    fresh: RefCell<HashSet<PathBuf>>,
    data: OnceCell<(Vec<Scene>, Vec<Scene>)>,
    detector: OnceCell<Detector<f32>>,
    val_override: Option<Vec<Scene>>,
    _lock: RunLock,
}

/// Externally supplied inputs that replace pipeline stages. The run
/// directory name gains a digest of their contents.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub detector: Option<PathBuf>,
    /// Dataset directory used as the val split.
    pub val_data: Option<PathBuf>,
}

impl Pipeline {
    pub fn open(config: RunConfig, force: bool) -> Result<Self> {
        Self::open_with(config, force, Overrides::default())
    }

    pub fn open_with(config: RunConfig, force: bool, overrides: Overrides) -> Result<Self> {
        config.validate()?;
        let mut tag = Sha256::new();
        let detector = OnceCell::new();
        if let Some(p) = &overrides.detector {
            tag.update(fs::read(p).map_err(|e| Error::io_at(p, e))?);
            let _ = detector.set(load_checkpoint(p)?);
        }
        let val_override = match &overrides.val_data {
            Some(p) => {
                let (_, scenes) = load_dataset(p)?;
                tag.update(dataset_digest(&scenes).as_bytes());
                Some(scenes)
            }
            None => None,
        };
        let mut dir = config.run_dir();
        if overrides.detector.is_some() || val_override.is_some() {
            let digest = hex::encode(tag.finalize());
            dir = config
                .run_root
                .join(format!("{}-{}", config.hash(), &digest[..8]));
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
        let lock = RunLock::acquire(&dir)?;
        fs::write(dir.join("config.toml"), config.to_toml())?;
        Ok(Self {
            config,
            dir,
            force,
            fresh: RefCell::new(HashSet::new()),
            data: OnceCell::new(),
            detector,
            val_override,
            _lock: lock,
        })
    }

    /// Name of the run directory (config hash, plus an override digest).
    pub fn hash(&self) -> String {
        self.dir
            .file_name()
            .map_or_else(|| self.config.hash(), |n| n.to_string_lossy().into_owned())
    }

    fn reusable(&self, path: &Path) -> bool {
        path.exists() && (!self.force || self.fresh.borrow().contains(path))
    }

    fn mark(&self, path: PathBuf) {
        self.fresh.borrow_mut().insert(path);
    }

    /// JSON artifact at `rel`, computed on a miss.
    pub fn cached<T: Serialize + DeserializeOwned>(
        &self,
        rel: &str,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let path = self.dir.join(rel);
        if self.reusable(&path) {
            match read_json(&path) {
                Ok(v) => return Ok(v),
                Err(e) => log::warn!("recomputing unreadable {}: {e}", path.display()),
            }
        }
        let v = compute()?;
        write_json_atomic(&path, &v)?;
        self.mark(path);
        Ok(v)
    }

    pub fn num_classes(&self) -> usize {
        self.config.data.generator.classes.len()
    }

    pub fn datasets(&self) -> Result<&(Vec<Scene>, Vec<Scene>)> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let mut out = Vec::new();
        for (split, count) in [
            ("train", self.config.data.train_scenes),
            ("val", self.config.data.val_scenes),
        ] {
            if let (Some(v), "val") = (&self.val_override, split) {
                out.push(v.clone());
                continue;
            }
            let dir = self.dir.join("data").join(split);
            let marker = dir.join(crate::synthdata::MANIFEST_FILE);
            if self.reusable(&marker) {
                if let Ok((_, scenes)) = load_dataset(&dir) {
                    out.push(scenes);
                    continue;
                }
            }
            log::info!("generating {count} {split} scenes");
            let m = DatasetManifest::new(
                split,
                count,
                self.config.seed,
                self.config.data.generator.clone(),
            );
            let scenes = m.generate()?;
            save_dataset(&dir, &m, &scenes)?;
            self.mark(marker);
            out.push(scenes);
        }
        let val = out.pop().expect("two splits");
        let train = out.pop().expect("two splits");
        Ok(self.data.get_or_init(|| (train, val)))
    }

    pub fn pixel_mean(&self) -> Result<[f64; 3]> {
        if let Some(d) = self.detector.get() {
            return Ok(d.pixel_mean);
        }
        Ok(channel_mean(&self.datasets()?.0))
    }

    pub fn detector(&self) -> Result<&Detector<f32>> {
        if let Some(d) = self.detector.get() {
            return Ok(d);
        }
        let path = self.dir.join("detector").join("model.ckpt");
        let det = match self.reusable(&path).then(|| load_checkpoint(&path)) {
            Some(Ok(d)) => d,
            _ => {
                let train = &self.datasets()?.0;
                let mean = self.pixel_mean()?;
                let mut cfg = self.config.detector.train.clone();
                cfg.seed = derive_seed(self.config.seed, cfg.seed);
                let start = std::time::Instant::now();
                let (det, log) = train_detector(train, self.num_classes(), mean, &cfg, |e| {
                    log::info!(
                        "detector epoch {} loss {:.4} acc {:.3} ({:.0}s)",
                        e.epoch,
                        e.loss,
                        e.accuracy,
                        start.elapsed().as_secs_f64()
                    )
                })?;
                save_checkpoint(&path, &det)?;
                write_json_atomic::<TrainingLog>(
                    &self.dir.join("detector").join("train_log.json"),
                    &log,
                )?;
                self.mark(path);
                det
            }
        };
        Ok(self.detector.get_or_init(|| det))
    }

    fn eval_infer_config(&self) -> InferConfig {
        InferConfig {
            score_threshold: self.config.detector.eval_score_threshold,
            ..self.config.detector.infer.clone()
        }
    }

    pub fn detector_eval(&self) -> Result<DetectorEval> {
        self.cached("detector/eval.json", || {
            let det = self.detector()?;
            evaluate_detector(det, &self.datasets()?.1, &self.eval_infer_config())
        })
    }

    /// Detections on every val scene at the evaluation score threshold.
    pub fn val_detections(&self) -> Result<Vec<Vec<Detection>>> {
        self.cached("detector/val_detections.json", || {
            let det = self.detector()?;
            let cfg = self.eval_infer_config();
            self.datasets()?
                .1
                .iter()
                .map(|s| infer(det, s.chw::<f32>().view(), &cfg))
                .collect()
        })
    }

    pub fn split(&self, split: Split, count: usize, box_noise: f64) -> Result<Vec<Scene>> {
        let (train, val) = self.datasets()?;
        let src = match split {
            Split::Train => train,
            Split::Val => val,
        };
        let n = count.min(src.len());
        Ok(src[..n]
            .iter()
            .map(|s| {
                if box_noise == 0.0 {
                    s.clone()
                } else {
                    crate::analysis::corrupt_boxes(s, box_noise)
                }
            })
            .collect())
    }

    pub fn attributions(&self, job: &AttributionJob) -> Result<Vec<SceneAttributions>> {
        let rel = format!("attributions/{}.json", job.name);
        #[derive(Serialize, Deserialize)]
        struct Stored {
            job: AttributionJob,
            scenes: Vec<SceneAttributions>,
        }
        let stored: Stored = self.cached(&rel, || {
            let det = self.detector()?;
            let mean = self.pixel_mean()?;
            let scenes = self.split(job.split, job.scenes, job.box_noise)?;
            let start = std::time::Instant::now();
            let mut out = Vec::with_capacity(scenes.len());
            for (i, s) in scenes.iter().enumerate() {
                out.push(attribute_scene(
                    det,
                    s,
                    mean,
                    &self.config.pseudo.jitter,
                    &job.bbam,
                    job.seed,
                )?);
                log::debug!(
                    "{} scene {}/{} ({:.0}s)",
                    job.name,
                    i + 1,
                    scenes.len(),
                    start.elapsed().as_secs_f64()
                );
            }
            log::info!(
                "attributions {} done in {:.0}s",
                job.name,
                start.elapsed().as_secs_f64()
            );
            Ok(Stored {
                job: job.clone(),
                scenes: out,
            })
        })?;
        if stored.job != *job {
            return Err(Error::Corrupt {
                path: self.dir.join(rel),
                reason: "cached attributions were produced by a different job".into(),
            });
        }
        Ok(stored.scenes)
    }

    fn bbam_with(&self, heads: Heads, lambda: f64, stride: StridePolicy) -> BbamConfig {
        BbamConfig {
            heads,
            lambda,
            stride,
            ..self.config.bbam.clone()
        }
    }

    /// Attributions of the pseudo-label subset for one head setting.
    pub fn train_job(&self, heads: Heads) -> AttributionJob {
        AttributionJob {
            name: format!("train_{}", heads.name()),
            split: Split::Train,
            scenes: self.config.pseudo.scenes,
            bbam: self.bbam_with(heads, self.config.bbam.lambda, self.config.bbam.stride),
            box_noise: 0.0,
            seed: self.config.seed,
        }
    }

    /// Val-study attributions. `None` fields keep the configured value.
    pub fn val_job(
        &self,
        seed: u64,
        heads: Option<Heads>,
        lambda: Option<f64>,
        stride: Option<StridePolicy>,
        box_noise: f64,
    ) -> AttributionJob {
        let heads = heads.unwrap_or(self.config.bbam.heads);
        let lambda = lambda.unwrap_or(self.config.bbam.lambda);
        let stride = stride.unwrap_or(self.config.bbam.stride);
        let mut name = format!("val_s{seed}_{}", heads.name());
        if lambda != self.config.bbam.lambda {
            name += &format!("_lambda{lambda}");
        }
        if stride != self.config.bbam.stride {
            name += &format!("_{}", stride.label());
        }
        if box_noise != 0.0 {
            name += &format!("_noise{box_noise:+}");
        }
        AttributionJob {
            name,
            split: Split::Val,
            scenes: self.config.analysis.scenes,
            bbam: self.bbam_with(heads, lambda, stride),
            box_noise,
            seed,
        }
    }

    /// Mask proposals for the leading `count` scenes of a split (`None`
    /// entries when the source is `none`).
    pub fn mask_proposals(
        &self,
        split: Split,
        count: usize,
    ) -> Result<Vec<Option<MaskProposalSet>>> {
        let scenes = self.split(split, count, 0.0)?;
        let tag = match split {
            Split::Train => "train",
            Split::Val => "val",
        };
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| match &self.config.pseudo.proposals {
                ProposalSource::None => Ok(None),
                ProposalSource::Builtin => Ok(Some(builtin_mask_proposals(
                    s.image.view(),
                    &self.config.pseudo.segments,
                    s.seed,
                ))),
                ProposalSource::Dir(d) => load_mask_proposals(
                    &d.join(tag).join(format!("scene_{i:05}")),
                    s.height(),
                    s.width(),
                )
                .map(Some),
            })
            .collect()
    }

    pub fn label_variants(&self) -> Vec<LabelVariant> {
        let l = &self.config.pseudo.labels;
        let props = self.config.pseudo.proposals != ProposalSource::None;
        let base = |name: &str, heads| LabelVariant {
            name: name.into(),
            heads,
            theta_fg: l.theta_fg,
            theta_bg: l.theta_bg,
            proposals: props,
        };
        let main = self.config.bbam.heads;
        vec![
            base("bbam", main),
            base("bbam_box", Heads::Box),
            base("bbam_cls", Heads::Cls),
            LabelVariant {
                theta_fg: 0.2,
                theta_bg: 0.2,
                ..base("bbam_t0.2_0.2", main)
            },
            LabelVariant {
                proposals: false,
                ..base("bbam_noprop", main)
            },
        ]
    }

    /// Builds labels for `scenes` from `attributions` under a variant.
    pub fn build_labels(
        &self,
        scenes: &[Scene],
        attributions: &[SceneAttributions],
        variant: &LabelVariant,
        proposals: &[Option<MaskProposalSet>],
    ) -> Result<Vec<ScenePseudoLabels>> {
        let cfg = LabelConfig {
            theta_fg: variant.theta_fg,
            theta_bg: variant.theta_bg,
            ..self.config.pseudo.labels.clone()
        };
        let props: Option<Vec<MaskProposalSet>> =
            (variant.proposals && proposals.iter().all(|p| p.is_some())).then(|| {
                proposals
                    .iter()
                    .map(|p| p.clone().expect("checked"))
                    .collect()
            });
        build_pseudo_labels(scenes, attributions, props.as_deref(), &cfg)
    }

    /// Pseudo labels of the train subset: `gt`, `boxfill` or a BBAM variant
    /// name from [`Pipeline::label_variants`]. Stored as PNGs under `pseudo/`.
    pub fn pseudo_labels(&self, name: &str) -> Result<Vec<ScenePseudoLabels>> {
        let scenes = self.split(Split::Train, self.config.pseudo.scenes, 0.0)?;
        match name {
            "gt" => return Ok(ground_truth_labels(&scenes)),
            "boxfill" => return Ok(box_fill_labels(&scenes)),
            _ => {}
        }
        let variant = self
            .label_variants()
            .into_iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::Config(format!("unknown label variant '{name}'")))?;
        let dir = self.dir.join("pseudo").join(name);
        let marker = dir.join("index.json");
        if self.reusable(&marker) {
            if let Ok(l) = load_pseudo_labels(&dir) {
                if l.len() == scenes.len() {
                    return Ok(l);
                }
            }
        }
        let attrs = self.attributions(&self.train_job(variant.heads))?;
        let props = if variant.proposals {
            self.mask_proposals(Split::Train, scenes.len())?
        } else {
            vec![None; scenes.len()]
        };
        let labels = self.build_labels(&scenes, &attrs, &variant, &props)?;
        save_pseudo_labels(&dir, &labels)?;
        self.mark(marker);
        Ok(labels)
    }

    /// Trains (or loads) the segmentation model on one label source.
    pub fn seg_model(&self, labels_name: &str) -> Result<SegModel> {
        let dir = self.dir.join("seg").join(labels_name);
        let path = dir.join("model.ckpt");
        if self.reusable(&path) {
            if let Ok(m) = load_seg_model(&path) {
                return Ok(m);
            }
        }
        let scenes = self.split(Split::Train, self.config.pseudo.scenes, 0.0)?;
        let labels = self.pseudo_labels(labels_name)?;
        let mean = self.pixel_mean()?;
        let mut cfg = self.config.seg.clone();
        cfg.seed = derive_seed(self.config.seed, cfg.seed);
        let start = std::time::Instant::now();
        let progress = |e: &SegEpochLog| {
            log::debug!(
                "seg {labels_name} epoch {} loss {:.4} ({:.0}s)",
                e.epoch,
                e.loss,
                start.elapsed().as_secs_f64()
            )
        };
        let (model, log) = match cfg.mode {
            SegMode::Instance => {
                train_instance_seg(&scenes, &labels, mean, &cfg.crop, &cfg, progress)?
            }
            SegMode::Semantic => {
                let semantic: Vec<_> = labels.into_iter().map(|l| l.semantic).collect();
                train_seg(&scenes, &semantic, self.num_classes(), mean, &cfg, progress)?
            }
        };
        log::info!(
            "seg {labels_name} trained in {:.0}s",
            start.elapsed().as_secs_f64()
        );
        save_seg_model(&path, &model)?;
        write_json_atomic(&dir.join("train_log.json"), &log)?;
        self.mark(path);
        Ok(model)
    }

    pub fn seg_report(&self, labels_name: &str) -> Result<EvalReport> {
        self.cached(&format!("seg/{labels_name}/report.json"), || {
            let model = self.seg_model(labels_name)?;
            let dets = self.val_detections()?;
            let val = &self.datasets()?.1;
            let r = match self.config.seg.mode {
                SegMode::Instance => evaluate_instance_model(
                    &model,
                    val,
                    &dets,
                    &self.config.seg.crop,
                    self.num_classes(),
                )?,
                SegMode::Semantic => evaluate_model(&model, val, &dets, self.num_classes())?,
            };
            fs::write(
                self.dir.join("seg").join(labels_name).join("report.csv"),
                r.to_csv(),
            )?;
            Ok(r)
        })
    }

    /// Writes a text artifact under the run directory.
    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| Error::io_at(p, e))?;
        }
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn artifact(&self, rel: &str) -> PathBuf {
        let path = self.dir.join(rel);
        if let Some(p) = path.parent() {
            let _ = fs::create_dir_all(p);
        }
        path
    }
}
