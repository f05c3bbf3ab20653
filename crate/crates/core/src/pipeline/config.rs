use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbam::{BbamConfig, StridePolicy};
use crate::detector::{DetectorTrainConfig, InferConfig};
use crate::error::{Error, Result};
use crate::pseudogt::{JitterConfig, LabelConfig, SegmentConfig};
use crate::segtrain::SegTrainConfig;
use crate::synthdata::GeneratorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 2000,
            val_scenes: 200,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub train: DetectorTrainConfig,
    pub infer: InferConfig,
    /// Score floor for AP evaluation and the detections given to the
    /// segmentation evaluation.
    pub eval_score_threshold: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            train: DetectorTrainConfig::default(),
            infer: InferConfig::default(),
            eval_score_threshold: 0.05,
        }
    }
}

/// Where mask proposals for the refinement step come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProposalSource {
    Builtin,
    None,
    /// One directory per scene (`scene_00000/…png`) under this path.
    Dir(PathBuf),
}

impl std::str::FromStr for ProposalSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "builtin" => Ok(Self::Builtin),
            "none" => Ok(Self::None),
            _ => match s.strip_prefix("dir:") {
                Some(p) if !p.is_empty() => Ok(Self::Dir(PathBuf::from(p))),
                _ => Err(Error::Config(format!(
                    "unknown proposal source '{s}' (expected builtin, none or dir:<path>)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for ProposalSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProposalSource> for String {
    fn from(p: ProposalSource) -> String {
        p.to_string()
    }
}

impl fmt::Display for ProposalSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Builtin => write!(f, "builtin"),
            Self::None => write!(f, "none"),
            Self::Dir(p) => write!(f, "dir:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    /// Leading train scenes that receive pseudo labels and train the
    /// segmentation models.
    pub scenes: usize,
    pub jitter: JitterConfig,
    pub labels: LabelConfig,
    pub proposals: ProposalSource,
    pub segments: SegmentConfig,
}

impl Default for PseudoSection {
    fn default() -> Self {
        Self {
            scenes: 120,
            jitter: JitterConfig::default(),
            labels: LabelConfig::default(),
            proposals: ProposalSource::Builtin,
            segments: SegmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Leading val scenes used by the attribution studies.
    pub scenes: usize,
    /// One study repetition per seed (jitter draws and gradient noise).
    pub seeds: Vec<u64>,
    pub activation_cutoff: f64,
    pub kde_bins: usize,
    pub kde_bandwidth: f64,
    pub smooth_grad_samples: usize,
    pub smooth_grad_sigma: f64,
    /// Threshold turning a map into a mask in the stride study.
    pub mask_threshold: f64,
    pub loss_smoothing: usize,
    /// Iteration whose smoothed loss is the reference for growth ratios.
    pub loss_reference_iteration: usize,
    /// Signed box corruption fractions; positive expands.
    pub noise_levels: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            scenes: 30,
            seeds: vec![0, 1, 2],
            activation_cutoff: 0.9,
            kde_bins: 64,
            kde_bandwidth: 0.08,
            smooth_grad_samples: 15,
            smooth_grad_sigma: 0.1,
            mask_threshold: 0.5,
            loss_smoothing: 20,
            loss_reference_iteration: 10,
            noise_levels: vec![0.0, 0.05, -0.05, 0.1, -0.1, 0.15, -0.15, 0.2, -0.2],
            lambdas: vec![0.0, 0.001, 0.003, 0.005, 0.007, 0.01, 0.015, 0.02],
        }
    }
}

/// Every setting of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Parent of the per-config run directories. Not part of the hash.
    pub run_root: PathBuf,
    pub data: DataConfig,
    pub detector: DetectorSection,
    pub bbam: BbamConfig,
    pub pseudo: PseudoSection,
    pub seg: SegTrainConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_root: PathBuf::from("runs"),
            data: DataConfig::default(),
            detector: DetectorSection::default(),
            bbam: BbamConfig::default(),
            pseudo: PseudoSection::default(),
            seg: SegTrainConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// One violated constraint, addressed by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

struct Checker(Vec<FieldError>);

impl Checker {
    fn check(&mut self, ok: bool, path: &str, message: impl Into<String>) {
        if !ok {
            self.0.push(FieldError {
                path: path.into(),
                message: message.into(),
            });
        }
    }

    fn unit(&mut self, v: f64, path: &str) {
        self.check(
            (0.0..=1.0).contains(&v),
            path,
            format!("{v} must lie in [0, 1]"),
        );
    }

    fn positive(&mut self, v: f64, path: &str) {
        self.check(
            v > 0.0 && v.is_finite(),
            path,
            format!("{v} must be positive"),
        );
    }
}

impl RunConfig {
    /// All violations at once; empty when the config is usable.
    pub fn violations(&self) -> Vec<FieldError> {
        let mut c = Checker(Vec::new());
        if let Err(e) = self.data.generator.validate() {
            c.check(false, "data.generator", e.to_string());
        }
        c.check(
            self.data.val_scenes > 0,
            "data.val_scenes",
            "must be positive",
        );
        c.check(
            self.data.train_scenes >= self.detector.train.min_scenes,
            "data.train_scenes",
            format!(
                "{} is below detector.train.min_scenes = {}",
                self.data.train_scenes, self.detector.train.min_scenes
            ),
        );
        let t = &self.detector.train;
        c.check(t.epochs > 0, "detector.train.epochs", "must be positive");
        c.positive(t.lr, "detector.train.lr");
        c.check(
            t.batch_images > 0,
            "detector.train.batch_images",
            "must be positive",
        );
        c.unit(t.background_blend, "detector.train.background_blend");
        let i = &self.detector.infer;
        c.unit(i.score_threshold, "detector.infer.score_threshold");
        c.unit(i.nms_iou, "detector.infer.nms_iou");
        c.unit(
            self.detector.eval_score_threshold,
            "detector.eval_score_threshold",
        );

        let b = &self.bbam;
        c.check(
            b.lambda >= 0.0 && b.lambda.is_finite(),
            "bbam.lambda",
            format!("{} must be >= 0", b.lambda),
        );
        c.check(
            b.lambda_tv >= 0.0 && b.lambda_tv.is_finite(),
            "bbam.lambda_tv",
            format!("{} must be >= 0", b.lambda_tv),
        );
        c.check(
            b.beta >= 1.0,
            "bbam.beta",
            format!("{} must be >= 1", b.beta),
        );
        c.check(b.iterations > 0, "bbam.iterations", "must be positive");
        c.positive(b.lr, "bbam.lr");
        match b.stride {
            StridePolicy::Fixed { stride } => {
                c.check(stride > 0, "bbam.stride.stride", "must be positive")
            }
            StridePolicy::Adaptive { reference_side } => {
                c.positive(reference_side, "bbam.stride.reference_side")
            }
        }

        let p = &self.pseudo;
        c.check(
            p.scenes > 0 && p.scenes <= self.data.train_scenes,
            "pseudo.scenes",
            format!("{} must lie in 1..={}", p.scenes, self.data.train_scenes),
        );
        c.check(
            (0.0..1.0).contains(&p.jitter.rate),
            "pseudo.jitter.rate",
            format!("{} must lie in [0, 1)", p.jitter.rate),
        );
        c.check(
            p.jitter.count > 0,
            "pseudo.jitter.count",
            "must be positive",
        );
        c.unit(p.jitter.iou_gate, "pseudo.jitter.iou_gate");
        c.unit(p.labels.theta_fg, "pseudo.labels.theta_fg");
        c.unit(p.labels.theta_bg, "pseudo.labels.theta_bg");
        c.check(
            p.labels.theta_bg <= p.labels.theta_fg,
            "pseudo.labels.theta_bg",
            format!(
                "theta_bg = {} must not exceed theta_fg = {}",
                p.labels.theta_bg, p.labels.theta_fg
            ),
        );
        c.check(
            p.labels.containment > 0.0 && p.labels.containment <= 1.0,
            "pseudo.labels.containment",
            "must lie in (0, 1]",
        );

        c.check(self.seg.epochs > 0, "seg.epochs", "must be positive");
        c.positive(self.seg.lr, "seg.lr");
        c.check(
            self.seg.batch_images > 0,
            "seg.batch_images",
            "must be positive",
        );
        let crop = &self.seg.crop;
        c.check(
            crop.size > 0 && crop.size.is_multiple_of(16),
            "seg.crop.size",
            "must be a positive multiple of 16",
        );
        c.check(
            crop.context >= 0.0 && crop.context <= 1.0,
            "seg.crop.context",
            "must lie in [0, 1]",
        );
        c.check(
            crop.box_jitter >= 0.0 && crop.box_jitter < 0.5,
            "seg.crop.box_jitter",
            "must lie in [0, 0.5)",
        );

        let a = &self.analysis;
        c.check(
            a.scenes > 0 && a.scenes <= self.data.val_scenes,
            "analysis.scenes",
            format!("{} must lie in 1..={}", a.scenes, self.data.val_scenes),
        );
        c.check(
            !a.seeds.is_empty(),
            "analysis.seeds",
            "needs at least one seed",
        );
        c.check(
            a.activation_cutoff >= 0.0,
            "analysis.activation_cutoff",
            "must be >= 0",
        );
        c.check(a.kde_bins > 0, "analysis.kde_bins", "must be positive");
        c.positive(a.kde_bandwidth, "analysis.kde_bandwidth");
        c.check(
            a.smooth_grad_samples > 0,
            "analysis.smooth_grad_samples",
            "must be positive",
        );
        c.check(
            a.smooth_grad_sigma >= 0.0,
            "analysis.smooth_grad_sigma",
            "must be >= 0",
        );
        c.unit(a.mask_threshold, "analysis.mask_threshold");
        c.check(
            a.loss_smoothing > 0,
            "analysis.loss_smoothing",
            "must be positive",
        );
        c.check(
            a.loss_reference_iteration < b.iterations,
            "analysis.loss_reference_iteration",
            "must be below bbam.iterations",
        );
        for (k, &n) in a.noise_levels.iter().enumerate() {
            c.check(
                n > -0.5 && n < 1.0,
                &format!("analysis.noise_levels[{k}]"),
                format!("{n} must lie in (-0.5, 1)"),
            );
        }
        for (k, &l) in a.lambdas.iter().enumerate() {
            c.check(
                l >= 0.0 && l.is_finite(),
                &format!("analysis.lambdas[{k}]"),
                format!("{l} must be >= 0"),
            );
        }
        c.0
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(
                v.iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    /// Hex SHA-256 (first 16 chars) of the canonical JSON form, without
    /// `run_root`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_root = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_root.join(self.hash())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses TOML text; missing keys take defaults, unknown keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Reads, fills defaults and range-checks a config file. On failure the
/// list holds every violation with its field path.
pub fn validate_config(path: &Path) -> std::result::Result<RunConfig, Vec<FieldError>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![FieldError {
            path: String::new(),
            message: format!("{}: {e}", path.display()),
        }]
    })?;
    let cfg = parse_config(&text).map_err(|e| {
        vec![FieldError {
            path: String::new(),
            message: e.to_string(),
        }]
    })?;
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert!(RunConfig::default().violations().is_empty());
    }

    #[test]
    fn threshold_ordering_and_lambda_range() {
        let c = parse_config(
            "[pseudo.labels]\ntheta_fg = 0.2\ntheta_bg = 0.9\n[bbam]\nlambda = -1.0\n",
        )
        .unwrap();
        let paths: Vec<String> = c.violations().into_iter().map(|e| e.path).collect();
        assert!(paths.contains(&"pseudo.labels.theta_bg".to_string()));
        assert!(paths.contains(&"bbam.lambda".to_string()));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_config("[bbam]\nlamda = 0.1\n").is_err());
        assert!(parse_config("colour = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.pseudo.proposals = ProposalSource::Dir("/tmp/p".into());
        let back = parse_config(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.run_root = "elsewhere".into();
        assert_eq!(d.hash(), c.hash());
        d.bbam.lambda = 0.01;
        assert_ne!(d.hash(), c.hash());
    }
}
