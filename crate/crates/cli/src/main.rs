//! `bbam`: runs the attribution pipeline stage by stage or end to end.
//!
//! Settings come from built-in defaults, then the `--config` file, then
//! command-line flags (flags win). Exit codes: 0 success, 1 usage or
//! configuration error, 2 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bbam_core::analysis::{heatmap, Provenance};
use bbam_core::bbam::{bbam_for_instance, Heads, StridePolicy};
use bbam_core::pipeline::{
    parse_config, summary_text, validate_config, Overrides, Pipeline, ProposalSource, RunConfig,
    Split, SEG_SOURCES,
};
use bbam_core::synthdata::derive_seed;
use clap::{Args, Parser, Subcommand};

const DEVICE_VAR: &str = "BBAM_DEVICE";

#[derive(Parser, Debug)]
#[command(
    name = "bbam",
    version,
    about = "Bounding box attribution maps on synthetic scenes"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration (missing keys take defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent directory of the per-config run directories.
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute stages even when their artifacts exist.
    #[arg(long, global = true)]
    force: bool,
    /// Use this detector checkpoint instead of training one.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Use this dataset directory (from `data gen`) as the val split.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic data.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Detector training and evaluation.
    Detector {
        #[command(subcommand)]
        cmd: DetectorCmd,
    },
    /// Attribution maps.
    Bbam {
        #[command(subcommand)]
        cmd: BbamCmd,
    },
    /// Pseudo labels.
    Pseudo {
        #[command(subcommand)]
        cmd: PseudoCmd,
    },
    /// Segmentation training and evaluation.
    Seg {
        #[command(subcommand)]
        cmd: SegCmd,
    },
    /// Diagnostic studies.
    Analyze {
        #[command(subcommand)]
        study: Study,
        #[command(flatten)]
        bbam: BbamFlags,
    },
    /// End-to-end reproduction.
    Repro {
        #[command(subcommand)]
        cmd: ReproCmd,
    },
    /// Configuration files.
    Config {
        #[command(subcommand)]
        cmd: ConfigCmd,
    },
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    /// Generate train and val scenes (or only write them to `--out`).
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum DetectorCmd {
    Train,
    Eval,
}

#[derive(Args, Debug, Default)]
struct BbamFlags {
    /// Heads whose outputs the mask preserves: box, cls or both.
    #[arg(long)]
    heads: Option<Heads>,
    /// Weight of the L1 mask penalty.
    #[arg(long)]
    lambda: Option<f64>,
    /// `adaptive`, `adaptive:<reference side>` or `fixed:<stride>`.
    #[arg(long, value_parser = parse_stride)]
    stride: Option<StridePolicy>,
    /// Mask proposals for refinement: builtin, none or dir:<path>.
    #[arg(long)]
    proposals: Option<ProposalSource>,
}

#[derive(Subcommand, Debug)]
enum BbamCmd {
    /// Attribution maps for every instance of one scene.
    Run {
        #[arg(long, value_parser = parse_split, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Output directory (default: `<run>/bbam_run`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: BbamFlags,
    },
}

#[derive(Subcommand, Debug)]
enum PseudoCmd {
    /// Build pseudo labels for the configured train subset.
    Build {
        /// Variant: bbam, bbam_box, bbam_cls, bbam_t0.2_0.2, bbam_noprop, boxfill.
        #[arg(long, default_value = "bbam")]
        variant: String,
        #[command(flatten)]
        flags: BbamFlags,
    },
}

#[derive(Subcommand, Debug)]
enum SegCmd {
    Train {
        /// gt, boxfill, pseudo (= bbam) or a pseudo-label variant name.
        #[arg(long, default_value = "pseudo")]
        labels: String,
        #[command(flatten)]
        flags: BbamFlags,
    },
    Eval {
        #[arg(long, default_value = "pseudo")]
        labels: String,
        #[command(flatten)]
        flags: BbamFlags,
    },
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Study {
    Strides,
    Noise,
    Lambda,
    Heads,
    GradCompare,
}

#[derive(Subcommand, Debug)]
enum ReproCmd {
    /// Every stage and study, then the summary with acceptance verdicts.
    All {
        #[command(flatten)]
        flags: BbamFlags,
    },
}

#[derive(Subcommand, Debug)]
enum ConfigCmd {
    /// Check a config file and print it with defaults filled in.
    Validate { path: PathBuf },
    /// Print the effective configuration and its hash.
    Show,
}

fn parse_stride(s: &str) -> Result<StridePolicy, String> {
    if s == "adaptive" {
        return Ok(StridePolicy::default());
    }
    if let Some(v) = s.strip_prefix("adaptive:") {
        let reference_side: f64 = v
            .parse()
            .map_err(|e| format!("bad reference side '{v}': {e}"))?;
        return Ok(StridePolicy::Adaptive { reference_side });
    }
    if let Some(v) = s.strip_prefix("fixed:") {
        let stride: usize = v.parse().map_err(|e| format!("bad stride '{v}': {e}"))?;
        return Ok(StridePolicy::Fixed { stride });
    }
    Err(format!(
        "expected adaptive, adaptive:<side> or fixed:<n>, got '{s}'"
    ))
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(format!("expected train or val, got '{s}'")),
    }
}

/// Errors that map to exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn effective_config(g: &Global, flags: Option<&BbamFlags>) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(r) = &g.run_root {
        cfg.run_root = r.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(f) = flags {
        if let Some(h) = f.heads {
            cfg.bbam.heads = h;
        }
        if let Some(l) = f.lambda {
            cfg.bbam.lambda = l;
        }
        if let Some(s) = f.stride {
            cfg.bbam.stride = s;
        }
        if let Some(p) = &f.proposals {
            cfg.pseudo.proposals = p.clone();
        }
    }
    let v = cfg.violations();
    if !v.is_empty() {
        let list: Vec<String> = v.iter().map(|e| format!("  {e}")).collect();
        return Err(usage(format!(
            "invalid configuration:\n{}",
            list.join("\n")
        )));
    }
    Ok(cfg)
}

fn open(g: &Global, flags: Option<&BbamFlags>) -> anyhow::Result<Pipeline> {
    let cfg = effective_config(g, flags)?;
    let overrides = Overrides {
        detector: g.ckpt.clone(),
        val_data: g.data.clone(),
    };
    let p = Pipeline::open_with(cfg, g.force, overrides)?;
    log::info!("run directory {}", p.dir.display());
    Ok(p)
}

fn labels_name(s: &str) -> &str {
    if s == "pseudo" {
        "bbam"
    } else {
        s
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Config {
            cmd: ConfigCmd::Validate { path },
        } => match validate_config(&path) {
            Ok(cfg) => {
                println!("# hash {}\n{}", cfg.hash(), cfg.to_toml());
                Ok(())
            }
            Err(errors) => {
                let list: Vec<String> = errors.iter().map(|e| format!("  {e}")).collect();
                Err(usage(format!(
                    "{} is invalid:\n{}",
                    path.display(),
                    list.join("\n")
                )))
            }
        },
        Command::Config {
            cmd: ConfigCmd::Show,
        } => {
            let cfg = effective_config(g, None)?;
            println!("# hash {}\n{}", cfg.hash(), cfg.to_toml());
            Ok(())
        }
        Command::Data {
            cmd: DataCmd::Gen { out },
        } => {
            let cfg = effective_config(g, None)?;
            match out {
                Some(dir) => {
                    for (split, n) in [
                        ("train", cfg.data.train_scenes),
                        ("val", cfg.data.val_scenes),
                    ] {
                        let m = bbam_core::synthdata::DatasetManifest::new(
                            split,
                            n,
                            cfg.seed,
                            cfg.data.generator.clone(),
                        );
                        let scenes = m.generate()?;
                        bbam_core::synthdata::save_dataset(&dir.join(split), &m, &scenes)?;
                        println!("{} {split} scenes -> {}", n, dir.join(split).display());
                    }
                }
                None => {
                    let p = open(g, None)?;
                    let (t, v) = p.datasets()?;
                    println!(
                        "{} train / {} val scenes in {}",
                        t.len(),
                        v.len(),
                        p.dir.join("data").display()
                    );
                }
            }
            Ok(())
        }
        Command::Detector { cmd } => {
            let p = open(g, None)?;
            match cmd {
                DetectorCmd::Train => {
                    p.detector()?;
                    println!("{}", p.dir.join("detector").join("model.ckpt").display());
                }
                DetectorCmd::Eval => {
                    let e = p.detector_eval()?;
                    println!(
                        "AP50 {:.4} AP70 {:.4} gt-proposal accuracy {:.4} ({} scenes)",
                        e.ap50, e.ap70, e.gt_proposal_accuracy, e.scenes
                    );
                }
            }
            Ok(())
        }
        Command::Bbam {
            cmd:
                BbamCmd::Run {
                    split,
                    scene,
                    out,
                    flags,
                },
        } => {
            let p = open(g, Some(&flags))?;
            let scenes = p.split(split, usize::MAX, 0.0)?;
            let Some(s) = scenes.get(scene) else {
                return Err(usage(format!(
                    "scene {scene} out of range (split has {})",
                    scenes.len()
                )));
            };
            let det = p.detector()?;
            let mean = p.pixel_mean()?;
            let out = out.unwrap_or_else(|| p.dir.join("bbam_run"));
            std::fs::create_dir_all(&out)?;
            let img = s.chw::<f32>();
            let prov = Provenance {
                config_hash: p.hash(),
                seed: p.config.seed,
            };
            for (i, inst) in s.instances.iter().enumerate() {
                let seed = derive_seed(p.config.seed ^ s.seed, i as u64);
                match bbam_for_instance(
                    det,
                    img.view(),
                    mean,
                    &inst.bbox,
                    inst.class_id,
                    &p.config.pseudo.jitter,
                    &p.config.bbam,
                    seed,
                ) {
                    Ok(b) => {
                        let stem = format!("scene{scene:05}_inst{i}");
                        let caption = format!(
                            "BBAM heads={} lambda={} stride={} ({})",
                            p.config.bbam.heads.name(),
                            p.config.bbam.lambda,
                            b.mask.stride,
                            p.config.bbam.stride.label()
                        );
                        heatmap(&b.mask.upsampled(), 2).write_png(
                            &out.join(format!("{stem}.png")),
                            &prov,
                            &caption,
                        )?;
                        std::fs::write(
                            out.join(format!("{stem}.json")),
                            serde_json::to_string_pretty(&b)?,
                        )?;
                        println!(
                            "{stem}: stride {} positives {}/{} final loss {:.4}",
                            b.mask.stride,
                            b.proposals.positive.len(),
                            b.proposals.proposals.len(),
                            b.trajectory.last().map_or(0.0, |l| l.total)
                        );
                    }
                    Err(e) => println!("scene{scene:05}_inst{i}: {e}"),
                }
            }
            Ok(())
        }
        Command::Pseudo {
            cmd: PseudoCmd::Build { variant, flags },
        } => {
            let p = open(g, Some(&flags))?;
            let labels = p.pseudo_labels(&variant)?;
            let fallbacks: usize = labels.iter().map(|l| l.fallbacks).sum();
            println!(
                "{} scenes labelled ({variant}), {fallbacks} box-fill fallbacks",
                labels.len()
            );
            Ok(())
        }
        Command::Seg { cmd } => {
            let (labels, flags, eval) = match cmd {
                SegCmd::Train { labels, flags } => (labels, flags, false),
                SegCmd::Eval { labels, flags } => (labels, flags, true),
            };
            let p = open(g, Some(&flags))?;
            let name = labels_name(&labels);
            if !SEG_SOURCES.contains(&name) {
                return Err(usage(format!(
                    "unknown label source '{labels}' (expected pseudo or one of {SEG_SOURCES:?})"
                )));
            }
            if eval {
                let r = p.seg_report(name)?;
                print!("{}", r.to_csv());
            } else {
                p.seg_model(name)?;
                println!(
                    "{}",
                    p.dir.join("seg").join(name).join("model.ckpt").display()
                );
            }
            Ok(())
        }
        Command::Analyze { study, bbam } => {
            let p = open(g, Some(&bbam))?;
            match study {
                Study::Strides => {
                    for s in p.config.analysis.seeds.clone() {
                        let r = p.stride_run(s)?;
                        print!(
                            "{}",
                            r.table.to_csv(&Provenance {
                                config_hash: p.hash(),
                                seed: s
                            })
                        );
                    }
                }
                Study::Noise => {
                    for pt in p.noise_study()? {
                        println!("{:+.2} {:.4}", pt.level, pt.ap50);
                    }
                }
                Study::Lambda => {
                    for r in p.lambda_study()? {
                        println!(
                            "{} ap50 {:.4} sem {:.4} precision {:.4}",
                            r.lambda, r.quality.ap50, r.quality.semantic_miou, r.quality.precision
                        );
                    }
                }
                Study::Heads => {
                    let h = p.head_study()?;
                    println!(
                        "{:?}\ncls loss growth (box only) {:.2}, box loss growth (cls only) {:.2}",
                        h.mean_norm, h.cls_growth_box_only, h.box_growth_cls_only
                    );
                }
                Study::GradCompare => {
                    for s in p.config.analysis.seeds.clone() {
                        println!("{:?}", p.attribution_quality(s)?);
                    }
                }
            }
            println!("artifacts in {}", p.dir.join("analysis").display());
            Ok(())
        }
        Command::Repro {
            cmd: ReproCmd::All { flags },
        } => {
            let p = open(g, Some(&flags))?;
            let s = p.summary()?;
            print!("{}", summary_text(&s));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match std::env::var(DEVICE_VAR) {
        Ok(d) if d != "cpu" => {
            eprintln!("error: {DEVICE_VAR}={d} is not available; this build runs on the cpu only");
            return ExitCode::from(1);
        }
        _ => {}
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn stride_flag_forms() {
        assert_eq!(
            parse_stride("fixed:8").unwrap(),
            StridePolicy::Fixed { stride: 8 }
        );
        assert_eq!(parse_stride("adaptive").unwrap(), StridePolicy::default());
        assert!(parse_stride("fixed:x").is_err());
    }
}
