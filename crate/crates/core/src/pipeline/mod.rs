//! Config files, the staged run directory, and the summary report.

mod config;
mod report;
mod run;

pub use config::{
    parse_config, validate_config, AnalysisConfig, DataConfig, DetectorSection, FieldError,
    ProposalSource, PseudoSection, RunConfig,
};
pub use report::{
    evaluate_criteria, summary_text, AttributionQuality, Criterion, HeadStudy, LambdaRow,
    ProposalAblation, StrideRun, Summary, SEG_SOURCES,
};
pub use run::{read_json, AttributionJob, LabelVariant, Overrides, Pipeline, RunLock, Split};
