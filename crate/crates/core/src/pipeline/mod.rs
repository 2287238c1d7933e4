//! Cross-validated evaluation protocol, phantom data and reporting.

mod experiment;
mod folds;
mod metrics;
mod phantom;
mod report;

pub use experiment::{
    load_experiment_data, pretrained_method, report_methods, run_experiment, run_experiment_on,
    run_unimodal_pretraining, ExperimentConfig, MlpOptions, ModalitySource, Pretrained, Standardizer, METHOD_RAW,
};
pub use folds::{make_folds, FoldPlan};
pub use metrics::{auc, mean_std, significance_test};
pub use phantom::{phantom_generate, PhantomSpec};
pub use report::{AucEntry, AucSummary, ExperimentReport, FoldAudit};
