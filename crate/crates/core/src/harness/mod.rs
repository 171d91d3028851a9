//! Experiment orchestration: configs, timeline evaluation, ablations,
//! metric reports and diagnostics export.

mod config;
mod diagnostics;
mod report;
mod run;

pub use config::{
    slice_index, AblationConfig, CorpusSource, DiagnosticsConfig, ExperimentConfig, Regime, StrategyParams,
};
pub use diagnostics::{attention_csv, export_diagnostics, overlap_csv, period_topics, periods, DiagnosticsFiles};
pub use report::{Aggregate, MetricCell, MetricsReport, RunMeta};
pub use run::{
    ablate_freshness, ablate_label_quality, ablate_scale, grade_pseudo, pl_with_pseudo, prepare, prepare_all,
    run_timeline_eval, thread_pool, truncate_trans, PreparedData, LABEL_CONDITIONS, THREADS_ENV,
};
