//! Synthetic data, toy-model training, end-to-end pipelines and reports.

mod analyze;
mod config;
mod efficiency;
mod gen;
mod pipeline;
mod toy;

pub use analyze::{
    abar_summary, analyze_distributions, h_step_summaries, write_distribution_report, AbarSummary, BlockDistributions,
    DistributionReport, Histogram, StepSummary, HISTOGRAM_BINS,
};
pub use config::{DatasetSpec, ExperimentConfig};
pub use efficiency::{estimate_efficiency, vim_b_like, EfficiencyReport, OpCost};
pub use gen::{
    gen_dense_outliers, gen_dynamic_hidden, gen_dynamic_hidden_with, gen_longtailed_abar, OutlierStream, Profile,
    ABAR_LOGIT_STD, DEFAULT_RAMP,
};
pub use pipeline::{
    ablation_points, prepare, run_ptq_pipeline, stage_hash, sweep, BlockRecon, Prepared, PtqReport, StageReport,
    SweepPoint, SweepRow,
};
pub use toy::{train_toy_model, Dataset, ToyTask, TrainConfig, TrainReport};
