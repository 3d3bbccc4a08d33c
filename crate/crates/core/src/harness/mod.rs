//! Datasets, training, evaluation and reporting.

mod dataset;
mod metrics;
mod model;
mod report;
mod synth;
mod train;

pub use dataset::{
    load_dataset, load_dataset_dir, parse_teacher, read_labels, read_teacher, stratified_split, subset,
    write_dataset, SampleRecord, BYTECODE_DIR, LABELS_FILE, TEACHER_FILE,
};
pub use metrics::{evaluate, Metrics};
pub use model::{
    load_model, model_from_bytes, model_to_bytes, save_model, ContractFeatures, DistillMode, Model, Prediction,
    TrainConfig,
};
pub use report::{build_report, dump_features, export_report, parse_report, Report, ReportRow};
pub use synth::{synth_dataset, SynthConfig, NEUTRAL_OPS};
pub use train::{train, train_with_table, TrainLog};
