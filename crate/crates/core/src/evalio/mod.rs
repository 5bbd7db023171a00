//! Dataset and result serialization, trajectory error and association
//! metrics.

mod dataset;
mod metrics;
mod results;

pub use dataset::{
    parse_dataset, serialize_dataset, Dataset, DatasetHeader, DetectionRecord, LandmarkTruth,
    OdometryRecord,
};
pub use metrics::{
    association_scores, class_accuracy, trajectory_error, trajectory_errors, Alignment,
    AssociationScores, ErrorStats,
};
pub use results::{
    append_results, read_results, read_trajectory_csv, write_results, write_trajectory_csv,
    ResultRecord, RunInfo, CLASS_ACCURACY_MIN_OBSERVATIONS,
};
