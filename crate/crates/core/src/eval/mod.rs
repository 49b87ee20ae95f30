//! Objective metrics and questionnaire aggregation.

pub mod fid;
pub mod inception;
pub mod questionnaire;
pub mod report;
pub mod ssim;

pub use fid::{feature_stats, frechet_distance, psd_sqrt, FeatureExtractor, FeatureStats, ToyExtractor};
pub use inception::InceptionV3;
pub use questionnaire::{
    aggregate_questionnaire, favorable_ratings, load_questionnaire, mean_ssim, parse_questionnaire, round_half_up,
    QuestionnaireRecord,
};
pub use report::{read_report, table_path, write_report, EvalReport, NetworkResult};
pub use ssim::ssim;
