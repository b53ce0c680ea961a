//! Uniqueness testing, membership inference and privacy-loss estimation for
//! any conditional trajectory generator.

pub mod classifier;
pub mod dp;
pub mod generator;
pub mod mia;
pub mod similarity;

pub use classifier::{fit_predict, AttackClassifier};
pub use dp::{epsilon_at, estimate_dp_epsilon, percentile, DpConfig, EpsilonReport, Gaussian, DEFAULT_DELTA, SIGMA_FLOOR};
pub use generator::{FixedLengthGenerator, MemorizingGenerator, ModelGenerator, TrajectoryGenerator};
pub use mia::{membership_features, membership_inference_attack, mia_from_features, MiaReport, ATTACK_TRAIN_FRACTION};
pub use similarity::{empirical_cdf, top_m_similarities, trajectory_similarity, uniqueness_test, CdfPoint, UniquenessReport};
