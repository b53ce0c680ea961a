//! Metrics, baselines and experiment harnesses.

pub mod baselines;
pub mod harness;
pub mod metrics;
pub mod report;
pub mod scenario;

pub use baselines::{markov_fit, MarkovModel, Popularity, UniformScorer};
pub use harness::{
    compare_orderings, order_invariance_experiment, relative_deviation, replay_volume_sweep, run_ablation, run_pipeline, Ablation,
    AblationResult, OrderCell, OrderDeviation, OrderInvarianceReport, PipelineRun, RoundResult, SweepPoint, SweepReport,
};
pub use metrics::{acc_at_k, collect_predictions, rank_of, ModelScorer, Predictions, Scorer};
pub use report::{evaluate, evaluate_model, CityEval, EvalReport, EVAL_POSITIONS};
pub use scenario::{build_scenario, Scenario, ScenarioConfig};
