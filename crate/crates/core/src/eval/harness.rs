//! Continual pipelines, ablations, order invariance and the replay-volume
//! sweep.

use serde::{Deserialize, Serialize};

use super::report::{evaluate_model, EvalReport};
use super::scenario::Scenario;
use crate::engine::{continual_update, next_teacher, ReplayConfig, RoundManifest, TeacherSnapshot, Variant};
use crate::error::{Error, Result};
use crate::model::MoEModel;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    Full,
    FullTune,
    ExpertTune,
    WithoutKd,
    /// The full pipeline on a model whose routers never saw the mobility
    /// descriptor.
    WithoutMaer,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::FullTune, Ablation::ExpertTune, Ablation::WithoutKd, Ablation::WithoutMaer];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::FullTune => "full-tune",
            Ablation::ExpertTune => "expert-tune",
            Ablation::WithoutKd => "without-kd",
            Ablation::WithoutMaer => "without-maer",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Ablation::Full | Ablation::WithoutMaer => Variant::Gcl,
            Ablation::FullTune => Variant::FullTune,
            Ablation::ExpertTune => Variant::ExpertTune,
            Ablation::WithoutKd => Variant::WithoutKd,
        }
    }

    /// Whether the base model must route on the mobility descriptor.
    pub fn mobility_routing(self) -> bool {
        self != Ablation::WithoutMaer
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub manifest: RoundManifest,
    /// All cities known after the round.
    pub report: EvalReport,
}

pub struct PipelineRun {
    pub ordering: Vec<u32>,
    pub rounds: Vec<RoundResult>,
    pub model: MoEModel,
}

/// Continual rounds over `ordering`, starting from `base`.
pub fn run_pipeline(scenario: &Scenario, base: &TeacherSnapshot, ordering: &[u32], variant: Variant, replay: &ReplayConfig) -> Result<PipelineRun> {
    if ordering.is_empty() {
        return Err(Error::Empty("city ordering"));
    }
    let mut teacher = base.clone();
    let mut rounds = Vec::with_capacity(ordering.len());
    let mut model = None;
    for &id in ordering {
        let city = scenario.city(id)?;
        let x_new = &scenario.split(id)?.train;
        let out = continual_update(&teacher, city, x_new, replay, &scenario.config.continual_train, variant)?;
        teacher = next_teacher(&teacher, &out, city, x_new)?;
        let report = evaluate_model(&out.model, &scenario.test_sets(&teacher.city_ids())?, scenario.config.seed)?;
        rounds.push(RoundResult {
            manifest: out.manifest,
            report,
        });
        model = Some(out.model);
    }
    Ok(PipelineRun {
        ordering: ordering.to_vec(),
        rounds,
        model: model.expect("at least one round"),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub base_cities: Vec<u32>,
    pub new_city: u32,
    pub pre: EvalReport,
    pub post: EvalReport,
    pub manifest: RoundManifest,
}

impl AblationResult {
    /// Mean base-city acc@1 after the round.
    pub fn retention(&self) -> f64 {
        self.post.mean_acc1(&self.base_cities).expect("base cities evaluated")
    }

    /// Mean base-city acc@1 lost in the round.
    pub fn drop(&self) -> f64 {
        self.pre.mean_acc1(&self.base_cities).expect("base cities evaluated") - self.retention()
    }
}

/// One continual round on `new_city` under `spec`. `base` must route on the
/// mobility descriptor unless `spec` is `WithoutMaer`.
pub fn run_ablation(spec: Ablation, scenario: &Scenario, base: &TeacherSnapshot, new_city: u32) -> Result<AblationResult> {
    if base.model.config.mobility_routing != spec.mobility_routing() {
        return Err(Error::Config(format!(
            "ablation {} needs a base model with mobility_routing = {}",
            spec.name(),
            spec.mobility_routing()
        )));
    }
    let base_cities = base.city_ids();
    let pre = evaluate_model(&base.model, &scenario.test_sets(&base_cities)?, scenario.config.seed)?;
    let run = run_pipeline(scenario, base, &[new_city], spec.variant(), &scenario.config.replay)?;
    let round = run.rounds.into_iter().next().expect("one round");
    Ok(AblationResult {
        ablation: spec,
        base_cities,
        new_city,
        pre,
        post: round.report,
        manifest: round.manifest,
    })
}

/// `|a - b|` relative to the mean magnitude of the pair; zero when both are.
pub fn relative_deviation(a: f64, b: f64) -> f64 {
    let scale = (a.abs() + b.abs()) / 2.0;
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderCell {
    pub ordering: usize,
    pub city: u32,
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderDeviation {
    pub city: u32,
    pub k: usize,
    /// Largest pairwise relative deviation across orderings.
    pub max_relative_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderInvarianceReport {
    pub orderings: Vec<Vec<u32>>,
    pub cells: Vec<OrderCell>,
    pub deviations: Vec<OrderDeviation>,
}

impl OrderInvarianceReport {
    pub fn fraction_below(&self, tolerance: f64) -> f64 {
        let n = self.deviations.iter().filter(|d| d.max_relative_deviation < tolerance).count();
        n as f64 / self.deviations.len().max(1) as f64
    }
}

/// Builds the comparison table from the final report of each ordering.
pub fn compare_orderings(orderings: &[Vec<u32>], finals: &[EvalReport]) -> Result<OrderInvarianceReport> {
    let mut cells = Vec::new();
    let mut deviations = Vec::new();
    let cities: Vec<u32> = finals[0].cities.iter().map(|c| c.city_id).collect();
    for &city in &cities {
        for k in [1, 3] {
            let mut values = Vec::with_capacity(finals.len());
            for (o, r) in finals.iter().enumerate() {
                let c = r.city(city).ok_or(Error::UnknownCity(city))?;
                let value = if k == 1 { c.acc1 } else { c.acc3 };
                cells.push(OrderCell { ordering: o, city, k, value });
                values.push(value);
            }
            let mut max = 0.0f64;
            for i in 0..values.len() {
                for j in i + 1..values.len() {
                    max = max.max(relative_deviation(values[i], values[j]));
                }
            }
            deviations.push(OrderDeviation {
                city,
                k,
                max_relative_deviation: max,
            });
        }
    }
    Ok(OrderInvarianceReport {
        orderings: orderings.to_vec(),
        cells,
        deviations,
    })
}

/// Runs the full pipeline once per ordering from the same base model.
pub fn order_invariance_experiment(orderings: &[Vec<u32>], scenario: &Scenario, base: &TeacherSnapshot) -> Result<OrderInvarianceReport> {
    if orderings.len() < 2 {
        return Err(Error::Config("order invariance needs at least two orderings".into()));
    }
    let mut reference = orderings[0].clone();
    reference.sort_unstable();
    for o in orderings {
        let mut s = o.clone();
        s.sort_unstable();
        if s != reference {
            return Err(Error::Config(format!("ordering {o:?} is not a permutation of {:?}", orderings[0])));
        }
    }
    let mut finals = Vec::with_capacity(orderings.len());
    for o in orderings {
        let run = run_pipeline(scenario, base, o, Variant::Gcl, &scenario.config.replay)?;
        finals.push(run.rounds.last().expect("rounds").report.clone());
    }
    compare_orderings(orderings, &finals)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub base_acc1: f64,
    pub new_acc1: f64,
    /// Differences from the reference alpha.
    pub base_delta: f64,
    pub new_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub reference_alpha: f64,
    pub seed: u64,
    pub new_city: u32,
    pub points: Vec<SweepPoint>,
}

/// One continual round on `new_city` per alpha, everything else fixed.
pub fn replay_volume_sweep(alphas: &[f64], reference: f64, scenario: &Scenario, base: &TeacherSnapshot, new_city: u32) -> Result<SweepReport> {
    if alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::Config("alpha values must be positive".into()));
    }
    if !alphas.contains(&reference) {
        return Err(Error::Config(format!("reference alpha {reference} is not among {alphas:?}")));
    }
    let base_ids = base.city_ids();
    let mut raw = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let replay = ReplayConfig {
            alpha,
            ..scenario.config.replay.clone()
        };
        let run = run_pipeline(scenario, base, &[new_city], Variant::Gcl, &replay)?;
        let report = &run.rounds[0].report;
        raw.push((alpha, report.mean_acc1(&base_ids)?, report.mean_acc1(&[new_city])?));
    }
    let (_, rb, rn) = *raw.iter().find(|r| r.0 == reference).expect("reference present");
    Ok(SweepReport {
        reference_alpha: reference,
        seed: scenario.config.seed,
        new_city,
        points: raw
            .into_iter()
            .map(|(alpha, b, n)| SweepPoint {
                alpha,
                base_acc1: b,
                new_acc1: n,
                base_delta: b - rb,
                new_delta: n - rn,
            })
            .collect(),
    })
}
