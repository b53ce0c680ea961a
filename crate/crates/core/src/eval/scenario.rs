//! Synthetic multi-city scenarios for the desk experiments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_city, split_dataset, City, DatasetSplit, GroundTruth, Quantizer, StartDistribution, SynthParams, Trajectory};
use crate::engine::{base_train, EpochLog, ReplayConfig, TeacherSnapshot, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{MoEModel, ModelConfig};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub base_cities: usize,
    pub continual_cities: usize,
    pub n_locations: usize,
    pub trajectories_per_city: usize,
    /// Gravity-matrix sharpness of the synthetic generator.
    pub sharpness: f64,
    pub explore_prob: f64,
    pub taste_spread: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub model: ModelConfig,
    pub base_train: TrainConfig,
    pub continual_train: TrainConfig,
    pub replay: ReplayConfig,
}

impl ScenarioConfig {
    /// Three base cities and three continual cities with the desk model.
    pub fn desk(seed: u64) -> Self {
        ScenarioConfig {
            seed,
            base_cities: 3,
            continual_cities: 3,
            n_locations: 30,
            trajectories_per_city: 500,
            sharpness: 2.5,
            explore_prob: 0.05,
            taste_spread: 0.75,
            split: [0.8, 0.0, 0.2],
            model: ModelConfig {
                init_seed: seed,
                ..ModelConfig::desk()
            },
            base_train: TrainConfig {
                seed,
                ..TrainConfig::desk_base()
            },
            continual_train: TrainConfig {
                seed,
                ..TrainConfig::desk_continual()
            },
            replay: ReplayConfig {
                seed,
                ..ReplayConfig::default()
            },
        }
    }
}

pub struct Scenario {
    pub config: ScenarioConfig,
    /// Base cities first, then continual cities; ids equal positions.
    pub cities: Vec<City>,
    pub splits: Vec<DatasetSplit>,
    pub truths: Vec<GroundTruth>,
}

pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    if config.base_cities == 0 {
        return Err(Error::Config("a scenario needs at least one base city".into()));
    }
    let n = config.base_cities + config.continual_cities;
    let mut cities = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let params = SynthParams {
            sharpness: config.sharpness,
            explore_prob: config.explore_prob,
            taste_spread: config.taste_spread,
            ..SynthParams::new(i as u32, config.n_locations, config.trajectories_per_city)
        };
        let s = generate_synthetic_city(derive_seed(config.seed, "city", i as u64), &params)?;
        splits.push(split_dataset(&s.trajectories, config.split, derive_seed(config.seed, "split", i as u64))?);
        cities.push(s.city);
        truths.push(s.truth);
    }
    Ok(Scenario {
        config: config.clone(),
        cities,
        splits,
        truths,
    })
}

impl Scenario {
    pub fn base_ids(&self) -> Vec<u32> {
        (0..self.config.base_cities as u32).collect()
    }

    pub fn continual_ids(&self) -> Vec<u32> {
        (self.config.base_cities as u32..self.cities.len() as u32).collect()
    }

    pub fn city(&self, id: u32) -> Result<&City> {
        self.cities.get(id as usize).ok_or(Error::UnknownCity(id))
    }

    pub fn split(&self, id: u32) -> Result<&DatasetSplit> {
        self.splits.get(id as usize).ok_or(Error::UnknownCity(id))
    }

    pub fn test_sets(&self, ids: &[u32]) -> Result<Vec<(&City, &[Trajectory])>> {
        ids.iter().map(|&id| Ok((self.city(id)?, self.split(id)?.test.as_slice()))).collect()
    }

    /// Trains the base model on the base cities and wraps it as the first
    /// teacher.
    pub fn train_base(&self, mobility_routing: bool) -> Result<(TeacherSnapshot, Vec<EpochLog>)> {
        let ids = self.base_ids();
        let cities: Vec<&City> = ids.iter().map(|&id| self.city(id)).collect::<Result<_>>()?;
        let train: Vec<Trajectory> = ids.iter().flat_map(|&id| self.splits[id as usize].train.iter().cloned()).collect();
        let quantizer = Quantizer::fit(self.config.model.quant_bins, train.iter().map(|t| (t, &self.cities[t.city_id as usize])));
        let config = ModelConfig {
            mobility_routing,
            ..self.config.model.clone()
        };
        let mut model = MoEModel::new(config, quantizer)?;
        let logs = base_train(&mut model, &cities, &train, &self.config.base_train)?;
        let mut starts = BTreeMap::new();
        for &id in &ids {
            starts.insert(id, StartDistribution::fit(&self.splits[id as usize].train)?);
        }
        let owned = cities.into_iter().cloned().collect();
        Ok((TeacherSnapshot::new(model, owned, starts), logs))
    }
}
