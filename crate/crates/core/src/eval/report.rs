use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{acc_at_k, collect_predictions, ModelScorer, Scorer};
use crate::data::{write_json, City, Trajectory};
use crate::error::{Error, Result};
use crate::model::MoEModel;

/// Evaluation covers the prediction after every prefix, not only the last.
pub const EVAL_POSITIONS: &str = "every-prefix";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityEval {
    pub city_id: u32,
    pub acc1: f64,
    pub acc3: f64,
    pub positions: usize,
    pub trajectories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub model_fingerprint: Option<String>,
    pub config_hash: Option<String>,
    pub round: usize,
    pub seed: u64,
    pub eval_positions: String,
    pub cities: Vec<CityEval>,
}

pub fn evaluate(scorer: &dyn Scorer, sets: &[(&City, &[Trajectory])]) -> Result<Vec<CityEval>> {
    sets.iter()
        .map(|(city, test)| {
            let p = collect_predictions(scorer, test, city)?;
            let acc1 = acc_at_k(&p, 1)?;
            let acc3 = acc_at_k(&p, 3)?;
            Ok(CityEval {
                city_id: city.city_id,
                acc1,
                acc3,
                positions: p.len(),
                trajectories: test.len(),
            })
        })
        .collect()
}

pub fn evaluate_model(model: &MoEModel, sets: &[(&City, &[Trajectory])], seed: u64) -> Result<EvalReport> {
    Ok(EvalReport {
        scorer: "model".into(),
        model_fingerprint: Some(model.params.fingerprint()),
        config_hash: Some(model.config.hash()),
        round: model.lineage.len().saturating_sub(1),
        seed,
        eval_positions: EVAL_POSITIONS.into(),
        cities: evaluate(&ModelScorer { model }, sets)?,
    })
}

impl EvalReport {
    pub fn city(&self, id: u32) -> Option<&CityEval> {
        self.cities.iter().find(|c| c.city_id == id)
    }

    /// Mean acc@1 over `ids`; every city must be in the report.
    pub fn mean_acc1(&self, ids: &[u32]) -> Result<f64> {
        if ids.is_empty() {
            return Err(Error::Empty("city list"));
        }
        let mut s = 0.0;
        for &id in ids {
            s += self.city(id).ok_or(Error::UnknownCity(id))?.acc1;
        }
        Ok(s / ids.len() as f64)
    }

    /// `city,metric,value,seed,round` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("city,metric,value,seed,round\n");
        for c in &self.cities {
            for (metric, v) in [("acc@1", c.acc1), ("acc@3", c.acc3)] {
                writeln!(out, "{},{metric},{v},{},{}", c.city_id, self.seed, self.round).expect("write to string");
            }
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        write_json(&json, self)?;
        Ok((csv, json))
    }
}
