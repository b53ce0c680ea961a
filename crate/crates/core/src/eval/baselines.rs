//! First-order Markov, popularity and uniform-random scorers.

use rand::Rng as _;

use super::metrics::Scorer;
use crate::data::{City, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::tensor::{top_k_indices, Mat};

/// Row-normalized transition counts of one city. Rows of locations never
/// seen as a source fall back to the next-location popularity.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovModel {
    pub city_id: u32,
    pub transition: Vec<Option<Vec<f64>>>,
    pub popularity: Vec<f64>,
}

pub fn markov_fit(train: &[Trajectory], city: &City) -> Result<MarkovModel> {
    let n = city.n_locations();
    let mut counts = vec![vec![0.0; n]; n];
    let mut pop = vec![0.0; n];
    let mut any = false;
    for t in train.iter().filter(|t| t.city_id == city.city_id) {
        city.check_trajectory(t)?;
        for w in t.tokens.windows(2) {
            counts[w[0].loc][w[1].loc] += 1.0;
            pop[w[1].loc] += 1.0;
            any = true;
        }
    }
    if !any {
        return Err(Error::Empty("Markov training transitions"));
    }
    let total: f64 = pop.iter().sum();
    pop.iter_mut().for_each(|v| *v /= total);
    let transition = counts
        .into_iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            (s > 0.0).then(|| row.into_iter().map(|v| v / s).collect())
        })
        .collect();
    Ok(MarkovModel {
        city_id: city.city_id,
        transition,
        popularity: pop,
    })
}

impl MarkovModel {
    pub fn next_scores(&self, current: usize) -> &[f64] {
        match self.transition.get(current) {
            Some(Some(row)) => row,
            _ => &self.popularity,
        }
    }

    pub fn predict(&self, prefix: &Trajectory, k: usize) -> Vec<usize> {
        let cur = prefix.tokens.last().map(|t| t.loc).unwrap_or(usize::MAX);
        top_k_indices(self.next_scores(cur), k)
    }
}

impl Scorer for MarkovModel {
    fn score(&self, trajs: &[&Trajectory], city: &City) -> Result<Vec<Mat>> {
        if city.city_id != self.city_id {
            return Err(Error::UnknownCity(city.city_id));
        }
        Ok(trajs
            .iter()
            .map(|t| {
                let n = self.popularity.len();
                let mut m = Mat::zeros(t.len() - 1, n);
                for r in 0..t.len() - 1 {
                    m.row_mut(r).copy_from_slice(self.next_scores(t.tokens[r].loc));
                }
                m
            })
            .collect())
    }
}

/// Ranks every position by how often each location is a next visit.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity(pub MarkovModel);

impl Scorer for Popularity {
    fn score(&self, trajs: &[&Trajectory], city: &City) -> Result<Vec<Mat>> {
        if city.city_id != self.0.city_id {
            return Err(Error::UnknownCity(city.city_id));
        }
        let p = &self.0.popularity;
        Ok(trajs
            .iter()
            .map(|t| {
                let mut m = Mat::zeros(t.len() - 1, p.len());
                for r in 0..m.rows {
                    m.row_mut(r).copy_from_slice(p);
                }
                m
            })
            .collect())
    }
}

/// Independent uniform scores, reproducible from the seed and the order of
/// calls.
pub struct UniformScorer {
    rng: std::cell::RefCell<Rng>,
}

impl UniformScorer {
    pub fn new(seed: u64) -> Self {
        UniformScorer {
            rng: std::cell::RefCell::new(rng_for(seed, "uniform-scorer", 0)),
        }
    }
}

impl Scorer for UniformScorer {
    fn score(&self, trajs: &[&Trajectory], city: &City) -> Result<Vec<Mat>> {
        let mut rng = self.rng.borrow_mut();
        Ok(trajs
            .iter()
            .map(|t| {
                let mut m = Mat::zeros(t.len() - 1, city.n_locations());
                m.data.iter_mut().for_each(|v| *v = rng.gen());
                m
            })
            .collect())
    }
}
