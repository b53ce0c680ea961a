//! Seeded synthetic cities with known ground-truth dynamics.
//!
//! Each city places `n_locations` on a grid, gives each a dominant POI
//! category and draws a city-specific taste over categories. A gravity-style
//! first-order transition matrix (attractive and nearby places are likely)
//! drives movement, mixed with two per-user moves: exploration (uniform jump
//! to any other location) and preferential return (jump home). Because the
//! dominant term is Markov and known, the expected accuracy of predicting the
//! argmax transition is available in closed form.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::city::{City, Location, LocationFeature};
use super::grid::{GridSpec, TimeSpec};
use super::trajectory::{Token, Trajectory};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{softmax, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub city_id: u32,
    pub name: String,
    pub n_locations: usize,
    pub n_users: usize,
    pub traj_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub poi_categories: usize,
    /// Half-width of the uniform range of per-category taste weights, which
    /// set how unequal location attractiveness is.
    pub taste_spread: f64,
    /// Probability of a uniform jump to another location.
    pub explore_prob: f64,
    /// Probability of returning home.
    pub return_prob: f64,
    /// Inverse temperature of the gravity transition logits.
    pub sharpness: f64,
    /// Distance decay length, in cells.
    pub decay_cells: f64,
    /// Grid side; `None` picks `ceil(sqrt(2 n_locations))`.
    pub grid_side: Option<usize>,
    pub origin: (f64, f64),
}

impl SynthParams {
    pub fn new(city_id: u32, n_locations: usize, traj_count: usize) -> Self {
        SynthParams {
            city_id,
            name: format!("synthetic-{city_id}"),
            n_locations,
            n_users: (traj_count / 4).max(1),
            traj_count,
            min_len: 6,
            max_len: 10,
            poi_categories: 8,
            taste_spread: 1.5,
            explore_prob: 0.05,
            return_prob: 0.10,
            sharpness: 2.5,
            decay_cells: 1.5,
            grid_side: None,
            origin: (33.0 + city_id as f64 * 0.5, -84.0 + city_id as f64 * 0.5),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_locations < 2 || self.n_users == 0 || self.traj_count == 0 || self.poi_categories == 0 {
            return Err(Error::Config("synthetic city needs >= 2 locations, users, trajectories and POI categories".into()));
        }
        if !(self.taste_spread >= 0.0) {
            return Err(Error::Config("taste_spread must be nonnegative".into()));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        let p = self.explore_prob + self.return_prob;
        if !(0.0..=1.0).contains(&self.explore_prob) || !(0.0..=1.0).contains(&self.return_prob) || p > 1.0 {
            return Err(Error::Config("explore/return probabilities must be in [0,1] and sum to <= 1".into()));
        }
        Ok(())
    }
}

/// The generator's true dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Row-stochastic gravity matrix with a zero diagonal.
    pub transition: Mat,
    /// Home location per user id.
    pub homes: Vec<usize>,
    pub explore_prob: f64,
    pub return_prob: f64,
    /// Latent attractiveness of each location.
    pub attractiveness: Vec<f64>,
}

impl GroundTruth {
    pub fn n_locations(&self) -> usize {
        self.transition.rows
    }

    /// Exact next-location distribution for a user standing at `cur`.
    pub fn next_distribution(&self, cur: usize, user: usize) -> Vec<f64> {
        let n = self.n_locations();
        let home = self.homes[user];
        let follow = if cur == home {
            1.0 - self.explore_prob
        } else {
            1.0 - self.explore_prob - self.return_prob
        };
        let mut p: Vec<f64> = self.transition.row(cur).iter().map(|t| follow * t).collect();
        for (j, pj) in p.iter_mut().enumerate() {
            if j != cur {
                *pj += self.explore_prob / (n - 1) as f64;
            }
        }
        if cur != home {
            p[home] += self.return_prob;
        }
        p
    }

    /// Argmax of each transition row (lowest id on ties).
    pub fn argmax_successors(&self) -> Vec<usize> {
        (0..self.n_locations())
            .map(|i| crate::tensor::top_k_indices(self.transition.row(i), 1)[0])
            .collect()
    }

    /// Expected acc@1 of always predicting the argmax transition, evaluated
    /// over every step of `data` with the true per-user move probabilities.
    pub fn analytic_argmax_accuracy(&self, data: &[Trajectory]) -> f64 {
        let succ = self.argmax_successors();
        let mut hit = 0.0;
        let mut n = 0usize;
        for t in data {
            let user = t.user_id.expect("synthetic trajectories carry user ids") as usize;
            for w in t.tokens.windows(2) {
                hit += self.next_distribution(w[0].loc, user)[succ[w[0].loc]];
                n += 1;
            }
        }
        hit / n.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCity {
    pub city: City,
    pub trajectories: Vec<Trajectory>,
    pub truth: GroundTruth,
}

pub fn generate_synthetic_city(seed: u64, params: &SynthParams) -> Result<SyntheticCity> {
    params.validate()?;
    let side = params
        .grid_side
        .unwrap_or_else(|| ((2 * params.n_locations) as f64).sqrt().ceil() as usize);
    let grid = GridSpec::new(params.origin, side, side, 500.0)?;
    if params.n_locations > grid.n_cells() {
        return Err(Error::Config(format!(
            "{} locations do not fit in a {side}x{side} grid",
            params.n_locations
        )));
    }
    let n = params.n_locations;
    let mut rng = rng_for(seed, "city-layout", params.city_id as u64);
    let mut cells = sample_indices(&mut rng, grid.n_cells(), n).into_vec();
    cells.sort_unstable();

    let k = params.poi_categories;
    let taste: Vec<f64> = (0..k).map(|_| rng.gen_range(-params.taste_spread..=params.taste_spread)).collect();
    let mut locations = Vec::with_capacity(n);
    let mut attract = Vec::with_capacity(n);
    for &cell in &cells {
        let dominant = rng.gen_range(0..k);
        let mut poi: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..0.2)).collect();
        poi[dominant] += 1.0;
        let total: f64 = poi.iter().sum();
        poi.iter_mut().for_each(|p| *p /= total);
        let noise: f64 = rng.sample(StandardNormal);
        let score: f64 = 2.0 * poi.iter().zip(&taste).map(|(p, w)| p * w).sum::<f64>() + 0.3 * noise;
        attract.push(score.exp());
        let (a, b) = grid.normalized(cell);
        locations.push(Location {
            cell,
            feature: LocationFeature {
                poi,
                latlon_norm: [a, b],
                heat: vec![0.0],
            },
        });
    }

    let mut transition = Mat::zeros(n, n);
    for i in 0..n {
        let (ri, ci) = ((cells[i] / side) as f64, (cells[i] % side) as f64);
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                if j == i {
                    f64::NEG_INFINITY
                } else {
                    let (rj, cj) = ((cells[j] / side) as f64, (cells[j] % side) as f64);
                    let d = ((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt();
                    params.sharpness * (attract[j].ln() - d / params.decay_cells)
                }
            })
            .collect();
        transition.row_mut(i).copy_from_slice(&softmax(&logits));
    }

    let home_pick = WeightedIndex::new(&attract).expect("positive attractiveness");
    let homes: Vec<usize> = (0..params.n_users).map(|_| home_pick.sample(&mut rng)).collect();
    let truth = GroundTruth {
        transition,
        homes,
        explore_prob: params.explore_prob,
        return_prob: params.return_prob,
        attractiveness: attract,
    };

    let time = TimeSpec::default();
    let trajectories: Vec<Trajectory> = (0..params.traj_count)
        .into_par_iter()
        .map(|i| sample_trajectory(seed, i as u64, params, &truth, &time, &home_pick))
        .collect();

    let mut od_heat = vec![0.0; n];
    for t in &trajectories {
        for l in t.locations() {
            od_heat[l] += 1.0;
        }
    }
    let mut city = City {
        city_id: params.city_id,
        name: params.name.clone(),
        grid,
        time,
        locations,
        od_heat,
    };
    city.refresh_heat_features();
    Ok(SyntheticCity {
        city,
        trajectories,
        truth,
    })
}

fn sample_trajectory(
    seed: u64,
    index: u64,
    params: &SynthParams,
    truth: &GroundTruth,
    time: &TimeSpec,
    popularity: &WeightedIndex<f64>,
) -> Trajectory {
    let mut rng = rng_for(seed, &format!("traj-{}", params.city_id), index);
    let user = rng.gen_range(0..params.n_users);
    let len = rng.gen_range(params.min_len..=params.max_len);
    let spd = time.slots_per_day();
    let mut slot = rng.gen_range(0..7) * spd + rng.gen_range(spd / 4..spd * 3 / 4);
    let mut loc = if rng.gen_bool(0.5) {
        truth.homes[user]
    } else {
        popularity.sample(&mut rng)
    };
    let mut tokens = Vec::with_capacity(len);
    tokens.push(Token::new(loc, slot));
    for _ in 1..len {
        let p = truth.next_distribution(loc, user);
        loc = WeightedIndex::new(&p).expect("valid row").sample(&mut rng);
        slot = (slot + rng.gen_range(1..=4)) % time.slots_per_week();
        tokens.push(Token::new(loc, slot));
    }
    Trajectory {
        city_id: params.city_id,
        user_id: Some(user as u64),
        tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams::new(1, 30, 200)
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate_synthetic_city(5, &small()).unwrap();
        let b = generate_synthetic_city(5, &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_city(6, &small()).unwrap();
        assert_ne!(a.trajectories, c.trajectories);
    }

    #[test]
    fn heat_is_visit_counts() {
        let s = generate_synthetic_city(3, &small()).unwrap();
        let mut counts = vec![0.0; s.city.n_locations()];
        for t in &s.trajectories {
            for l in t.locations() {
                counts[l] += 1.0;
            }
        }
        assert_eq!(s.city.od_heat, counts);
    }

    #[test]
    fn outputs_respect_the_configuration() {
        let p = small();
        let s = generate_synthetic_city(9, &p).unwrap();
        s.city.validate().unwrap();
        assert_eq!(s.trajectories.len(), p.traj_count);
        for t in &s.trajectories {
            assert!((p.min_len..=p.max_len).contains(&t.len()));
            s.city.check_trajectory(t).unwrap();
        }
        for i in 0..s.truth.n_locations() {
            let row: f64 = s.truth.transition.row(i).iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
            let nd: f64 = s.truth.next_distribution(i, 0).iter().sum();
            assert!((nd - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_locations_for_the_grid() {
        let mut p = small();
        p.grid_side = Some(5);
        assert!(generate_synthetic_city(1, &p).is_err());
        p.n_locations = 0;
        assert!(generate_synthetic_city(1, &p).is_err());
    }
}
