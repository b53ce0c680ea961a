//! Empirical distribution of first locations conditioned on trajectory length.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trajectory::Trajectory;
use crate::error::{Error, Result};

/// A categorical over location ids, stored sparsely in ascending id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    pub ids: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Categorical {
    fn from_counts(counts: &BTreeMap<usize, u64>) -> Self {
        let total: u64 = counts.values().sum();
        Categorical {
            ids: counts.keys().copied().collect(),
            probs: counts.values().map(|&c| c as f64 / total as f64).collect(),
        }
    }

    pub fn prob(&self, id: usize) -> f64 {
        self.ids.binary_search(&id).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        let dist = WeightedIndex::new(&self.probs).map_err(|_| Error::Empty("start distribution"))?;
        Ok(self.ids[dist.sample(rng)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartDistribution {
    pub by_length: BTreeMap<usize, Categorical>,
    /// Length-marginalized distribution, used for unseen lengths.
    pub marginal: Categorical,
    pub fallback: bool,
}

impl StartDistribution {
    pub fn fit<'a>(data: impl IntoIterator<Item = &'a Trajectory>) -> Result<Self> {
        let mut by_len: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
        let mut all: BTreeMap<usize, u64> = BTreeMap::new();
        for t in data {
            let Some(first) = t.tokens.first() else { continue };
            *by_len.entry(t.len()).or_default().entry(first.loc).or_default() += 1;
            *all.entry(first.loc).or_default() += 1;
        }
        if all.is_empty() {
            return Err(Error::Empty("trajectory collection"));
        }
        Ok(StartDistribution {
            by_length: by_len.iter().map(|(&l, c)| (l, Categorical::from_counts(c))).collect(),
            marginal: Categorical::from_counts(&all),
            fallback: true,
        })
    }

    /// The categorical used for length `len`.
    pub fn for_length(&self, len: usize) -> Result<&Categorical> {
        match self.by_length.get(&len) {
            Some(c) => Ok(c),
            None if self.fallback => Ok(&self.marginal),
            None => Err(Error::Data(format!("no start distribution for length {len}"))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<usize> {
        self.for_length(len)?.sample(rng)
    }
}

/// Free function form of [`StartDistribution::fit`].
pub fn fit_start_distribution(data: &[Trajectory]) -> Result<StartDistribution> {
    StartDistribution::fit(data)
}

pub fn sample_start_location<R: Rng + ?Sized>(dist: &StartDistribution, len: usize, rng: &mut R) -> Result<usize> {
    dist.sample(len, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::trajectory::Token;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn t(start: usize, len: usize) -> Trajectory {
        let mut tokens = vec![Token::new(start, 0)];
        tokens.extend((1..len).map(|i| Token::new(9, i as u32)));
        Trajectory::new(0, tokens)
    }

    #[test]
    fn point_mass_when_every_start_agrees() {
        let d = fit_start_distribution(&vec![t(3, 5); 7]).unwrap();
        let c = d.for_length(5).unwrap();
        assert_eq!((c.ids.clone(), c.probs.clone()), (vec![3], vec![1.0]));
        let mut rng = crate::rng::seeded(1);
        for _ in 0..100 {
            assert_eq!(d.sample(5, &mut rng).unwrap(), 3);
        }
    }

    #[test]
    fn frequencies_are_empirical() {
        let data = vec![t(0, 4), t(0, 4), t(1, 4), t(0, 4), t(2, 6)];
        let d = fit_start_distribution(&data).unwrap();
        let c = d.for_length(4).unwrap();
        assert_eq!(c.probs, vec![0.75, 0.25]);
        for cat in d.by_length.values().chain([&d.marginal]) {
            assert!((cat.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unseen_length_falls_back_to_marginal() {
        let data = vec![t(0, 4), t(1, 6)];
        let mut d = fit_start_distribution(&data).unwrap();
        assert_eq!(d.for_length(9).unwrap(), &d.marginal);
        d.fallback = false;
        assert!(d.sample(9, &mut crate::rng::seeded(0)).is_err());
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(fit_start_distribution(&[]).is_err());
        let c = Categorical { ids: vec![], probs: vec![] };
        assert!(c.sample(&mut crate::rng::seeded(0)).is_err());
    }

    #[test]
    fn draws_follow_the_categorical() {
        let data = vec![t(0, 4), t(0, 4), t(1, 4), t(0, 4)];
        let d = fit_start_distribution(&data).unwrap();
        let mut rng = crate::rng::seeded(42);
        let n = 10_000;
        let zeros = (0..n).filter(|_| d.sample(4, &mut rng).unwrap() == 0).count();
        let f = zeros as f64 / n as f64;
        assert!((f - 0.75).abs() < 0.02, "{f}");
    }

    #[test]
    fn chi_square_against_counts() {
        let counts = [5usize, 1, 3, 7, 4];
        let data: Vec<Trajectory> = counts
            .iter()
            .enumerate()
            .flat_map(|(loc, &c)| std::iter::repeat(t(loc, 6)).take(c))
            .collect();
        let d = fit_start_distribution(&data).unwrap();
        let mut rng = crate::rng::seeded(7);
        let n = 10_000;
        let mut obs = [0usize; 5];
        for _ in 0..n {
            obs[d.sample(6, &mut rng).unwrap()] += 1;
        }
        let total: usize = counts.iter().sum();
        let stat: f64 = counts
            .iter()
            .zip(obs)
            .map(|(&c, o)| {
                let e = n as f64 * c as f64 / total as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat} p {p}");
    }
}
