//! Top-k accuracy and the scorer abstraction shared by the model and the
//! baselines.

use crate::data::{City, Trajectory};
use crate::error::{Error, Result};
use crate::model::MoEModel;
use crate::tensor::Mat;

/// Anything that scores the candidate locations of a city after each prefix.
pub trait Scorer {
    /// For each trajectory, a matrix with one row per prediction position
    /// `0..len-1`; row `t` scores the location of token `t + 1`.
    fn score(&self, trajs: &[&Trajectory], city: &City) -> Result<Vec<Mat>>;
}

/// Scores and ground truth for a set of prediction positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub n_candidates: usize,
    pub scores: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn push(&mut self, scores: Vec<f64>, truth: usize) {
        self.scores.push(scores);
        self.truth.push(truth);
    }
}

/// Every prefix position of every test trajectory.
pub fn collect_predictions(scorer: &dyn Scorer, test: &[Trajectory], city: &City) -> Result<Predictions> {
    let mut p = Predictions {
        n_candidates: city.n_locations(),
        ..Default::default()
    };
    for chunk in test.chunks(64) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        for (t, m) in chunk.iter().zip(scorer.score(&refs, city)?) {
            if m.rows + 1 != t.len() || m.cols != p.n_candidates {
                return Err(Error::Data(format!(
                    "scorer returned {}x{} for a trajectory of length {} over {} candidates",
                    m.rows,
                    m.cols,
                    t.len(),
                    p.n_candidates
                )));
            }
            for r in 0..m.rows {
                p.push(m.row(r).to_vec(), t.tokens[r + 1].loc);
            }
        }
    }
    Ok(p)
}

/// Position of `truth` when candidates are ordered by descending score, the
/// lower index first among ties.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count()
}

/// Fraction of positions whose true next location is among the top `k`.
pub fn acc_at_k(p: &Predictions, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > p.n_candidates {
        return Err(Error::Config(format!("k = {k} exceeds the {} candidates", p.n_candidates)));
    }
    if p.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut hits = 0usize;
    for (s, &t) in p.scores.iter().zip(&p.truth) {
        if s.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("prediction score"));
        }
        if t >= s.len() {
            return Err(Error::Data(format!("true location {t} outside {} candidates", s.len())));
        }
        hits += (rank_of(s, t) < k) as usize;
    }
    Ok(hits as f64 / p.len() as f64)
}

/// The model as a scorer over its registered cities.
pub struct ModelScorer<'a> {
    pub model: &'a MoEModel,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, trajs: &[&Trajectory], city: &City) -> Result<Vec<Mat>> {
        let logits = self.model.next_logits(trajs, &[city])?;
        Ok(logits
            .into_iter()
            .map(|m| {
                let rows = m.rows - 1;
                Mat::from_vec(rows, m.cols, m.data[..rows * m.cols].to_vec())
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(n: usize, rows: &[(&[f64], usize)]) -> Predictions {
        let mut p = Predictions {
            n_candidates: n,
            ..Default::default()
        };
        for (s, t) in rows {
            p.push(s.to_vec(), *t);
        }
        p
    }

    #[test]
    fn half_of_four_in_top_one() {
        let p = preds(3, &[(&[0.9, 0.1, 0.0], 0), (&[0.1, 0.9, 0.0], 1), (&[0.9, 0.1, 0.0], 2), (&[0.2, 0.1, 0.7], 0)]);
        assert_eq!(acc_at_k(&p, 1).unwrap(), 0.5);
        assert_eq!(acc_at_k(&p, 3).unwrap(), 1.0);
    }

    #[test]
    fn ties_favour_lower_index() {
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0), 0);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2), 2);
        assert_eq!(rank_of(&[0.0, 2.0, 1.0], 2), 1);
    }

    #[test]
    fn bad_k_and_empty_sets() {
        let p = preds(2, &[(&[0.5, 0.5], 1)]);
        assert!(acc_at_k(&p, 0).is_err());
        assert!(acc_at_k(&p, 3).is_err());
        assert!(acc_at_k(&preds(2, &[]), 1).is_err());
        assert!(acc_at_k(&preds(2, &[(&[f64::NAN, 0.0], 0)]), 1).is_err());
    }
}
