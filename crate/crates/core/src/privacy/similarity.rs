use serde::{Deserialize, Serialize};


use super::generator::TrajectoryGenerator;
use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Fraction of positions where both the time slot and the location agree;
/// zero when the lengths differ.
pub fn trajectory_similarity(a: &Trajectory, b: &Trajectory) -> f64 {
    if a.len() != b.len() || a.is_empty() {
        return 0.0;
    }
    let same = a.tokens.iter().zip(&b.tokens).filter(|(x, y)| x.loc == y.loc && x.slot == y.slot).count();
    same as f64 / a.len() as f64
}

/// Mean of the `m` largest similarities between `traj` and the corpus, for
/// each `m` in `ms`. Missing entries count as zero.
pub fn top_m_similarities(traj: &Trajectory, corpus: &[Trajectory], ms: &[usize]) -> Vec<f64> {
    let mut s: Vec<f64> = corpus.iter().map(|c| trajectory_similarity(traj, c)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    ms.iter().map(|&m| (0..m).map(|i| s.get(i).copied().unwrap_or(0.0)).sum::<f64>() / m as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub similarity: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub top_m: Vec<usize>,
    pub seed: u64,
    pub generations: usize,
    pub corpus_size: usize,
    /// `scores[i][j]`: generation `i`, top-`top_m[j]` similarity.
    pub scores: Vec<Vec<f64>>,
    /// Empirical CDF per top-m value, one point per distinct similarity.
    pub cdf: Vec<Vec<CdfPoint>>,
}

impl UniquenessReport {
    /// Fraction of generations whose top-`m` similarity exceeds `threshold`.
    pub fn fraction_above(&self, m: usize, threshold: f64) -> Option<f64> {
        let j = self.top_m.iter().position(|&x| x == m)?;
        let n = self.scores.iter().filter(|s| s[j] > threshold).count();
        Some(n as f64 / self.scores.len().max(1) as f64)
    }

    /// `top_m,similarity,fraction` rows.
    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("top_m,similarity,fraction\n");
        for (m, points) in self.top_m.iter().zip(&self.cdf) {
            for p in points {
                out.push_str(&format!("{m},{},{}\n", p.similarity, p.fraction));
            }
        }
        out
    }
}

pub fn empirical_cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        match out.last_mut() {
            Some(p) if p.similarity == *x => p.fraction = (i + 1) as f64 / n,
            _ => out.push(CdfPoint {
                similarity: *x,
                fraction: (i + 1) as f64 / n,
            }),
        }
    }
    out
}

/// One generation per sample trajectory, each compared against the corpus.
pub fn uniqueness_test(
    generator: &dyn TrajectoryGenerator,
    sample: &[Trajectory],
    corpus: &[Trajectory],
    top_m: &[usize],
    seed: u64,
) -> Result<UniquenessReport> {
    if sample.is_empty() {
        return Err(Error::Empty("uniqueness sample"));
    }
    if top_m.is_empty() || top_m.contains(&0) {
        return Err(Error::Config("top-m values must be positive".into()));
    }
    let refs: Vec<&Trajectory> = sample.iter().collect();
    let seeds: Vec<u64> = (0..sample.len() as u64).map(|i| derive_seed(seed, "uniqueness", i)).collect();
    let generated = generator.generate(&refs, &seeds)?;
    let scores: Vec<Vec<f64>> = generated.iter().map(|g| top_m_similarities(g, corpus, top_m)).collect();
    let cdf = (0..top_m.len())
        .map(|j| empirical_cdf(&scores.iter().map(|s| s[j]).collect::<Vec<_>>()))
        .collect();
    Ok(UniquenessReport {
        top_m: top_m.to_vec(),
        seed,
        generations: generated.len(),
        corpus_size: corpus.len(),
        scores,
        cdf,
    })
}
