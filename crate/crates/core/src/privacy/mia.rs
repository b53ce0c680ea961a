//! Membership inference from the similarity between a trajectory and a
//! generation conditioned on it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::classifier::{fit_predict, AttackClassifier};
use super::generator::TrajectoryGenerator;
use super::similarity::trajectory_similarity;
use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

pub const ATTACK_TRAIN_FRACTION: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub classifier: AttackClassifier,
    /// Correct membership calls on the attack test split.
    pub success: f64,
    /// Set when the feature takes a single value; `success` is then 0.5.
    pub degenerate: bool,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub member_mean: f64,
    pub nonmember_mean: f64,
    pub seed: u64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Attack on precomputed features with a stratified 70/30 split.
pub fn mia_from_features(members: &[f64], nonmembers: &[f64], classifier: AttackClassifier, seed: u64) -> Result<MiaReport> {
    if members.is_empty() || members.len() != nonmembers.len() {
        return Err(Error::Config(format!(
            "membership attack needs equal, nonzero class sizes; got {} and {}",
            members.len(),
            nonmembers.len()
        )));
    }
    let mut report = MiaReport {
        classifier,
        success: 0.5,
        degenerate: false,
        n_members: members.len(),
        n_nonmembers: nonmembers.len(),
        n_train: 0,
        n_test: 0,
        member_mean: mean(members),
        nonmember_mean: mean(nonmembers),
        seed,
    };
    let first = members[0];
    if members.iter().chain(nonmembers).all(|&v| v == first) {
        report.degenerate = true;
        return Ok(report);
    }
    let mut rng = rng_for(seed, "mia-split", 0);
    let (mut tx, mut ty, mut sx, mut sy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (values, label) in [(members, true), (nonmembers, false)] {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.shuffle(&mut rng);
        let cut = (ATTACK_TRAIN_FRACTION * values.len() as f64).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            if k < cut {
                tx.push(vec![values[i]]);
                ty.push(label);
            } else {
                sx.push(vec![values[i]]);
                sy.push(label);
            }
        }
    }
    if sx.is_empty() || tx.is_empty() {
        return Err(Error::Config("too few samples for a 70/30 attack split".into()));
    }
    let pred = fit_predict(classifier, &tx, &ty, &sx, derive_seed(seed, "mia-classifier", 0));
    let correct = pred.iter().zip(&sy).filter(|(p, y)| p == y).count();
    report.n_train = tx.len();
    report.n_test = sx.len();
    report.success = correct as f64 / sx.len() as f64;
    Ok(report)
}

/// Feature per trajectory: its similarity to a generation conditioned on it.
pub fn membership_features(generator: &dyn TrajectoryGenerator, trajs: &[Trajectory], seed: u64, stream: &str) -> Result<Vec<f64>> {
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let seeds: Vec<u64> = (0..trajs.len() as u64).map(|i| derive_seed(seed, stream, i)).collect();
    let generated = generator.generate(&refs, &seeds)?;
    Ok(trajs.iter().zip(&generated).map(|(a, b)| trajectory_similarity(a, b)).collect())
}

pub fn membership_inference_attack(
    generator: &dyn TrajectoryGenerator,
    members: &[Trajectory],
    nonmembers: &[Trajectory],
    classifier: AttackClassifier,
    seed: u64,
) -> Result<MiaReport> {
    if members.len() != nonmembers.len() {
        return Err(Error::Config("members and nonmembers must be balanced".into()));
    }
    if nonmembers.iter().any(|n| members.contains(n)) {
        return Err(Error::Config("members and nonmembers overlap".into()));
    }
    let m = membership_features(generator, members, seed, "mia-members")?;
    let n = membership_features(generator, nonmembers, seed, "mia-nonmembers")?;
    mia_from_features(&m, &n, classifier, seed)
}
