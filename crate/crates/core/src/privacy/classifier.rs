//! Small binary classifiers for the membership attack.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackClassifier {
    LogisticRegression,
    /// Linear classifier trained on the hinge loss.
    LinearMargin,
    RandomForest,
}

impl AttackClassifier {
    pub const ALL: [AttackClassifier; 3] = [AttackClassifier::LogisticRegression, AttackClassifier::LinearMargin, AttackClassifier::RandomForest];

    pub fn name(self) -> &'static str {
        match self {
            AttackClassifier::LogisticRegression => "logistic-regression",
            AttackClassifier::LinearMargin => "linear-margin",
            AttackClassifier::RandomForest => "random-forest",
        }
    }
}

/// Trains on `(x, y)` and labels `test`.
pub fn fit_predict(kind: AttackClassifier, x: &[Vec<f64>], y: &[bool], test: &[Vec<f64>], seed: u64) -> Vec<bool> {
    match kind {
        AttackClassifier::LogisticRegression | AttackClassifier::LinearMargin => {
            let s = Standardizer::fit(x);
            let xs: Vec<Vec<f64>> = x.iter().map(|r| s.apply(r)).collect();
            let (w, b) = if kind == AttackClassifier::LogisticRegression {
                logistic(&xs, y)
            } else {
                hinge(&xs, y)
            };
            test.iter().map(|r| dot(&w, &s.apply(r)) + b > 0.0).collect()
        }
        AttackClassifier::RandomForest => {
            let forest = Forest::fit(x, y, 50, 6, seed);
            test.iter().map(|r| forest.predict(r)).collect()
        }
    }
}

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
            .collect();
        Standardizer { mean, std }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logistic(x: &[Vec<f64>], y: &[bool]) -> (Vec<f64>, f64) {
    let (d, n) = (x[0].len(), x.len() as f64);
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (r, &t) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(dot(&w, r) + b)).exp());
            let e = p - t as u8 as f64;
            gw.iter_mut().zip(r).for_each(|(g, v)| *g += e * v / n);
            gb += e / n;
        }
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= 0.5 * g);
        b -= 0.5 * gb;
    }
    (w, b)
}

fn hinge(x: &[Vec<f64>], y: &[bool]) -> (Vec<f64>, f64) {
    let (d, n) = (x[0].len(), x.len() as f64);
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let reg = 1e-3;
    for it in 0..500 {
        let lr = 0.5 / (1.0 + it as f64).sqrt();
        let mut gw: Vec<f64> = w.iter().map(|v| 2.0 * reg * v).collect();
        let mut gb = 0.0;
        for (r, &t) in x.iter().zip(y) {
            let s = if t { 1.0 } else { -1.0 };
            if s * (dot(&w, r) + b) < 1.0 {
                gw.iter_mut().zip(r).for_each(|(g, v)| *g -= s * v / n);
                gb -= s / n;
            }
        }
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
        b -= lr * gb;
    }
    (w, b)
}

enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

impl Node {
    fn predict(&self, r: &[f64]) -> f64 {
        match self {
            Node::Leaf(p) => *p,
            Node::Split { feature, threshold, left, right } => {
                if r[*feature] <= *threshold {
                    left.predict(r)
                } else {
                    right.predict(r)
                }
            }
        }
    }
}

fn gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let p = pos / n;
    2.0 * p * (1.0 - p)
}

/// CART on Gini impurity.
fn grow(x: &[Vec<f64>], y: &[bool], idx: &[usize], depth: usize, max_depth: usize, features: &[usize]) -> Node {
    let n = idx.len() as f64;
    let pos = idx.iter().filter(|&&i| y[i]).count() as f64;
    if depth >= max_depth || pos == 0.0 || pos == n || idx.len() < 2 {
        return Node::Leaf(pos / n);
    }
    let mut best: Option<(f64, usize, f64)> = None;
    for &f in features {
        let mut order = idx.to_vec();
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let mut left_pos = 0.0;
        for k in 0..order.len() - 1 {
            left_pos += y[order[k]] as u8 as f64;
            let (a, b) = (x[order[k]][f], x[order[k + 1]][f]);
            if a == b {
                continue;
            }
            let nl = (k + 1) as f64;
            let score = nl * gini(left_pos, nl) + (n - nl) * gini(pos - left_pos, n - nl);
            if best.is_none_or(|(s, _, _)| score < s) {
                best = Some((score, f, (a + b) / 2.0));
            }
        }
    }
    let Some((_, feature, threshold)) = best else { return Node::Leaf(pos / n) };
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][feature] <= threshold);
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(x, y, &l, depth + 1, max_depth, features)),
        right: Box::new(grow(x, y, &r, depth + 1, max_depth, features)),
    }
}

struct Forest {
    trees: Vec<Node>,
}

impl Forest {
    fn fit(x: &[Vec<f64>], y: &[bool], n_trees: usize, max_depth: usize, seed: u64) -> Self {
        let d = x[0].len();
        let m = ((d as f64).sqrt().round() as usize).max(1);
        let trees = (0..n_trees)
            .map(|t| {
                let mut rng = rng_for(seed, "forest", t as u64);
                let idx: Vec<usize> = (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect();
                let mut feats: Vec<usize> = (0..d).collect();
                feats.shuffle(&mut rng);
                feats.truncate(m);
                grow(x, y, &idx, 0, max_depth, &feats)
            })
            .collect();
        Forest { trees }
    }

    fn predict(&self, r: &[f64]) -> bool {
        let p = self.trees.iter().map(|t| t.predict(r)).sum::<f64>() / self.trees.len() as f64;
        p > 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_data_is_learned_by_every_classifier() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let y: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        for kind in AttackClassifier::ALL {
            let p = fit_predict(kind, &x, &y, &[vec![2.0], vec![37.0]], 1);
            assert_eq!(p, vec![false, true], "{}", kind.name());
        }
    }
}
