//! Layer-wise progressive adaptation: stage schedule, expert activation
//! statistics and per-stage trainable masks.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{City, Trajectory};
use crate::error::{Error, Result};
use crate::model::MoEModel;
use crate::params::ParamMask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    /// 1-based stage number.
    pub index: usize,
    /// `(input-side layer, output-side layer)`.
    pub layers: (usize, usize),
    pub epochs: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
}

/// `N/2` stages of `E/(N/2)` epochs; stage `s` unfreezes layers
/// `(s-1, N-s)`, from the outermost pair inwards.
pub fn build_stage_schedule(n_layers: usize, epochs: usize) -> Result<StageSchedule> {
    if n_layers == 0 || n_layers % 2 != 0 {
        return Err(Error::Config(format!("stage schedule needs an even layer count, got {n_layers}")));
    }
    let n_stages = n_layers / 2;
    if epochs == 0 || epochs % n_stages != 0 {
        return Err(Error::Config(format!("{epochs} epochs do not split evenly into {n_stages} stages")));
    }
    let per = epochs / n_stages;
    Ok(StageSchedule {
        stages: (1..=n_stages)
            .map(|s| Stage {
                index: s,
                layers: (s - 1, n_layers - s),
                epochs: (s - 1) * per..s * per,
            })
            .collect(),
    })
}

/// Per layer, per expert selection frequency over a reference pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub freq: Vec<Vec<f64>>,
    pub tokens: usize,
}

impl ActivationStats {
    /// Half of the uniform share `K / experts` in each layer.
    pub fn default_threshold(&self, top_k: usize, layer: usize) -> f64 {
        0.5 * top_k as f64 / self.freq[layer].len() as f64
    }
}

pub fn collect_activation_stats(model: &MoEModel, data: &[&Trajectory], cities: &[&City]) -> Result<ActivationStats> {
    if data.is_empty() {
        return Err(Error::Empty("activation sample"));
    }
    let counts = model.expert_counts();
    let mut hits: Vec<Vec<u64>> = counts.iter().map(|&n| vec![0; n]).collect();
    let mut tokens = 0usize;
    for chunk in data.chunks(32) {
        let b = model.prepare_batch(chunk, cities)?;
        let mut t = crate::autograd::Tape::frozen(&model.params);
        let out = model.forward_tape(&mut t, &b, cities, None)?;
        for (layer, decisions) in out.trace.layers.iter().enumerate() {
            for d in decisions {
                for &e in &d.experts {
                    hits[layer][e] += 1;
                }
            }
        }
        tokens += b.rows;
    }
    Ok(ActivationStats {
        freq: hits
            .iter()
            .map(|row| row.iter().map(|&h| h as f64 / tokens as f64).collect())
            .collect(),
        tokens,
    })
}

/// Trainable set of one stage: routers of the unfrozen pair, experts added
/// this round, old experts selected less often than the threshold (except in
/// the input-side layer during stage 1), and the whole mobility encoder.
///
/// `old_experts[l]` is the expert count of layer `l` before expansion;
/// `threshold` of `None` uses [`ActivationStats::default_threshold`].
pub fn select_trainable_params(
    stage: &Stage,
    model: &MoEModel,
    stats: &ActivationStats,
    old_experts: &[usize],
    threshold: Option<f64>,
) -> ParamMask {
    let mut mask = ParamMask::none();
    mask.extend(model.mobility_params());
    let (input_side, output_side) = stage.layers;
    for layer in [input_side, output_side] {
        mask.extend(model.router_params(layer));
        let th = threshold.unwrap_or_else(|| stats.default_threshold(model.config.top_k, layer));
        for e in 0..model.expert_counts()[layer] {
            let new = e >= old_experts[layer];
            let old_allowed = !(stage.index == 1 && layer == input_side);
            let rare = stats.freq[layer].get(e).is_some_and(|&f| f < th);
            if new || (old_allowed && rare) {
                mask.extend(model.expert_params(layer, e));
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule() {
        let s = build_stage_schedule(6, 30).unwrap();
        let pairs: Vec<_> = s.stages.iter().map(|st| st.layers).collect();
        assert_eq!(pairs, vec![(0, 5), (1, 4), (2, 3)]);
        assert!(s.stages.iter().all(|st| st.epochs.len() == 10));
        assert_eq!(s.stages[2].epochs, 20..30);
    }

    #[test]
    fn schedule_edge_cases() {
        let s = build_stage_schedule(2, 7).unwrap();
        assert_eq!(s.stages.len(), 1);
        assert_eq!(s.stages[0].epochs, 0..7);
        assert!(build_stage_schedule(4, 15).is_err());
        assert!(build_stage_schedule(3, 30).is_err());
        assert!(build_stage_schedule(4, 0).is_err());
    }

    #[test]
    fn every_layer_unfrozen_exactly_once() {
        for n in [2, 4, 6, 8] {
            let s = build_stage_schedule(n, n * 3).unwrap();
            let mut seen = vec![0; n];
            for st in &s.stages {
                seen[st.layers.0] += 1;
                seen[st.layers.1] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1));
            let total: usize = s.stages.iter().map(|st| st.epochs.len()).sum();
            assert_eq!(total, n * 3);
        }
    }
}
