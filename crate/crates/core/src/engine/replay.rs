//! Generative replay: pseudo-trajectories of previously learned cities drawn
//! from a frozen teacher, conditioned on the time slots of new-city data.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{City, StartDistribution, Token, Trajectory};
use crate::error::{Error, Result};
use crate::model::MoEModel;
use crate::rng::{rng_for, Rng};
use crate::tensor::{softmax, top_k_indices, Mat};

/// Frozen previous-round model with the cities it knows.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    pub model: Arc<MoEModel>,
    pub cities: Vec<City>,
    pub starts: BTreeMap<u32, StartDistribution>,
    /// Parameter fingerprint taken at construction.
    pub fingerprint: String,
}

impl TeacherSnapshot {
    pub fn new(model: MoEModel, cities: Vec<City>, starts: BTreeMap<u32, StartDistribution>) -> Self {
        let fingerprint = model.params.fingerprint();
        TeacherSnapshot {
            model: Arc::new(model),
            cities,
            starts,
            fingerprint,
        }
    }

    pub fn city(&self, id: u32) -> Result<&City> {
        self.cities.iter().find(|c| c.city_id == id).ok_or(Error::UnknownCity(id))
    }

    pub fn city_ids(&self) -> Vec<u32> {
        self.cities.iter().map(|c| c.city_id).collect()
    }

    pub fn start(&self, id: u32) -> Result<&StartDistribution> {
        self.starts
            .get(&id)
            .ok_or_else(|| Error::Data(format!("teacher has no start distribution for city {id}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    /// Pseudo-trajectories per previous city, as a fraction of the new data.
    pub alpha: f64,
    /// Sampling temperature; values at or below 1e-6 decode greedily.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            alpha: 0.2,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Draws from `softmax(logits / temperature)`; argmax when the temperature
/// is at most 1e-6.
pub fn sample_with_temperature(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature <= 1e-6 {
        return top_k_indices(logits, 1)[0];
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let p = softmax(&scaled);
    WeightedIndex::new(&p).expect("softmax is a distribution").sample(rng)
}

/// Generates one pseudo-trajectory of `city_id` with the template's length
/// and time slots.
pub fn generate_pseudo_trajectory(
    teacher: &TeacherSnapshot,
    city_id: u32,
    template: &Trajectory,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let city = teacher.city(city_id)?;
    let start = teacher.start(city_id)?;
    if template.is_empty() {
        return Err(Error::Empty("template trajectory"));
    }
    let loc = start.sample(template.len(), rng)?;
    let mut traj = Trajectory::new(city_id, vec![Token::new(loc, template.tokens[0].slot)]);
    for tok in &template.tokens[1..] {
        let logits = teacher.model.next_logits(&[&traj], &[city])?.pop().expect("one trajectory");
        let next = sample_with_temperature(logits.row(logits.rows - 1), temperature, rng);
        traj.tokens.push(Token::new(next, tok.slot));
    }
    Ok(traj)
}

/// Generates one pseudo-trajectory per template, template `i` using `rngs[i]`.
/// Equivalent to calling [`generate_pseudo_trajectory`] per template, but
/// decodes each chunk of templates in lock-step batches.
pub fn generate_batch(
    teacher: &TeacherSnapshot,
    city_id: u32,
    templates: &[&Trajectory],
    temperature: f64,
    rngs: Vec<Rng>,
) -> Result<Vec<Trajectory>> {
    assert_eq!(templates.len(), rngs.len());
    let city = teacher.city(city_id)?;
    let start = teacher.start(city_id)?;
    let jobs: Vec<(usize, Rng)> = rngs.into_iter().enumerate().collect();
    let chunks: Vec<Vec<(usize, Rng)>> = jobs.chunks(64).map(|c| c.to_vec()).collect();
    let done: Vec<Vec<(usize, Trajectory)>> = chunks
        .into_par_iter()
        .map(|mut chunk| -> Result<Vec<(usize, Trajectory)>> {
            let mut out: Vec<Trajectory> = Vec::with_capacity(chunk.len());
            for (i, rng) in chunk.iter_mut() {
                let tpl = templates[*i];
                if tpl.is_empty() {
                    return Err(Error::Empty("template trajectory"));
                }
                let loc = start.sample(tpl.len(), rng)?;
                out.push(Trajectory::new(city_id, vec![Token::new(loc, tpl.tokens[0].slot)]));
            }
            let max_len = chunk.iter().map(|(i, _)| templates[*i].len()).max().unwrap_or(0);
            for step in 1..max_len {
                let active: Vec<usize> = (0..chunk.len()).filter(|&j| templates[chunk[j].0].len() > step).collect();
                let refs: Vec<&Trajectory> = active.iter().map(|&j| &out[j]).collect();
                let logits = teacher.model.next_logits(&refs, &[city])?;
                for (&j, l) in active.iter().zip(logits) {
                    let next = sample_with_temperature(l.row(l.rows - 1), temperature, &mut chunk[j].1);
                    let slot = templates[chunk[j].0].tokens[step].slot;
                    out[j].tokens.push(Token::new(next, slot));
                }
            }
            Ok(chunk.iter().map(|(i, _)| *i).zip(out).collect())
        })
        .collect::<Result<_>>()?;
    let mut flat: Vec<(usize, Trajectory)> = done.into_iter().flatten().collect();
    flat.sort_by_key(|(i, _)| *i);
    Ok(flat.into_iter().map(|(_, t)| t).collect())
}

/// Pseudo-trajectories per previous city for `n_new` new trajectories.
pub fn replay_count(alpha: f64, n_new: usize) -> usize {
    // the tolerance absorbs representation error, e.g. 0.07 * 100
    (alpha * n_new as f64 - 1e-9).ceil().max(0.0) as usize
}

/// One training record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub traj: Trajectory,
    pub pseudo: bool,
    /// Teacher next-location distributions for positions `0..len-1` of a
    /// pseudo record.
    pub teacher: Option<Mat>,
    /// Index into the new-city data of the template a pseudo record copied
    /// its length and time slots from.
    pub template: Option<usize>,
}

impl Record {
    pub fn real(traj: Trajectory) -> Self {
        Record {
            traj,
            pseudo: false,
            teacher: None,
            template: None,
        }
    }

    pub fn source_city(&self) -> u32 {
        self.traj.city_id
    }
}

/// Templates for `n` pseudo-trajectories: a seeded permutation of the new
/// data, cycled when `n` exceeds it.
fn pick_templates(x_new: &[Trajectory], n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x_new.len()).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        order.shuffle(rng);
        out.extend(order.iter().take(n - out.len()));
    }
    out
}

/// Teacher distributions of `traj` at every prediction position.
pub fn teacher_distributions(teacher: &TeacherSnapshot, trajs: &[&Trajectory]) -> Result<Vec<Mat>> {
    let mut out = Vec::with_capacity(trajs.len());
    for chunk in trajs.chunks(32) {
        let cities: Vec<&City> = teacher.cities.iter().collect();
        for (t, logits) in chunk.iter().zip(teacher.model.next_logits(chunk, &cities)?) {
            let rows = t.len() - 1;
            let mut p = Mat::zeros(rows, logits.cols);
            for r in 0..rows {
                p.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// New data plus `replay_count(alpha, |x_new|)` pseudo-trajectories for each
/// teacher city, pseudo records carrying teacher distributions.
pub fn build_replay_set(teacher: Option<&TeacherSnapshot>, x_new: &[Trajectory], cfg: &ReplayConfig) -> Result<Vec<Record>> {
    if cfg.alpha < 0.0 || !cfg.alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be >= 0, got {}", cfg.alpha)));
    }
    let mut records: Vec<Record> = x_new.iter().cloned().map(Record::real).collect();
    let Some(teacher) = teacher else { return Ok(records) };
    let n = replay_count(cfg.alpha, x_new.len());
    if n == 0 || x_new.is_empty() {
        return Ok(records);
    }
    for city in teacher.city_ids() {
        let mut rng = rng_for(cfg.seed, &format!("templates-{city}"), 0);
        let picks = pick_templates(x_new, n, &mut rng);
        let templates: Vec<&Trajectory> = picks.iter().map(|&i| &x_new[i]).collect();
        let rngs = (0..n).map(|i| rng_for(cfg.seed, &format!("replay-{city}"), i as u64)).collect();
        let pseudo = generate_batch(teacher, city, &templates, cfg.temperature, rngs)?;
        let refs: Vec<&Trajectory> = pseudo.iter().collect();
        let dists = teacher_distributions(teacher, &refs)?;
        records.extend(pseudo.into_iter().zip(dists).zip(picks).map(|((traj, d), i)| Record {
            traj,
            pseudo: true,
            teacher: Some(d),
            template: Some(i),
        }));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_arithmetic() {
        assert_eq!(replay_count(0.2, 1000), 200);
        assert_eq!(replay_count(0.07, 100), 7);
        assert_eq!(replay_count(0.05, 30), 2);
        assert_eq!(replay_count(0.0, 1000), 0);
    }

    #[test]
    fn templates_cycle_without_repeats_per_pass() {
        let data: Vec<Trajectory> = (0..5).map(|i| Trajectory::new(0, vec![Token::new(i, 0)])).collect();
        let picks = pick_templates(&data, 12, &mut crate::rng::seeded(1));
        assert_eq!(picks.len(), 12);
        for pass in picks.chunks(5).filter(|c| c.len() == 5) {
            let mut p = pass.to_vec();
            p.sort();
            assert_eq!(p, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn zero_temperature_is_argmax() {
        let mut rng = crate::rng::seeded(0);
        assert_eq!(sample_with_temperature(&[0.1, 3.0, 2.9], 0.0, &mut rng), 1);
    }
}
