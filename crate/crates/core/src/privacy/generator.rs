//! Conditional trajectory generators the audits run against.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::data::{Token, Trajectory};
use crate::engine::{generate_batch, TeacherSnapshot};
use crate::error::Result;
use crate::rng::seeded;

/// Produces one trajectory per template with the template's length and time
/// slots; output `i` depends only on `templates[i]` and `seeds[i]`.
pub trait TrajectoryGenerator: Sync {
    fn generate(&self, templates: &[&Trajectory], seeds: &[u64]) -> Result<Vec<Trajectory>>;
}

/// Samples from a trained model the same way replay does: the start from the
/// city's start distribution, then autoregressively.
pub struct ModelGenerator<'a> {
    pub snapshot: &'a TeacherSnapshot,
    pub temperature: f64,
}

impl TrajectoryGenerator for ModelGenerator<'_> {
    fn generate(&self, templates: &[&Trajectory], seeds: &[u64]) -> Result<Vec<Trajectory>> {
        assert_eq!(templates.len(), seeds.len());
        let mut by_city: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, t) in templates.iter().enumerate() {
            by_city.entry(t.city_id).or_default().push(i);
        }
        let mut out: Vec<Option<Trajectory>> = vec![None; templates.len()];
        for (city, idx) in by_city {
            let tpls: Vec<&Trajectory> = idx.iter().map(|&i| templates[i]).collect();
            let rngs = idx.iter().map(|&i| seeded(seeds[i])).collect();
            for (i, t) in idx.into_iter().zip(generate_batch(self.snapshot, city, &tpls, self.temperature, rngs)?) {
                out[i] = Some(t);
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every template generated")).collect())
    }
}

/// Returns a remembered trajectory whenever the template's time slots match
/// one, and uniformly random locations otherwise.
pub struct MemorizingGenerator {
    pub memory: Vec<Trajectory>,
    pub n_locations: usize,
}

impl TrajectoryGenerator for MemorizingGenerator {
    fn generate(&self, templates: &[&Trajectory], seeds: &[u64]) -> Result<Vec<Trajectory>> {
        Ok(templates
            .iter()
            .zip(seeds)
            .map(|(t, &s)| {
                let slots: Vec<u32> = t.slots().collect();
                if let Some(m) = self.memory.iter().find(|m| m.city_id == t.city_id && m.slots().eq(slots.iter().copied())) {
                    return m.clone();
                }
                let mut rng = seeded(s);
                let tokens = slots.iter().map(|&slot| Token::new(rng.gen_range(0..self.n_locations), slot)).collect();
                Trajectory::new(t.city_id, tokens)
            })
            .collect())
    }
}

/// Emits trajectories of a fixed length regardless of the template.
pub struct FixedLengthGenerator {
    pub len: usize,
}

impl TrajectoryGenerator for FixedLengthGenerator {
    fn generate(&self, templates: &[&Trajectory], _seeds: &[u64]) -> Result<Vec<Trajectory>> {
        Ok(templates
            .iter()
            .map(|t| Trajectory::new(t.city_id, (0..self.len).map(|i| Token::new(0, i as u32)).collect()))
            .collect())
    }
}
