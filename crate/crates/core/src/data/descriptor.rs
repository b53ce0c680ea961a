//! Trajectory-level mobility descriptors: jump distances, waiting times,
//! radius of gyration and location entropy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::city::City;
use super::grid::haversine_m;
use super::trajectory::Trajectory;
use crate::error::{Error, Result};

/// Equal-width bucketing of radius of gyration and location entropy over
/// `[0, max]`, values above the range clipped into the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub bins: usize,
    pub rgyr_max_m: f64,
    pub entropy_max: f64,
}

impl Default for Quantizer {
    fn default() -> Self {
        Quantizer {
            bins: 16,
            rgyr_max_m: 5_000.0,
            entropy_max: 3.0,
        }
    }
}

impl Quantizer {
    /// Fits both ranges to the maxima observed in `data`.
    pub fn fit<'a>(bins: usize, data: impl IntoIterator<Item = (&'a Trajectory, &'a City)>) -> Self {
        let mut rg: f64 = 0.0;
        let mut h: f64 = 0.0;
        for (traj, city) in data {
            let (r, e) = raw_stats(traj, city);
            rg = rg.max(r);
            h = h.max(e);
        }
        Quantizer {
            bins,
            rgyr_max_m: if rg > 0.0 { rg } else { 1.0 },
            entropy_max: if h > 0.0 { h } else { 1.0 },
        }
    }

    fn bucket(&self, v: f64, max: f64) -> usize {
        if !(v > 0.0) {
            return 0;
        }
        ((v / max * self.bins as f64).floor() as usize).min(self.bins - 1)
    }

    pub fn rgyr_bucket(&self, r: f64) -> usize {
        self.bucket(r, self.rgyr_max_m)
    }

    pub fn entropy_bucket(&self, h: f64) -> usize {
        self.bucket(h, self.entropy_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobilityDescriptor {
    /// Meters between consecutive centroids; index 0 is 0.
    pub jump_dist: Vec<f64>,
    /// Minutes between consecutive slots; index 0 is 0.
    pub wait_time: Vec<f64>,
    pub rgyr_m: f64,
    pub entropy: f64,
    pub rgyr_bucket: usize,
    pub entropy_bucket: usize,
    pub city_id: u32,
}

/// Radius of gyration (meters) and visit-frequency entropy (nats) of the
/// trajectory's locations.
pub fn raw_stats(traj: &Trajectory, city: &City) -> (f64, f64) {
    let points: Vec<(f64, f64)> = traj.locations().map(|l| city.centroid(l)).collect();
    (radius_of_gyration(&points), location_entropy(traj.locations()))
}

pub fn radius_of_gyration(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mean = (
        points.iter().map(|p| p.0).sum::<f64>() / n,
        points.iter().map(|p| p.1).sum::<f64>() / n,
    );
    (points.iter().map(|&p| haversine_m(p, mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Shannon entropy (natural log) of the visit-frequency distribution.
pub fn location_entropy(locs: impl Iterator<Item = usize>) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut n = 0usize;
    for l in locs {
        *counts.entry(l).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let mut freqs: Vec<f64> = counts.values().map(|&c| c as f64 / n as f64).collect();
    // fixed summation order keeps the value bit-stable across runs
    freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    -freqs.iter().map(|p| p * p.ln()).sum::<f64>()
}

pub fn compute_mobility_descriptor(traj: &Trajectory, city: &City, q: &Quantizer) -> Result<MobilityDescriptor> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    city.check_trajectory(traj)?;
    let mut jump = Vec::with_capacity(traj.len());
    let mut wait = Vec::with_capacity(traj.len());
    for (i, tok) in traj.tokens.iter().enumerate() {
        if i == 0 {
            jump.push(0.0);
            wait.push(0.0);
        } else {
            let prev = traj.tokens[i - 1];
            jump.push(haversine_m(city.centroid(prev.loc), city.centroid(tok.loc)));
            wait.push(city.time.elapsed_minutes(prev.slot, tok.slot));
        }
    }
    let (rgyr, entropy) = raw_stats(traj, city);
    Ok(MobilityDescriptor {
        jump_dist: jump,
        wait_time: wait,
        rgyr_m: rgyr,
        entropy,
        rgyr_bucket: q.rgyr_bucket(rgyr),
        entropy_bucket: q.entropy_bucket(entropy),
        city_id: traj.city_id,
    })
}

/// Descriptor buckets of every prefix `tokens[..=t]`.
pub fn prefix_buckets(traj: &Trajectory, city: &City, q: &Quantizer) -> (Vec<usize>, Vec<usize>) {
    let mut rg = Vec::with_capacity(traj.len());
    let mut en = Vec::with_capacity(traj.len());
    let points: Vec<(f64, f64)> = traj.locations().map(|l| city.centroid(l)).collect();
    for t in 0..traj.len() {
        rg.push(q.rgyr_bucket(radius_of_gyration(&points[..=t])));
        en.push(q.entropy_bucket(location_entropy(traj.tokens[..=t].iter().map(|k| k.loc))));
    }
    (rg, en)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::city::{Location, LocationFeature};
    use crate::data::grid::{GridSpec, TimeSpec};
    use crate::data::trajectory::Token;

    fn line_city() -> City {
        let grid = GridSpec::new((40.0, -75.0), 1, 8, 500.0).unwrap();
        let locations = (0..8)
            .map(|c| Location {
                cell: c,
                feature: LocationFeature {
                    poi: vec![1.0],
                    latlon_norm: [0.5, (c as f64 + 0.5) / 8.0],
                    heat: vec![0.0],
                },
            })
            .collect();
        City {
            city_id: 3,
            name: "line".into(),
            grid,
            time: TimeSpec::default(),
            locations,
            od_heat: vec![0.0; 8],
        }
    }

    fn traj(locs: &[usize], slots: &[u32]) -> Trajectory {
        Trajectory::new(3, locs.iter().zip(slots).map(|(&l, &s)| Token::new(l, s)).collect())
    }

    #[test]
    fn stationary_trajectory_is_all_zero() {
        let city = line_city();
        let d = compute_mobility_descriptor(&traj(&[2, 2, 2, 2], &[0, 1, 2, 3]), &city, &Quantizer::default()).unwrap();
        assert!(d.jump_dist.iter().all(|&j| j == 0.0));
        assert_eq!((d.rgyr_bucket, d.entropy_bucket), (0, 0));
        assert_eq!(d.rgyr_m, 0.0);
        assert_eq!(d.entropy, 0.0);
    }

    #[test]
    fn neighbouring_cells_half_an_hour_apart() {
        let city = line_city();
        let d = compute_mobility_descriptor(&traj(&[0, 1], &[10, 11]), &city, &Quantizer::default()).unwrap();
        assert_eq!(d.jump_dist[0], 0.0);
        assert!((d.jump_dist[1] - 500.0).abs() < 0.5, "{}", d.jump_dist[1]);
        assert_eq!(d.wait_time, vec![0.0, 30.0]);
    }

    #[test]
    fn uniform_visits_have_log_k_entropy() {
        let city = line_city();
        for k in 1..=6usize {
            let locs: Vec<usize> = (0..k).chain(0..k).collect();
            let slots: Vec<u32> = (0..locs.len() as u32).collect();
            let (_, h) = raw_stats(&traj(&locs, &slots), &city);
            assert!((h - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_is_degenerate_not_an_error() {
        let city = line_city();
        let d = compute_mobility_descriptor(&traj(&[5], &[0]), &city, &Quantizer::default()).unwrap();
        assert_eq!((d.rgyr_m, d.entropy), (0.0, 0.0));
        assert_eq!(d.jump_dist, vec![0.0]);
    }

    #[test]
    fn buckets_clip_to_last_bin() {
        let q = Quantizer {
            bins: 16,
            rgyr_max_m: 100.0,
            entropy_max: 1.0,
        };
        assert_eq!(q.rgyr_bucket(99.9), 15);
        assert_eq!(q.rgyr_bucket(1e9), 15);
        assert_eq!(q.entropy_bucket(0.5), 8);
        assert_eq!(q.entropy_bucket(-1.0), 0);
    }

    #[test]
    fn prefix_buckets_end_with_full_descriptor() {
        let city = line_city();
        let t = traj(&[0, 3, 7, 1, 0], &[0, 2, 3, 5, 9]);
        let q = Quantizer {
            bins: 16,
            rgyr_max_m: 2000.0,
            entropy_max: 2.0,
        };
        let d = compute_mobility_descriptor(&t, &city, &q).unwrap();
        let (rg, en) = prefix_buckets(&t, &city, &q);
        assert_eq!(rg[0], 0);
        assert_eq!(*rg.last().unwrap(), d.rgyr_bucket);
        assert_eq!(*en.last().unwrap(), d.entropy_bucket);
    }

    #[test]
    fn unknown_location_is_rejected() {
        let city = line_city();
        assert!(matches!(
            compute_mobility_descriptor(&traj(&[0, 9], &[0, 1]), &city, &Quantizer::default()),
            Err(Error::UnknownLocation { .. })
        ));
    }
}
