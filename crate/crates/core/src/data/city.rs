use serde::{Deserialize, Serialize};

use super::grid::{GridSpec, TimeSpec};
use super::trajectory::Trajectory;
use crate::error::{Error, Result};

/// Raw inputs of the location encoder for one location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationFeature {
    /// Point-of-interest category fractions.
    pub poi: Vec<f64>,
    /// Cell centroid normalized to the city bounds.
    pub latlon_norm: [f64; 2],
    /// Normalized visit heat.
    pub heat: Vec<f64>,
}

impl LocationFeature {
    pub fn validate(&self) -> Result<()> {
        if !self.poi.iter().chain(&self.heat).chain(&self.latlon_norm).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("location feature"));
        }
        if self.latlon_norm.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("latlon_norm {:?} outside [0,1]", self.latlon_norm)));
        }
        if self.poi.iter().chain(&self.heat).any(|&v| v < 0.0) {
            return Err(Error::Data("negative poi or heat value".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    /// Grid cell holding this location.
    pub cell: usize,
    pub feature: LocationFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub city_id: u32,
    pub name: String,
    pub grid: GridSpec,
    #[serde(default)]
    pub time: TimeSpec,
    pub locations: Vec<Location>,
    /// Raw per-location visit counts.
    pub od_heat: Vec<f64>,
}

impl City {
    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn centroid(&self, loc: usize) -> (f64, f64) {
        self.grid.centroid(self.locations[loc].cell)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.locations.is_empty() {
            return Err(Error::Empty("city locations"));
        }
        if self.od_heat.len() != self.locations.len() {
            return Err(Error::Data(format!(
                "city {}: {} heat values for {} locations",
                self.city_id,
                self.od_heat.len(),
                self.locations.len()
            )));
        }
        if self.od_heat.iter().any(|&h| !(h >= 0.0)) {
            return Err(Error::Data("od_heat must be nonnegative".into()));
        }
        let width = self.locations[0].feature.poi.len();
        for loc in &self.locations {
            if loc.cell >= self.grid.n_cells() {
                return Err(Error::Data(format!("cell {} outside grid", loc.cell)));
            }
            if loc.feature.poi.len() != width {
                return Err(Error::Data("inconsistent poi widths".into()));
            }
            loc.feature.validate()?;
        }
        Ok(())
    }

    /// Checks every token of `traj` against this city.
    pub fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        if traj.city_id != self.city_id {
            return Err(Error::Data(format!(
                "trajectory of city {} checked against city {}",
                traj.city_id, self.city_id
            )));
        }
        let week = self.time.slots_per_week();
        for t in &traj.tokens {
            if t.loc >= self.n_locations() {
                return Err(Error::UnknownLocation {
                    city: self.city_id,
                    id: t.loc,
                    count: self.n_locations(),
                });
            }
            if t.slot >= week {
                return Err(Error::Data(format!("time slot {} outside the week of {week}", t.slot)));
            }
        }
        Ok(())
    }

    /// Recomputes normalized heat features from `od_heat` as
    /// `ln(1 + count) / ln(1 + max count)`.
    pub fn refresh_heat_features(&mut self) {
        let max = self.od_heat.iter().cloned().fold(0.0, f64::max);
        let denom = (1.0 + max).ln().max(f64::MIN_POSITIVE);
        for (loc, &h) in self.locations.iter_mut().zip(&self.od_heat) {
            loc.feature.heat = vec![(1.0 + h).ln() / denom];
        }
    }
}
