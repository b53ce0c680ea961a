use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Meters spanned by one degree of latitude on the sphere above.
pub fn meters_per_degree() -> f64 {
    EARTH_RADIUS_M * std::f64::consts::PI / 180.0
}

/// Great-circle distance in meters.
pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Uniform square grid anchored at its south-west corner. Cell ids are
/// row-major with rows growing northwards and columns eastwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cell_size_m: f64,
    /// South-west corner `(lat, lon)` in degrees.
    pub origin: (f64, f64),
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(origin: (f64, f64), rows: usize, cols: usize, cell_size_m: f64) -> Result<Self> {
        let g = GridSpec {
            cell_size_m,
            origin,
            rows,
            cols,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid needs at least one row and column".into()));
        }
        if !(self.cell_size_m > 0.0) {
            return Err(Error::Config("grid cell size must be positive".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    fn dlat(&self) -> f64 {
        self.cell_size_m / meters_per_degree()
    }

    fn dlon(&self) -> f64 {
        self.cell_size_m / (meters_per_degree() * self.origin.0.to_radians().cos())
    }

    /// Maps a point to its row-major cell id.
    pub fn discretize(&self, lat: f64, lon: f64) -> Result<usize> {
        let r = ((lat - self.origin.0) / self.dlat()).floor();
        let c = ((lon - self.origin.1) / self.dlon()).floor();
        if !r.is_finite() || !c.is_finite() || r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return Err(Error::OutOfBounds { lat, lon });
        }
        Ok(r as usize * self.cols + c as usize)
    }

    /// Centroid `(lat, lon)` of a cell.
    pub fn centroid(&self, cell: usize) -> (f64, f64) {
        let (r, c) = (cell / self.cols, cell % self.cols);
        (
            self.origin.0 + (r as f64 + 0.5) * self.dlat(),
            self.origin.1 + (c as f64 + 0.5) * self.dlon(),
        )
    }

    /// Cell centroid normalized to `[0, 1]^2` within the grid bounds.
    pub fn normalized(&self, cell: usize) -> (f64, f64) {
        let (r, c) = (cell / self.cols, cell % self.cols);
        ((r as f64 + 0.5) / self.rows as f64, (c as f64 + 0.5) / self.cols as f64)
    }
}

/// Free function form of [`GridSpec::discretize`].
pub fn discretize_point(lat: f64, lon: f64, grid: &GridSpec) -> Result<usize> {
    grid.discretize(lat, lon)
}

/// Fixed-length time slots. Tokens carry a slot-of-week index
/// `day_of_week * slots_per_day + slot_of_day`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSpec {
    pub slot_minutes: u32,
}

impl Default for TimeSpec {
    fn default() -> Self {
        TimeSpec { slot_minutes: 30 }
    }
}

impl TimeSpec {
    pub fn new(slot_minutes: u32) -> Result<Self> {
        if slot_minutes == 0 || 1440 % slot_minutes != 0 {
            return Err(Error::Config(format!("slot length {slot_minutes} min does not divide a day")));
        }
        Ok(TimeSpec { slot_minutes })
    }

    pub fn slots_per_day(&self) -> u32 {
        1440 / self.slot_minutes
    }

    pub fn slots_per_week(&self) -> u32 {
        7 * self.slots_per_day()
    }

    /// Minutes elapsed from slot `a` to slot `b`, wrapping at the week end.
    pub fn elapsed_minutes(&self, a: u32, b: u32) -> f64 {
        let w = self.slots_per_week();
        let gap = (b + w - a % w) % w;
        (gap * self.slot_minutes) as f64
    }
}
