//! File formats: city JSON, newline-delimited trajectory JSON, split manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::city::City;
use super::trajectory::Trajectory;
use crate::error::{Error, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::json(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))
}

pub fn save_city(path: &Path, city: &City) -> Result<()> {
    write_json(path, city)
}

pub fn load_city(path: &Path) -> Result<City> {
    let city: City = read_json(path)?;
    city.validate()?;
    Ok(city)
}

pub fn save_trajectories(path: &Path, data: &[Trajectory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in data {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

/// Points at one city's files. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub city: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub seed: u64,
    pub fractions: [f64; 3],
}

/// A city with its loaded splits.
#[derive(Clone, Debug, PartialEq)]
pub struct CityData {
    pub city: City,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<(SplitManifest, CityData)> {
        let manifest: SplitManifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let city = load_city(&resolve(&manifest.city))?;
        let load = |p: &Path| -> Result<Vec<Trajectory>> {
            let data = load_trajectories(&resolve(p))?;
            for t in &data {
                city.check_trajectory(t)?;
            }
            Ok(data)
        };
        let data = CityData {
            train: load(&manifest.train)?,
            val: load(&manifest.val)?,
            test: load(&manifest.test)?,
            city: city.clone(),
        };
        Ok((manifest, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_city, SynthParams};

    #[test]
    fn trajectory_lines_use_pair_tokens() {
        let t = Trajectory {
            city_id: 2,
            user_id: Some(7),
            tokens: vec![(4, 10).into(), (5, 12).into()],
        };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"city_id":2,"user_id":7,"tokens":[[4,10],[5,12]]}"#);
        let back: Trajectory = serde_json::from_str(r#"{"city_id":2,"tokens":[[4,10],[5,12]]}"#).unwrap();
        assert_eq!(back.user_id, None);
        assert_eq!(back.tokens, t.tokens);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic_city(1, &SynthParams::new(0, 12, 20)).unwrap();
        let cp = dir.path().join("city.json");
        let tp = dir.path().join("t.jsonl");
        save_city(&cp, &s.city).unwrap();
        save_trajectories(&tp, &s.trajectories).unwrap();
        assert_eq!(load_city(&cp).unwrap(), s.city);
        assert_eq!(load_trajectories(&tp).unwrap(), s.trajectories);
    }
}
