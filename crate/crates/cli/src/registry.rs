//! Cities under a data root: `<root>/cities/<id>/split.json` plus the files
//! it names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mobgcl::data::{CityData, SplitManifest, StartDistribution};
use mobgcl::engine::TeacherSnapshot;
use mobgcl::model::{load_checkpoint, MoEModel};

use crate::error::{CliError, CliResult};

pub const SPLIT_FILE: &str = "split.json";

pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn new(root: &Path) -> Self {
        Registry { root: root.to_path_buf() }
    }

    pub fn city_dir(&self, id: u32) -> PathBuf {
        self.root.join("cities").join(id.to_string())
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    /// Ids of every city with a split manifest, ascending.
    pub fn registered(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = std::fs::read_dir(self.root.join("cities"))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str()?.parse().ok())
            .filter(|&id| self.city_dir(id).join(SPLIT_FILE).is_file())
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn require(&self, id: u32) -> CliResult<PathBuf> {
        let p = self.city_dir(id).join(SPLIT_FILE);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::Data(format!(
                "city {id} is not registered under {} (registered: {:?})",
                self.root.display(),
                self.registered()
            )))
        }
    }

    pub fn load(&self, id: u32) -> CliResult<CityData> {
        let (_, data) = SplitManifest::load(&self.require(id)?)?;
        if data.city.city_id != id {
            return Err(CliError::Data(format!("{} holds city {}, expected {id}", self.city_dir(id).display(), data.city.city_id)));
        }
        Ok(data)
    }

    pub fn load_many(&self, ids: &[u32]) -> CliResult<Vec<CityData>> {
        ids.iter().map(|&id| self.load(id)).collect()
    }

    /// Wraps a model as a teacher over its registered cities, with start
    /// distributions fitted on each city's train split.
    pub fn teacher(&self, model: MoEModel) -> CliResult<TeacherSnapshot> {
        let data = self.load_many(model.cities())?;
        let mut starts = BTreeMap::new();
        for d in &data {
            starts.insert(d.city.city_id, StartDistribution::fit(&d.train)?);
        }
        Ok(TeacherSnapshot::new(model, data.into_iter().map(|d| d.city).collect(), starts))
    }

    pub fn load_teacher(&self, checkpoint: &Path) -> CliResult<TeacherSnapshot> {
        self.teacher(load_checkpoint(checkpoint)?)
    }
}
