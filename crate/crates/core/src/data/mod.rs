//! Cities, trajectories, mobility descriptors and synthetic data.

pub mod city;
pub mod descriptor;
pub mod grid;
pub mod io;
pub mod split;
pub mod start;
pub mod synth;
pub mod trajectory;

pub use city::{City, Location, LocationFeature};
pub use descriptor::{compute_mobility_descriptor, prefix_buckets, MobilityDescriptor, Quantizer};
pub use grid::{discretize_point, haversine_m, GridSpec, TimeSpec};
pub use io::{load_city, load_trajectories, read_json, save_city, save_trajectories, write_json, CityData, SplitManifest};
pub use split::{split_dataset, DatasetSplit};
pub use start::{fit_start_distribution, sample_start_location, Categorical, StartDistribution};
pub use synth::{generate_synthetic_city, GroundTruth, SynthParams, SyntheticCity};
pub use trajectory::{Token, Trajectory};
