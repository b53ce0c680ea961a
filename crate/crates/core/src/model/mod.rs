//! The continual-learning network and its checkpoint format.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, ParamEntry, FORMAT_VERSION};
pub use config::ModelConfig;
pub use network::{route_from_logits, Batch, ExpertInit, ForwardOut, MoEModel, RoundRecord, RouterInit, RoutingDecision, RoutingTrace};
