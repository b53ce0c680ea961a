use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub temporal_dim: usize,
    pub n_heads: usize,
    /// Experts per layer at construction.
    pub initial_experts: usize,
    /// Experts selected per token.
    pub top_k: usize,
    /// Inner width of each expert feed-forward network.
    pub expert_hidden: usize,
    /// POI embedding width.
    pub poi_dim: usize,
    /// Heat embedding width.
    pub heat_dim: usize,
    /// Normalized lat-lon embedding width.
    pub latlon_dim: usize,
    /// Raw POI vector width.
    pub poi_features: usize,
    /// Raw heat vector width.
    pub heat_features: usize,
    pub jump_dim: usize,
    pub wait_dim: usize,
    pub rgyr_dim: usize,
    pub entropy_dim: usize,
    pub city_dim: usize,
    /// Hidden width of the jump / wait self-attention encoders.
    pub mobility_attn_hidden: usize,
    /// Rows of the radius-of-gyration and entropy tables.
    pub quant_bins: usize,
    /// Slot-of-week vocabulary size.
    pub time_slots: usize,
    /// Stacked cross layers in the decoder's cross branch.
    pub cross_layers: usize,
    pub dropout: f64,
    /// Feed the mobility descriptor vector to the routers. `false` routes on
    /// the attention output alone.
    pub mobility_routing: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-size settings.
    pub fn paper() -> Self {
        ModelConfig {
            n_layers: 6,
            hidden_dim: 512,
            temporal_dim: 48,
            n_heads: 4,
            initial_experts: 4,
            top_k: 2,
            expert_hidden: 2048,
            poi_dim: 256,
            heat_dim: 128,
            latlon_dim: 128,
            poi_features: 8,
            heat_features: 1,
            jump_dim: 128,
            wait_dim: 128,
            rgyr_dim: 64,
            entropy_dim: 64,
            city_dim: 32,
            mobility_attn_hidden: 64,
            quant_bins: 16,
            time_slots: 336,
            cross_layers: 2,
            dropout: 0.1,
            mobility_routing: true,
            init_seed: 0,
        }
    }

    /// CPU-sized preset used by tests and the desk experiments.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 2,
            hidden_dim: 64,
            temporal_dim: 16,
            n_heads: 4,
            initial_experts: 4,
            top_k: 2,
            expert_hidden: 64,
            poi_dim: 32,
            heat_dim: 16,
            latlon_dim: 16,
            poi_features: 8,
            heat_features: 1,
            jump_dim: 16,
            wait_dim: 16,
            rgyr_dim: 8,
            entropy_dim: 8,
            city_dim: 8,
            mobility_attn_hidden: 8,
            quant_bins: 16,
            time_slots: 336,
            cross_layers: 2,
            dropout: 0.0,
            mobility_routing: true,
            init_seed: 0,
        }
    }

    /// Minimal widths for unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            hidden_dim: 8,
            temporal_dim: 4,
            n_heads: 2,
            initial_experts: 3,
            top_k: 2,
            expert_hidden: 8,
            poi_dim: 4,
            heat_dim: 2,
            latlon_dim: 2,
            jump_dim: 4,
            wait_dim: 4,
            rgyr_dim: 2,
            entropy_dim: 2,
            city_dim: 2,
            mobility_attn_hidden: 4,
            dropout: 0.0,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" | "paper-scale" => Ok(Self::paper()),
            "desk" | "desk-scale" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    /// Width of the concatenated location features before the shared MLP.
    pub fn location_concat_dim(&self) -> usize {
        self.poi_dim + self.latlon_dim + self.heat_dim
    }

    /// Width of the mobility descriptor vector.
    pub fn mobility_dim(&self) -> usize {
        self.jump_dim + self.wait_dim + self.rgyr_dim + self.entropy_dim + self.city_dim
    }

    pub fn router_input_dim(&self) -> usize {
        if self.mobility_routing {
            self.mobility_dim() + self.hidden_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.hidden_dim,
            self.temporal_dim,
            self.n_heads,
            self.initial_experts,
            self.top_k,
            self.expert_hidden,
            self.poi_dim,
            self.heat_dim,
            self.latlon_dim,
            self.poi_features,
            self.heat_features,
            self.jump_dim,
            self.wait_dim,
            self.rgyr_dim,
            self.entropy_dim,
            self.city_dim,
            self.mobility_attn_hidden,
            self.quant_bins,
            self.time_slots,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.top_k > self.initial_experts {
            return Err(Error::Config(format!(
                "top_k {} exceeds the {} initial experts",
                self.top_k, self.initial_experts
            )));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config("hidden_dim must be divisible by n_heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Stable hash of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
