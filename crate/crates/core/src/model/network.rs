//! The mixture-of-experts transformer: location and mobility encoders, MoE
//! blocks with mobility-aware routing and the cross/deep similarity decoder.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autograd::{Tape, Var};
use crate::data::{compute_mobility_descriptor, prefix_buckets, City, LocationFeature, MobilityDescriptor, Quantizer, Trajectory};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_seed, rng_for, seeded, Rng};
use crate::tensor::{softmax, top_k_indices, Mat};

#[derive(Copy, Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Linear {
            w: lookup(store, &format!("{name}.w"))?,
            b: lookup(store, &format!("{name}.b"))?,
        })
    }

    fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

#[derive(Copy, Clone, Debug)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Norm {
            g: lookup(store, &format!("{name}.g"))?,
            b: lookup(store, &format!("{name}.b"))?,
        })
    }

    fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.g);
        let b = t.param(self.b);
        t.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ExpertIds {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub router_w: ParamId,
    pub router_b: ParamId,
    pub experts: Vec<ExpertIds>,
}

#[derive(Clone, Debug)]
pub(crate) struct SeqEncoderIds {
    pub input: Linear,
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub out: ParamId,
    pub up: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Ids {
    pub loc_poi: Linear,
    pub loc_latlon: Linear,
    pub loc_heat: Linear,
    pub loc_mlp1: Linear,
    pub loc_mlp2: Linear,
    pub time_emb: ParamId,
    pub time_proj: ParamId,
    pub jump: SeqEncoderIds,
    pub wait: SeqEncoderIds,
    pub rgyr_emb: ParamId,
    pub entropy_emb: ParamId,
    pub city_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_ln: Norm,
    pub cross: Vec<Linear>,
    pub deep1: Linear,
    pub deep2: Linear,
    pub proj: Linear,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::CheckpointMismatch {
        field: name.to_string(),
        expected: "present".into(),
        found: "missing".into(),
    })
}

pub(crate) fn expert_prefix(layer: usize, e: usize) -> String {
    format!("layer.{layer}.expert.{e}")
}

impl Ids {
    pub(crate) fn resolve(store: &ParamStore, config: &ModelConfig, experts: &[usize]) -> Result<Self> {
        let seq = |name: &str| -> Result<SeqEncoderIds> {
            Ok(SeqEncoderIds {
                input: Linear::lookup(store, &format!("{name}.in"))?,
                q: lookup(store, &format!("{name}.q"))?,
                k: lookup(store, &format!("{name}.k"))?,
                v: lookup(store, &format!("{name}.v"))?,
                out: lookup(store, &format!("{name}.out"))?,
                up: Linear::lookup(store, &format!("{name}.up"))?,
            })
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for (i, &n_exp) in experts.iter().enumerate() {
            let p = format!("layer.{i}");
            layers.push(LayerIds {
                ln1: Norm::lookup(store, &format!("{p}.ln1"))?,
                q: Linear::lookup(store, &format!("{p}.attn.q"))?,
                k: Linear::lookup(store, &format!("{p}.attn.k"))?,
                v: Linear::lookup(store, &format!("{p}.attn.v"))?,
                o: Linear::lookup(store, &format!("{p}.attn.o"))?,
                ln2: Norm::lookup(store, &format!("{p}.ln2"))?,
                router_w: lookup(store, &format!("{p}.router.w"))?,
                router_b: lookup(store, &format!("{p}.router.b"))?,
                experts: (0..n_exp)
                    .map(|e| {
                        let ep = expert_prefix(i, e);
                        Ok(ExpertIds {
                            up: Linear::lookup(store, &format!("{ep}.up"))?,
                            down: Linear::lookup(store, &format!("{ep}.down"))?,
                        })
                    })
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Ids {
            loc_poi: Linear::lookup(store, "loc.poi")?,
            loc_latlon: Linear::lookup(store, "loc.latlon")?,
            loc_heat: Linear::lookup(store, "loc.heat")?,
            loc_mlp1: Linear::lookup(store, "loc.mlp1")?,
            loc_mlp2: Linear::lookup(store, "loc.mlp2")?,
            time_emb: lookup(store, "time.emb")?,
            time_proj: lookup(store, "time.proj")?,
            jump: seq("mob.jump")?,
            wait: seq("mob.wait")?,
            rgyr_emb: lookup(store, "mob.rgyr.emb")?,
            entropy_emb: lookup(store, "mob.entropy.emb")?,
            city_emb: lookup(store, "mob.city.emb")?,
            layers,
            final_ln: Norm::lookup(store, "final.ln")?,
            cross: (0..config.cross_layers)
                .map(|i| Linear::lookup(store, &format!("dcn.cross.{i}")))
                .collect::<Result<_>>()?,
            deep1: Linear::lookup(store, "dcn.deep1")?,
            deep2: Linear::lookup(store, "dcn.deep2")?,
            proj: Linear::lookup(store, "dcn.proj")?,
        })
    }
}

fn normal_mat(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Mat {
    let mut rng = rng_for(seed, name, 0);
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let m = normal_mat(self.seed, name, rows, cols, 1.0 / (rows as f64).sqrt());
        self.store.add(name, m)
    }

    fn table(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let m = normal_mat(self.seed, name, rows, cols, 1.0 / (cols as f64).sqrt());
        self.store.add(name, m)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.weight(&format!("{name}.w"), fan_in, fan_out);
        self.store.add(format!("{name}.b"), Mat::zeros(1, fan_out));
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.store.add(format!("{name}.g"), Mat::filled(1, dim, 1.0));
        self.store.add(format!("{name}.b"), Mat::zeros(1, dim));
    }

    fn seq_encoder(&mut self, name: &str, hidden: usize, out: usize) {
        self.linear(&format!("{name}.in"), 1, hidden);
        for p in ["q", "k", "v", "out"] {
            self.weight(&format!("{name}.{p}"), hidden, hidden);
        }
        self.linear(&format!("{name}.up"), hidden, out);
    }

    fn expert(&mut self, prefix: &str, c: &ModelConfig) {
        self.linear(&format!("{prefix}.up"), c.hidden_dim, c.expert_hidden);
        self.linear(&format!("{prefix}.down"), c.expert_hidden, c.hidden_dim);
    }
}

/// Experts selected for one token and their gate weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Top-`k` softmax over router logits; ties go to the lowest expert index.
pub fn route_from_logits(logits: &[f64], k: usize) -> Result<RoutingDecision> {
    if k == 0 {
        return Err(Error::Config("routing top-K must be positive".into()));
    }
    if k > logits.len() {
        return Err(Error::Config(format!("top-K {k} exceeds {} experts", logits.len())));
    }
    let experts = top_k_indices(logits, k);
    let sel: Vec<f64> = experts.iter().map(|&e| logits[e]).collect();
    Ok(RoutingDecision {
        weights: softmax(&sel),
        experts,
    })
}

/// Per layer, per token routing decisions of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace {
    pub layers: Vec<Vec<RoutingDecision>>,
}

/// Audit record of one training round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub kind: String,
    pub cities: Vec<u32>,
    pub seed: u64,
    pub parent_fingerprint: Option<String>,
    pub fingerprint: String,
}

/// Policy for the expert appended to each layer by [`MoEModel::add_expert`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertInit {
    /// Per layer, the existing expert to copy.
    pub copy_from: Vec<usize>,
    pub noise_std: f64,
    pub router: RouterInit,
    pub seed: u64,
}

/// Initial router row of an appended expert.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RouterInit {
    /// Zero weights and the given bias.
    Bias(f64),
    /// The copied expert's row, its bias shifted by the given offset.
    CopyOffset(f64),
}

impl ExpertInit {
    /// Copies the most frequently selected expert of each layer (lowest index
    /// on ties).
    pub fn most_active(freq: &[Vec<f64>], seed: u64) -> Self {
        ExpertInit {
            copy_from: freq.iter().map(|f| top_k_indices(f, 1)[0]).collect(),
            noise_std: 1e-3,
            router: RouterInit::Bias(-10.0),
            seed,
        }
    }
}

/// Inputs of one forward pass over a batch of trajectories, stacked row-wise.
pub struct Batch {
    pub rows: usize,
    /// `(first row, length)` of each trajectory.
    pub segments: Vec<(usize, usize)>,
    /// Distinct cities in order of first appearance.
    pub cities: Vec<u32>,
    /// For each trajectory, its index into `cities`.
    pub traj_city: Vec<usize>,
    loc_offsets: Vec<usize>,
    loc_rows: Vec<usize>,
    slots: Vec<usize>,
    jump_km: Mat,
    wait_h: Mat,
    rgyr: Vec<usize>,
    entropy: Vec<usize>,
    city_rows: Vec<usize>,
    ranges: Vec<(usize, usize)>,
    pool: Mat,
}

impl Batch {
    /// Row indices of the batch belonging to batch city `c`.
    pub fn rows_of_city(&self, c: usize) -> Vec<usize> {
        self.segments
            .iter()
            .zip(&self.traj_city)
            .filter(|(_, &tc)| tc == c)
            .flat_map(|(&(s, l), _)| s..s + l)
            .collect()
    }
}

/// Tape handles produced by [`MoEModel::forward_tape`].
pub struct ForwardOut {
    /// Final hidden state `P` of every row.
    pub hidden: Var,
    /// Location embeddings of each batch city.
    pub loc_tables: Vec<Var>,
    pub trace: RoutingTrace,
}

#[derive(Clone, Debug)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub quantizer: Quantizer,
    pub lineage: Vec<RoundRecord>,
    experts: Vec<usize>,
    cities: Vec<u32>,
    pub(crate) ids: Ids,
}

pub(crate) fn find_city<'c>(cities: &[&'c City], id: u32) -> Result<&'c City> {
    cities.iter().copied().find(|c| c.city_id == id).ok_or(Error::UnknownCity(id))
}

impl MoEModel {
    pub fn new(config: ModelConfig, quantizer: Quantizer) -> Result<Self> {
        config.validate()?;
        if quantizer.bins != config.quant_bins {
            return Err(Error::Config(format!(
                "quantizer has {} bins, model expects {}",
                quantizer.bins, config.quant_bins
            )));
        }
        let mut params = ParamStore::new();
        let c = &config;
        let mut init = Init {
            store: &mut params,
            seed: c.init_seed,
        };
        init.linear("loc.poi", c.poi_features, c.poi_dim);
        init.linear("loc.latlon", 2, c.latlon_dim);
        init.linear("loc.heat", c.heat_features, c.heat_dim);
        init.linear("loc.mlp1", c.location_concat_dim(), c.hidden_dim);
        init.linear("loc.mlp2", c.hidden_dim, c.hidden_dim);
        init.table("time.emb", c.time_slots, c.temporal_dim);
        init.weight("time.proj", c.temporal_dim, c.hidden_dim);
        init.seq_encoder("mob.jump", c.mobility_attn_hidden, c.jump_dim);
        init.seq_encoder("mob.wait", c.mobility_attn_hidden, c.wait_dim);
        init.table("mob.rgyr.emb", c.quant_bins, c.rgyr_dim);
        init.table("mob.entropy.emb", c.quant_bins, c.entropy_dim);
        init.store.add("mob.city.emb", Mat::zeros(0, c.city_dim));
        for i in 0..c.n_layers {
            let p = format!("layer.{i}");
            init.norm(&format!("{p}.ln1"), c.hidden_dim);
            for w in ["q", "k", "v", "o"] {
                init.linear(&format!("{p}.attn.{w}"), c.hidden_dim, c.hidden_dim);
            }
            init.norm(&format!("{p}.ln2"), c.hidden_dim);
            let router = normal_mat(
                c.init_seed,
                &format!("{p}.router.w"),
                c.initial_experts,
                c.router_input_dim(),
                1.0 / (c.router_input_dim() as f64).sqrt(),
            );
            init.store.add(format!("{p}.router.w"), router);
            init.store.add(format!("{p}.router.b"), Mat::zeros(1, c.initial_experts));
            for e in 0..c.initial_experts {
                init.expert(&expert_prefix(i, e), c);
            }
        }
        init.norm("final.ln", c.hidden_dim);
        for i in 0..c.cross_layers {
            init.linear(&format!("dcn.cross.{i}"), c.hidden_dim, c.hidden_dim);
        }
        init.linear("dcn.deep1", c.hidden_dim, c.hidden_dim);
        init.linear("dcn.deep2", c.hidden_dim, c.hidden_dim);
        init.linear("dcn.proj", 2 * c.hidden_dim, c.hidden_dim);
        let experts = vec![c.initial_experts; c.n_layers];
        let ids = Ids::resolve(&params, &config, &experts)?;
        Ok(MoEModel {
            config,
            params,
            quantizer,
            lineage: Vec::new(),
            experts,
            cities: Vec::new(),
            ids,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        quantizer: Quantizer,
        experts: Vec<usize>,
        cities: Vec<u32>,
        lineage: Vec<RoundRecord>,
    ) -> Result<Self> {
        let ids = Ids::resolve(&params, &config, &experts)?;
        Ok(MoEModel {
            config,
            params,
            quantizer,
            lineage,
            experts,
            cities,
            ids,
        })
    }

    /// Experts per layer.
    pub fn expert_counts(&self) -> &[usize] {
        &self.experts
    }

    /// City ids in registration order.
    pub fn cities(&self) -> &[u32] {
        &self.cities
    }

    pub fn city_index(&self, city_id: u32) -> Result<usize> {
        self.cities.iter().position(|&c| c == city_id).ok_or(Error::UnknownCity(city_id))
    }

    /// Adds a city-embedding row for `city_id` if the city is new.
    pub fn register_city(&mut self, city_id: u32) -> usize {
        if let Ok(i) = self.city_index(city_id) {
            return i;
        }
        let dim = self.config.city_dim;
        let row = normal_mat(
            derive_seed(self.config.init_seed, "mob.city.emb", city_id as u64),
            "row",
            1,
            dim,
            1.0 / (dim as f64).sqrt(),
        );
        let table = self.params.get_mut(self.ids.city_emb);
        table.data.extend_from_slice(&row.data);
        table.rows += 1;
        self.cities.push(city_id);
        self.cities.len() - 1
    }

    pub(crate) fn layer_ids(&self, layer: usize) -> &LayerIds {
        &self.ids.layers[layer]
    }

    /// Parameter ids of expert `e` in `layer`.
    pub fn expert_params(&self, layer: usize, e: usize) -> Vec<ParamId> {
        let x = &self.ids.layers[layer].experts[e];
        vec![x.up.w, x.up.b, x.down.w, x.down.b]
    }

    /// Router weight and bias of `layer`.
    pub fn router_params(&self, layer: usize) -> [ParamId; 2] {
        let l = &self.ids.layers[layer];
        [l.router_w, l.router_b]
    }

    /// Parameters of the mobility-feature encoder.
    pub fn mobility_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with("mob."))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Appends one expert to every layer. Existing parameters are untouched.
    pub fn add_expert(&mut self, init: &ExpertInit) -> Result<()> {
        if init.copy_from.len() != self.config.n_layers {
            return Err(Error::Config(format!(
                "expert init names {} layers, model has {}",
                init.copy_from.len(),
                self.config.n_layers
            )));
        }
        for layer in 0..self.config.n_layers {
            let src = init.copy_from[layer];
            let n = self.experts[layer];
            if src >= n {
                return Err(Error::Config(format!("layer {layer} has no expert {src}")));
            }
            let new_prefix = expert_prefix(layer, n);
            let src_ids = self.ids.layers[layer].experts[src].clone();
            let mut rng = rng_for(init.seed, &new_prefix, 0);
            let noise = Normal::new(0.0, init.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
            let mut copy = |store: &mut ParamStore, from: ParamId, name: String| {
                let mut m = store.get(from).clone();
                if init.noise_std > 0.0 {
                    m.data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                }
                store.add(name, m)
            };
            let up_w = copy(&mut self.params, src_ids.up.w, format!("{new_prefix}.up.w"));
            let up_b = copy(&mut self.params, src_ids.up.b, format!("{new_prefix}.up.b"));
            let down_w = copy(&mut self.params, src_ids.down.w, format!("{new_prefix}.down.w"));
            let down_b = copy(&mut self.params, src_ids.down.b, format!("{new_prefix}.down.b"));
            let l = &mut self.ids.layers[layer];
            l.experts.push(ExpertIds {
                up: Linear { w: up_w, b: up_b },
                down: Linear { w: down_w, b: down_b },
            });
            let (rw, rb) = (l.router_w, l.router_b);
            let (row, bias) = match init.router {
                RouterInit::Bias(b) => (vec![0.0; self.params.get(rw).cols], b),
                RouterInit::CopyOffset(off) => (self.params.get(rw).row(src).to_vec(), self.params.get(rb).data[src] + off),
            };
            let w = self.params.get_mut(rw);
            w.data.extend(row);
            w.rows += 1;
            let b = self.params.get_mut(rb);
            b.data.push(bias);
            b.cols += 1;
            self.experts[layer] += 1;
        }
        Ok(())
    }

    fn check_features(&self, feats: &[&LocationFeature]) -> Result<()> {
        for f in feats {
            f.validate()?;
            if f.poi.len() != self.config.poi_features || f.heat.len() != self.config.heat_features {
                return Err(Error::Data(format!(
                    "location feature widths poi {} heat {}, model expects {} and {}",
                    f.poi.len(),
                    f.heat.len(),
                    self.config.poi_features,
                    self.config.heat_features
                )));
            }
        }
        Ok(())
    }

    fn location_inputs(&self, feats: &[&LocationFeature]) -> Result<[Mat; 3]> {
        self.check_features(feats)?;
        let n = feats.len();
        let poi = Mat::from_vec(n, self.config.poi_features, feats.iter().flat_map(|f| f.poi.iter().copied()).collect());
        let ll = Mat::from_vec(n, 2, feats.iter().flat_map(|f| f.latlon_norm).collect());
        let heat = Mat::from_vec(n, self.config.heat_features, feats.iter().flat_map(|f| f.heat.iter().copied()).collect());
        Ok([poi, ll, heat])
    }

    /// `phi_poi ++ phi_latlon ++ phi_heat` before the shared MLP.
    fn location_concat_tape(&self, t: &mut Tape, inputs: [Mat; 3]) -> Var {
        let [poi, ll, heat] = inputs;
        let (poi, ll, heat) = (t.constant(poi), t.constant(ll), t.constant(heat));
        let a = self.ids.loc_poi.apply(t, poi);
        let a = t.gelu(a);
        let b = self.ids.loc_latlon.apply(t, ll);
        let b = t.gelu(b);
        let c = self.ids.loc_heat.apply(t, heat);
        let c = t.gelu(c);
        t.concat_cols(&[a, b, c])
    }

    fn location_tape(&self, t: &mut Tape, inputs: [Mat; 3]) -> Var {
        let z = self.location_concat_tape(t, inputs);
        let h = self.ids.loc_mlp1.apply(t, z);
        let h = t.gelu(h);
        self.ids.loc_mlp2.apply(t, h)
    }

    /// Pre-MLP feature concatenation of one location (width
    /// `poi_dim + latlon_dim + heat_dim`).
    pub fn location_concat(&self, feat: &LocationFeature) -> Result<Vec<f64>> {
        let inputs = self.location_inputs(&[feat])?;
        let mut t = Tape::frozen(&self.params);
        let v = self.location_concat_tape(&mut t, inputs);
        Ok(t.value(v).data.clone())
    }

    /// Embedding of one location, width `hidden_dim`.
    pub fn encode_location(&self, feat: &LocationFeature) -> Result<Vec<f64>> {
        Ok(self.encode_locations(&[feat])?.data)
    }

    /// Embeddings of many locations, one row each.
    pub fn encode_locations(&self, feats: &[&LocationFeature]) -> Result<Mat> {
        let inputs = self.location_inputs(feats)?;
        let mut t = Tape::frozen(&self.params);
        let v = self.location_tape(&mut t, inputs);
        Ok(t.value(v).clone())
    }

    /// Location embedding matrix of a whole city.
    pub fn city_location_embeddings(&self, city: &City) -> Result<Mat> {
        let feats: Vec<&LocationFeature> = city.locations.iter().map(|l| &l.feature).collect();
        self.encode_locations(&feats)
    }

    fn seq_encoder_tape(&self, t: &mut Tape, ids: &SeqEncoderIds, x: Mat, b: &Batch) -> Var {
        let x = t.constant(x);
        let u = ids.input.apply(t, x);
        let (wq, wk, wv, wo) = (t.param(ids.q), t.param(ids.k), t.param(ids.v), t.param(ids.out));
        let q = t.matmul(u, wq);
        let k = t.matmul(u, wk);
        let v = t.matmul(u, wv);
        let s = t.matmul_nt(q, k);
        let s = t.scale(s, 1.0 / (self.config.mobility_attn_hidden as f64).sqrt());
        let a = t.softmax_ranges(s, b.ranges.clone());
        let ctx = t.matmul(a, v);
        let ctx = t.matmul(ctx, wo);
        let y = t.add(u, ctx);
        let pool = t.constant(b.pool.clone());
        let pooled = t.matmul(pool, y);
        let up = ids.up.apply(t, pooled);
        t.gelu(up)
    }

    /// Mobility descriptor vectors `z_m`; row `r` encodes the trajectory
    /// prefix ending at row `r`.
    fn mobility_tape(&self, t: &mut Tape, b: &Batch) -> Var {
        let jump = self.seq_encoder_tape(t, &self.ids.jump, b.jump_km.clone(), b);
        let wait = self.seq_encoder_tape(t, &self.ids.wait, b.wait_h.clone(), b);
        let rg = t.param(self.ids.rgyr_emb);
        let rg = t.gather_rows(rg, &b.rgyr);
        let en = t.param(self.ids.entropy_emb);
        let en = t.gather_rows(en, &b.entropy);
        let ct = t.param(self.ids.city_emb);
        let ct = t.gather_rows(ct, &b.city_rows);
        t.concat_cols(&[jump, wait, rg, en, ct])
    }

    /// Builds the stacked inputs of a batch. Every trajectory must belong to
    /// one of `cities` and that city must be registered.
    pub fn prepare_batch(&self, trajs: &[&Trajectory], cities: &[&City]) -> Result<Batch> {
        let rows: usize = trajs.iter().map(|t| t.len()).sum();
        let mut b = Batch {
            rows,
            segments: Vec::with_capacity(trajs.len()),
            cities: Vec::new(),
            traj_city: Vec::with_capacity(trajs.len()),
            loc_offsets: Vec::new(),
            loc_rows: Vec::with_capacity(rows),
            slots: Vec::with_capacity(rows),
            jump_km: Mat::zeros(rows, 1),
            wait_h: Mat::zeros(rows, 1),
            rgyr: Vec::with_capacity(rows),
            entropy: Vec::with_capacity(rows),
            city_rows: Vec::with_capacity(rows),
            ranges: Vec::with_capacity(rows),
            pool: Mat::zeros(rows, rows),
        };
        let mut next_offset = 0;
        let mut start = 0;
        for traj in trajs {
            if traj.is_empty() {
                return Err(Error::Empty("trajectory"));
            }
            let city = find_city(cities, traj.city_id)?;
            let ci = match b.cities.iter().position(|&c| c == traj.city_id) {
                Some(i) => i,
                None => {
                    b.cities.push(traj.city_id);
                    b.loc_offsets.push(next_offset);
                    next_offset += city.n_locations();
                    b.cities.len() - 1
                }
            };
            let emb_row = self.city_index(traj.city_id)?;
            let desc = compute_mobility_descriptor(traj, city, &self.quantizer)?;
            let (rg, en) = prefix_buckets(traj, city, &self.quantizer);
            for (i, tok) in traj.tokens.iter().enumerate() {
                let r = start + i;
                if tok.slot as usize >= self.config.time_slots {
                    return Err(Error::BucketOutOfRange {
                        table: "time",
                        index: tok.slot as usize,
                        size: self.config.time_slots,
                    });
                }
                b.loc_rows.push(b.loc_offsets[ci] + tok.loc);
                b.slots.push(tok.slot as usize);
                b.jump_km.data[r] = desc.jump_dist[i] / 1000.0;
                b.wait_h.data[r] = desc.wait_time[i] / 60.0;
                b.city_rows.push(emb_row);
                b.ranges.push((start, r + 1));
                for s in start..=r {
                    *b.pool.at_mut(r, s) = 1.0 / (i + 1) as f64;
                }
            }
            b.rgyr.extend(rg);
            b.entropy.extend(en);
            b.segments.push((start, traj.len()));
            b.traj_city.push(ci);
            start += traj.len();
        }
        Ok(b)
    }

    fn dropout(&self, t: &mut Tape, x: Var, rng: &mut Option<&mut Rng>) -> Var {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let (r, c) = t.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let mask = Mat::from_vec(r, c, (0..r * c).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect());
        let m = t.constant(mask);
        t.mul(x, m)
    }

    fn attention_tape(&self, t: &mut Tape, l: &LayerIds, x: Var, b: &Batch) -> Var {
        let h = self.config.hidden_dim;
        let nh = self.config.n_heads;
        let dh = h / nh;
        let q = l.q.apply(t, x);
        let k = l.k.apply(t, x);
        let v = l.v.apply(t, x);
        let mut heads = Vec::with_capacity(nh);
        for i in 0..nh {
            let qh = t.slice_cols(q, i * dh, dh);
            let kh = t.slice_cols(k, i * dh, dh);
            let vh = t.slice_cols(v, i * dh, dh);
            let s = t.matmul_nt(qh, kh);
            let s = t.scale(s, 1.0 / (dh as f64).sqrt());
            let a = t.softmax_ranges(s, b.ranges.clone());
            heads.push(t.matmul(a, vh));
        }
        let ctx = if nh == 1 { heads[0] } else { t.concat_cols(&heads) };
        l.o.apply(t, ctx)
    }

    fn expert_tape(&self, t: &mut Tape, e: &ExpertIds, x: Var) -> Var {
        let h = e.up.apply(t, x);
        let h = t.gelu(h);
        e.down.apply(t, h)
    }

    /// Router logits, gates and selected expert lists of one layer.
    fn router_tape(&self, t: &mut Tape, l: &LayerIds, z_m: Option<Var>, attn: Var) -> (Var, Vec<RoutingDecision>, Vec<Vec<usize>>) {
        let input = match z_m {
            Some(z) => t.concat_cols(&[z, attn]),
            None => attn,
        };
        let w = t.param(l.router_w);
        let bias = t.param(l.router_b);
        let logits = t.matmul_nt(input, w);
        let logits = t.add_row(logits, bias);
        let k = self.config.top_k;
        let gates = t.top_k_softmax(logits, k);
        let lv = t.value(logits);
        let gv = t.value(gates);
        let mut decisions = Vec::with_capacity(lv.rows);
        let mut by_expert = vec![Vec::new(); l.experts.len()];
        for r in 0..lv.rows {
            let sel = top_k_indices(lv.row(r), k);
            for &e in &sel {
                by_expert[e].push(r);
            }
            decisions.push(RoutingDecision {
                weights: sel.iter().map(|&e| gv.at(r, e)).collect(),
                experts: sel,
            });
        }
        (gates, decisions, by_expert)
    }

    /// Runs the encoder stack over a batch. Pass `rng` to enable dropout.
    pub fn forward_tape(&self, t: &mut Tape, b: &Batch, cities: &[&City], mut rng: Option<&mut Rng>) -> Result<ForwardOut> {
        let mut loc_tables = Vec::with_capacity(b.cities.len());
        for &cid in &b.cities {
            let city = find_city(cities, cid)?;
            let feats: Vec<&LocationFeature> = city.locations.iter().map(|l| &l.feature).collect();
            let inputs = self.location_inputs(&feats)?;
            loc_tables.push(self.location_tape(t, inputs));
        }
        let stacked = if loc_tables.len() == 1 { loc_tables[0] } else { t.concat_rows(&loc_tables) };
        let tok = t.gather_rows(stacked, &b.loc_rows);
        let temb = t.param(self.ids.time_emb);
        let temb = t.gather_rows(temb, &b.slots);
        let proj = t.param(self.ids.time_proj);
        let temb = t.matmul(temb, proj);
        let mut x = t.add(tok, temb);
        let z_m = self.config.mobility_routing.then(|| self.mobility_tape(t, b));
        let mut trace = RoutingTrace::default();
        for l in &self.ids.layers {
            let a = l.ln1.apply(t, x);
            let a = self.attention_tape(t, l, a, b);
            let a = self.dropout(t, a, &mut rng);
            x = t.add(x, a);
            let h = l.ln2.apply(t, x);
            let (gates, decisions, by_expert) = self.router_tape(t, l, z_m, h);
            let mut moe: Option<Var> = None;
            for (e, rows) in by_expert.iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let xin = t.gather_rows(h, rows);
                let y = self.expert_tape(t, &l.experts[e], xin);
                let g = t.select_col(gates, e);
                let g = t.gather_rows(g, rows);
                let y = t.scale_rows(y, g);
                let y = t.scatter_rows(y, rows, b.rows);
                moe = Some(match moe {
                    Some(acc) => t.add(acc, y),
                    None => y,
                });
            }
            let moe = moe.expect("every row selects an expert");
            let moe = self.dropout(t, moe, &mut rng);
            x = t.add(x, moe);
            trace.layers.push(decisions);
        }
        let hidden = self.ids.final_ln.apply(t, x);
        Ok(ForwardOut { hidden, loc_tables, trace })
    }

    /// Cross/deep decoder over a location embedding matrix; output width is
    /// `2 * hidden_dim`.
    fn dcn_tape(&self, t: &mut Tape, e_l: Var) -> Var {
        let mut c = e_l;
        for layer in &self.ids.cross {
            let lin = layer.apply(t, c);
            let prod = t.mul(e_l, lin);
            c = t.add(prod, c);
        }
        let d = self.ids.deep1.apply(t, e_l);
        let d = self.ids.deep2.apply(t, d);
        let d = t.gelu(d);
        t.concat_cols(&[c, d])
    }

    /// Candidate vectors compared against `P`: the decoder output projected
    /// back to `hidden_dim`.
    pub(crate) fn candidates_tape(&self, t: &mut Tape, e_l: Var) -> Var {
        let d = self.dcn_tape(t, e_l);
        self.ids.proj.apply(t, d)
    }

    pub fn dcn_encode(&self, e_l: &Mat) -> Result<Mat> {
        if e_l.rows == 0 {
            return Err(Error::Empty("candidate set"));
        }
        if e_l.cols != self.config.hidden_dim {
            return Err(Error::Data(format!("embedding width {} != hidden {}", e_l.cols, self.config.hidden_dim)));
        }
        let mut t = Tape::frozen(&self.params);
        let x = t.constant(e_l.clone());
        let v = self.dcn_tape(&mut t, x);
        Ok(t.value(v).clone())
    }

    /// Per batch city: the batch rows of that city and the `rows x n_locations`
    /// similarity scores.
    pub fn scores_tape(&self, t: &mut Tape, out: &ForwardOut, b: &Batch) -> Vec<(Vec<usize>, Var)> {
        (0..b.cities.len())
            .map(|c| {
                let rows = b.rows_of_city(c);
                let cand = self.candidates_tape(t, out.loc_tables[c]);
                let p = t.gather_rows(out.hidden, &rows);
                (rows, t.matmul_nt(p, cand))
            })
            .collect()
    }

    /// Final hidden state of every position and the routing trace.
    pub fn forward(&self, prefix: &Trajectory, city: &City) -> Result<(Mat, RoutingTrace)> {
        let b = self.prepare_batch(&[prefix], &[city])?;
        let mut t = Tape::frozen(&self.params);
        let out = self.forward_tape(&mut t, &b, &[city], None)?;
        Ok((t.value(out.hidden).clone(), out.trace))
    }

    /// Next-location logits after every prefix of every trajectory; entry `i`
    /// has one row per token of `trajs[i]`.
    pub fn next_logits(&self, trajs: &[&Trajectory], cities: &[&City]) -> Result<Vec<Mat>> {
        let b = self.prepare_batch(trajs, cities)?;
        let mut t = Tape::frozen(&self.params);
        let out = self.forward_tape(&mut t, &b, cities, None)?;
        let scores = self.scores_tape(&mut t, &out, &b);
        let mut result: Vec<Mat> = Vec::with_capacity(trajs.len());
        for (i, &(start, len)) in b.segments.iter().enumerate() {
            let (rows, s) = &scores[b.traj_city[i]];
            let sv = t.value(*s);
            let first = rows.iter().position(|&r| r == start).expect("row of its city");
            result.push(Mat::from_vec(len, sv.cols, sv.data[first * sv.cols..(first + len) * sv.cols].to_vec()));
        }
        Ok(result)
    }

    /// Probability of each location of `city` being the next visit.
    pub fn predict_next(&self, prefix: &Trajectory, city: &City) -> Result<Vec<f64>> {
        let logits = self.next_logits(&[prefix], &[city])?.pop().expect("one trajectory");
        Ok(softmax(logits.row(logits.rows - 1)))
    }

    /// Mobility descriptor vector of a whole trajectory.
    pub fn encode_mobility_features(&self, desc: &MobilityDescriptor) -> Result<Vec<f64>> {
        let n = desc.jump_dist.len();
        if n == 0 || desc.wait_time.len() != n {
            return Err(Error::Data("descriptor sequences must be non-empty and equally long".into()));
        }
        for (table, idx) in [("rgyr", desc.rgyr_bucket), ("entropy", desc.entropy_bucket)] {
            if idx >= self.config.quant_bins {
                return Err(Error::BucketOutOfRange {
                    table,
                    index: idx,
                    size: self.config.quant_bins,
                });
            }
        }
        if desc.jump_dist.iter().chain(&desc.wait_time).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mobility descriptor"));
        }
        let emb_row = self.city_index(desc.city_id)?;
        let mut pool = Mat::zeros(1, n);
        pool.data.fill(1.0 / n as f64);
        let b = Batch {
            rows: n,
            segments: vec![(0, n)],
            cities: vec![desc.city_id],
            traj_city: vec![0],
            loc_offsets: vec![0],
            loc_rows: Vec::new(),
            slots: Vec::new(),
            jump_km: Mat::from_vec(n, 1, desc.jump_dist.iter().map(|d| d / 1000.0).collect()),
            wait_h: Mat::from_vec(n, 1, desc.wait_time.iter().map(|w| w / 60.0).collect()),
            rgyr: vec![desc.rgyr_bucket],
            entropy: vec![desc.entropy_bucket],
            city_rows: vec![emb_row],
            ranges: (0..n).map(|r| (0, r + 1)).collect(),
            pool,
        };
        let mut t = Tape::frozen(&self.params);
        let v = self.mobility_tape(&mut t, &b);
        Ok(t.value(v).data.clone())
    }

    /// Router logits of `layer` for one token.
    pub fn router_logits(&self, layer: usize, z_m: &[f64], attn_out: &[f64]) -> Result<Vec<f64>> {
        let l = self.layer_ids(layer);
        let mut input = Vec::with_capacity(z_m.len() + attn_out.len());
        if self.config.mobility_routing {
            input.extend_from_slice(z_m);
        }
        input.extend_from_slice(attn_out);
        let w = self.params.get(l.router_w);
        if input.len() != w.cols {
            return Err(Error::Data(format!("router input width {} != {}", input.len(), w.cols)));
        }
        let b = self.params.get(l.router_b);
        Ok((0..w.rows)
            .map(|e| w.row(e).iter().zip(&input).map(|(a, x)| a * x).sum::<f64>() + b.data[e])
            .collect())
    }

    pub fn route(&self, layer: usize, z_m: &[f64], attn_out: &[f64], k: usize) -> Result<RoutingDecision> {
        route_from_logits(&self.router_logits(layer, z_m, attn_out)?, k)
    }

    /// One expert's feed-forward output for one token.
    pub fn expert_forward(&self, layer: usize, e: usize, x: &[f64]) -> Result<Vec<f64>> {
        let l = self.layer_ids(layer);
        let ex = l.experts.get(e).ok_or_else(|| Error::Config(format!("layer {layer} has no expert {e}")))?;
        let mut t = Tape::frozen(&self.params);
        let xv = t.constant(Mat::row_vector(x.to_vec()));
        let y = self.expert_tape(&mut t, ex, xv);
        Ok(t.value(y).data.clone())
    }

    /// Gate-weighted sum of the selected experts' outputs.
    pub fn moe_forward(&self, layer: usize, x: &[f64], decision: &RoutingDecision) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.config.hidden_dim];
        for (&e, &w) in decision.experts.iter().zip(&decision.weights) {
            let y = self.expert_forward(layer, e, x)?;
            out.iter_mut().zip(y).for_each(|(o, v)| *o += w * v);
        }
        Ok(out)
    }

    /// Draws a fresh dropout stream for one training step.
    pub fn dropout_rng(seed: u64, step: u64) -> Rng {
        seeded(derive_seed(seed, "dropout", step))
    }
}
