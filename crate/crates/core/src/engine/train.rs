//! Base training and continual rounds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, Adam};
use super::replay::{build_replay_set, Record, ReplayConfig, TeacherSnapshot};
use super::schedule::{build_stage_schedule, collect_activation_stats, select_trainable_params, ActivationStats, StageSchedule};
use crate::autograd::{Tape, Var};
use crate::data::{City, StartDistribution, Trajectory};
use crate::error::{Error, Result};
use crate::model::{ExpertInit, MoEModel, RoundRecord, RouterInit};
use crate::params::{ParamId, ParamMask};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The rate halves every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Distillation weight.
    pub lambda: f64,
    pub clip_norm: Option<f64>,
    /// Router row given to experts appended in a continual round.
    pub new_expert_router: RouterInit,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper_base() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1.2e-5,
            decay_every: 10,
            decay_factor: 0.5,
            lambda: 1.0,
            clip_norm: Some(5.0),
            new_expert_router: RouterInit::CopyOffset(-1.0),
            seed: 0,
        }
    }

    pub fn paper_continual() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1.2e-4,
            ..Self::paper_base()
        }
    }

    pub fn desk_base() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 16,
            lr: 3e-3,
            decay_every: 4,
            ..Self::paper_base()
        }
    }

    pub fn desk_continual() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 16,
            lr: 1e-2,
            decay_every: 4,
            ..Self::paper_base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("epochs, batch_size and decay_every must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.decay_factor > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("lr and decay_factor must be positive, lambda >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate of 0-based epoch `e`.
    pub fn lr_at(&self, e: usize) -> f64 {
        self.lr * self.decay_factor.powi((e / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
    pub steps: usize,
}

/// Loss terms of one batch and the tape node of their weighted total.
struct BatchLoss {
    total: Var,
    ce: f64,
    kd: f64,
}

fn batch_loss(t: &mut Tape, model: &MoEModel, records: &[&Record], cities: &[&City], lambda: f64, dropout_seed: Option<u64>) -> Result<Option<BatchLoss>> {
    let trajs: Vec<&Trajectory> = records.iter().map(|r| &r.traj).collect();
    let b = model.prepare_batch(&trajs, cities)?;
    let mut drng = dropout_seed.map(crate::rng::seeded);
    let out = model.forward_tape(t, &b, cities, drng.as_mut())?;
    let scores = model.scores_tape(t, &out, &b);
    // row -> (record, position)
    let mut owner = vec![(0usize, 0usize); b.rows];
    for (i, &(start, len)) in b.segments.iter().enumerate() {
        for p in 0..len {
            owner[start + p] = (i, p);
        }
    }
    let mut ce_terms = Vec::new();
    let mut kd_terms = Vec::new();
    let (mut n_ce, mut n_kd) = (0usize, 0usize);
    for (rows, logits) in &scores {
        let mut ce_rows = Vec::new();
        let mut targets = Vec::new();
        let mut kd_rows = Vec::new();
        let mut teacher_rows: Vec<f64> = Vec::new();
        for (local, &r) in rows.iter().enumerate() {
            let (i, p) = owner[r];
            let rec = records[i];
            if p + 1 >= rec.traj.len() {
                continue;
            }
            if rec.pseudo {
                let tm = rec.teacher.as_ref().expect("pseudo records carry teacher distributions");
                kd_rows.push(local);
                teacher_rows.extend_from_slice(tm.row(p));
            } else {
                ce_rows.push(local);
                targets.push(rec.traj.tokens[p + 1].loc);
            }
        }
        if !ce_rows.is_empty() {
            let l = t.gather_rows(*logits, &ce_rows);
            ce_terms.push((t.cross_entropy(l, &targets), ce_rows.len()));
            n_ce += ce_rows.len();
        }
        if !kd_rows.is_empty() && lambda > 0.0 {
            let l = t.gather_rows(*logits, &kd_rows);
            let cols = t.value(l).cols;
            let teacher = Mat::from_vec(kd_rows.len(), cols, teacher_rows);
            kd_terms.push((t.kd_loss(l, teacher, super::loss::KD_FLOOR), kd_rows.len()));
            n_kd += kd_rows.len();
        }
    }
    if n_ce + n_kd == 0 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    let (mut ce, mut kd) = (0.0, 0.0);
    for &(v, n) in &ce_terms {
        let w = n as f64 / n_ce as f64;
        ce += w * t.value(v).item();
        terms.push((v, w));
    }
    for &(v, n) in &kd_terms {
        let w = n as f64 / n_kd as f64;
        kd += w * t.value(v).item();
        terms.push((v, lambda * w));
    }
    Ok(Some(BatchLoss {
        total: t.weighted_sum(&terms),
        ce,
        kd,
    }))
}

/// Real and pseudo records are shuffled separately and spread evenly over
/// the batches.
fn stratified_batches(records: &[Record], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = rng_for(seed, "shuffle", epoch as u64);
    let mut real: Vec<usize> = (0..records.len()).filter(|&i| !records[i].pseudo).collect();
    let mut pseudo: Vec<usize> = (0..records.len()).filter(|&i| records[i].pseudo).collect();
    real.shuffle(&mut rng);
    pseudo.shuffle(&mut rng);
    let n = records.len().div_ceil(batch_size).max(1);
    (0..n)
        .map(|b| {
            let mut batch: Vec<usize> = real[b * real.len() / n..(b + 1) * real.len() / n].to_vec();
            batch.extend_from_slice(&pseudo[b * pseudo.len() / n..(b + 1) * pseudo.len() / n]);
            batch
        })
        .filter(|b| !b.is_empty())
        .collect()
}

/// Trains the parameters in `mask` over `epochs` (0-based epoch numbers
/// drive the learning-rate schedule and shuffling).
pub fn train_with_mask(
    model: &mut MoEModel,
    records: &[Record],
    cities: &[&City],
    mask: &ParamMask,
    cfg: &TrainConfig,
    epochs: std::ops::Range<usize>,
    opt: &mut Adam,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut logs = Vec::new();
    for epoch in epochs {
        let lr = cfg.lr_at(epoch);
        let (mut sum, mut sum_ce, mut sum_kd, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for (step, batch) in stratified_batches(records, cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let recs: Vec<&Record> = batch.iter().map(|&i| &records[i]).collect();
            let dropout_seed = (model.config.dropout > 0.0).then(|| derive_seed(cfg.seed, &format!("dropout-{epoch}"), step as u64));
            let mut grads: Vec<(ParamId, Mat)>;
            {
                let mut t = Tape::with_trainable(&model.params, mask);
                let Some(loss) = batch_loss(&mut t, model, &recs, cities, cfg.lambda, dropout_seed)? else { continue };
                let value = t.value(loss.total).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: value });
                }
                sum += value;
                sum_ce += loss.ce;
                sum_kd += loss.kd;
                steps += 1;
                let g = t.backward(loss.total);
                grads = g.params().into_iter().map(|(id, m)| (id, m.clone())).collect();
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            let refs: Vec<(ParamId, &Mat)> = grads.iter().map(|(id, m)| (*id, m)).collect();
            opt.step(&mut model.params, &refs, lr);
        }
        let d = steps.max(1) as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            loss: sum / d,
            ce: sum_ce / d,
            kd: sum_kd / d,
            steps,
        });
    }
    Ok(logs)
}

/// Objective `CE + lambda * KD` of one batch and its gradient with respect
/// to the parameters in `mask`.
pub fn batch_objective(model: &MoEModel, records: &[&Record], cities: &[&City], lambda: f64, mask: &ParamMask) -> Result<(f64, Vec<(ParamId, Mat)>)> {
    let mut t = Tape::with_trainable(&model.params, mask);
    let Some(loss) = batch_loss(&mut t, model, records, cities, lambda, None)? else {
        return Err(Error::Empty("prediction positions"));
    };
    let value = t.value(loss.total).item();
    let g = t.backward(loss.total);
    Ok((value, g.params().into_iter().map(|(id, m)| (id, m.clone())).collect()))
}

/// Mean next-location cross-entropy of `data` (no parameter updates).
pub fn mean_loss(model: &MoEModel, data: &[Trajectory], cities: &[&City]) -> Result<f64> {
    let records: Vec<Record> = data.iter().cloned().map(Record::real).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in records.chunks(32) {
        let refs: Vec<&Record> = chunk.iter().collect();
        let mut t = Tape::frozen(&model.params);
        if let Some(l) = batch_loss(&mut t, model, &refs, cities, 0.0, None)? {
            let positions: usize = chunk.iter().map(|r| r.traj.len() - 1).sum();
            sum += l.ce * positions as f64;
            n += positions;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Trains every parameter on next-location cross-entropy over `train`,
/// registering all cities first.
pub fn base_train(model: &mut MoEModel, cities: &[&City], train: &[Trajectory], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if cities.is_empty() || train.is_empty() {
        return Err(Error::Empty("base training data"));
    }
    for c in cities {
        model.register_city(c.city_id);
    }
    let parent = model.lineage.last().map(|r| r.fingerprint.clone());
    let records: Vec<Record> = train.iter().cloned().map(Record::real).collect();
    let mask = ParamMask::all(&model.params);
    let logs = train_with_mask(model, &records, cities, &mask, cfg, 0..cfg.epochs, &mut Adam::new())?;
    let round = model.lineage.len();
    model.lineage.push(RoundRecord {
        round,
        kind: "base".into(),
        cities: cities.iter().map(|c| c.city_id).collect(),
        seed: cfg.seed,
        parent_fingerprint: parent,
        fingerprint: model.params.fingerprint(),
    });
    Ok(logs)
}

/// Continual-round variants.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Replay, distillation and staged adaptation.
    Gcl,
    /// New-city data only, every expert and router trainable.
    FullTune,
    /// As `FullTune`, with one new expert per layer.
    ExpertTune,
    /// The full pipeline with the distillation weight at zero.
    WithoutKd,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Gcl => "gcl",
            Variant::FullTune => "full-tune",
            Variant::ExpertTune => "expert-tune",
            Variant::WithoutKd => "without-kd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub layers: (usize, usize),
    pub epochs: std::ops::Range<usize>,
    pub trainable: Vec<String>,
}

/// Everything needed to replay a continual round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundManifest {
    pub variant: Variant,
    pub teacher_fingerprint: String,
    pub student_fingerprint: String,
    pub new_city: u32,
    pub previous_cities: Vec<u32>,
    pub replay: ReplayConfig,
    pub train: TrainConfig,
    pub pseudo_per_city: BTreeMap<u32, usize>,
    pub real_records: usize,
    pub schedule: Option<StageSchedule>,
    pub activation: Option<ActivationStats>,
    pub stages: Vec<StageRecord>,
    pub epochs: Vec<EpochLog>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

pub struct RoundOutput {
    pub model: MoEModel,
    pub manifest: RoundManifest,
}

/// One continual round on `new_city`. The teacher is left untouched; the
/// student starts from the teacher's parameters.
pub fn continual_update(
    teacher: &TeacherSnapshot,
    new_city: &City,
    x_new: &[Trajectory],
    replay: &ReplayConfig,
    train: &TrainConfig,
    variant: Variant,
) -> Result<RoundOutput> {
    train.validate()?;
    if x_new.is_empty() {
        return Err(Error::Empty("new-city data"));
    }
    if teacher.city_ids().contains(&new_city.city_id) {
        return Err(Error::Config(format!("city {} is already known to the teacher", new_city.city_id)));
    }
    let mut student = (*teacher.model).clone();
    student.register_city(new_city.city_id);
    let mut cities: Vec<&City> = teacher.cities.iter().collect();
    cities.push(new_city);
    let old_experts = student.expert_counts().to_vec();

    let mut manifest = RoundManifest {
        variant,
        teacher_fingerprint: teacher.fingerprint.clone(),
        student_fingerprint: String::new(),
        new_city: new_city.city_id,
        previous_cities: teacher.city_ids(),
        replay: replay.clone(),
        train: train.clone(),
        pseudo_per_city: BTreeMap::new(),
        real_records: x_new.len(),
        schedule: None,
        activation: None,
        stages: Vec::new(),
        epochs: Vec::new(),
        metrics: BTreeMap::new(),
    };
    let mut opt = Adam::new();

    match variant {
        Variant::FullTune | Variant::ExpertTune => {
            if variant == Variant::ExpertTune {
                let records: Vec<Record> = x_new.iter().cloned().map(Record::real).collect();
                let refs: Vec<&Trajectory> = records.iter().map(|r| &r.traj).collect();
                let stats = collect_activation_stats(&student, &refs, &cities)?;
                student.add_expert(&ExpertInit {
                    router: train.new_expert_router,
                    ..ExpertInit::most_active(&stats.freq, derive_seed(train.seed, "expert-init", 0))
                })?;
            }
            let mut mask = ParamMask::none();
            for layer in 0..student.config.n_layers {
                mask.extend(student.router_params(layer));
                for e in 0..student.expert_counts()[layer] {
                    mask.extend(student.expert_params(layer, e));
                }
            }
            let records: Vec<Record> = x_new.iter().cloned().map(Record::real).collect();
            manifest.stages.push(StageRecord {
                index: 1,
                layers: (0, student.config.n_layers - 1),
                epochs: 0..train.epochs,
                trainable: mask.iter().map(|id| student.params.name(id).to_string()).collect(),
            });
            manifest.epochs = train_with_mask(&mut student, &records, &cities, &mask, train, 0..train.epochs, &mut opt)?;
        }
        Variant::Gcl | Variant::WithoutKd => {
            let mut cfg = train.clone();
            if variant == Variant::WithoutKd {
                cfg.lambda = 0.0;
                manifest.train.lambda = 0.0;
            }
            let records = build_replay_set(Some(teacher), x_new, replay)?;
            for r in records.iter().filter(|r| r.pseudo) {
                *manifest.pseudo_per_city.entry(r.source_city()).or_default() += 1;
            }
            let schedule = build_stage_schedule(student.config.n_layers, cfg.epochs)?;
            let refs: Vec<&Trajectory> = records.iter().map(|r| &r.traj).collect();
            let pre = collect_activation_stats(&student, &refs, &cities)?;
            student.add_expert(&ExpertInit {
                router: cfg.new_expert_router,
                ..ExpertInit::most_active(&pre.freq, derive_seed(cfg.seed, "expert-init", 0))
            })?;
            let stats = collect_activation_stats(&student, &refs, &cities)?;
            for stage in &schedule.stages {
                let mask = select_trainable_params(stage, &student, &stats, &old_experts, None);
                manifest.stages.push(StageRecord {
                    index: stage.index,
                    layers: stage.layers,
                    epochs: stage.epochs.clone(),
                    trainable: mask.iter().map(|id| student.params.name(id).to_string()).collect(),
                });
                let logs = train_with_mask(&mut student, &records, &cities, &mask, &cfg, stage.epochs.clone(), &mut opt)?;
                manifest.epochs.extend(logs);
            }
            manifest.schedule = Some(schedule);
            manifest.activation = Some(stats);
        }
    }
    let fingerprint = student.params.fingerprint();
    let round = student.lineage.len();
    student.lineage.push(RoundRecord {
        round,
        kind: format!("continual-{}", variant.name()),
        cities: vec![new_city.city_id],
        seed: train.seed,
        parent_fingerprint: Some(teacher.fingerprint.clone()),
        fingerprint: fingerprint.clone(),
    });
    manifest.student_fingerprint = fingerprint;
    Ok(RoundOutput { model: student, manifest })
}

/// Teacher for the next round: the student plus the new city and its start
/// distribution.
pub fn next_teacher(previous: &TeacherSnapshot, out: &RoundOutput, new_city: &City, x_new: &[Trajectory]) -> Result<TeacherSnapshot> {
    let mut cities = previous.cities.clone();
    cities.push(new_city.clone());
    let mut starts = previous.starts.clone();
    starts.insert(new_city.city_id, StartDistribution::fit(x_new)?);
    Ok(TeacherSnapshot::new(out.model.clone(), cities, starts))
}
