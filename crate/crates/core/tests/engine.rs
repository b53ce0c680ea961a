use std::collections::BTreeMap;

use mobgcl::data::{generate_synthetic_city, City, Quantizer, StartDistribution, SynthParams, Trajectory};
use mobgcl::engine::*;
use mobgcl::eval::{acc_at_k, build_scenario, collect_predictions, markov_fit, ModelScorer, Popularity, ScenarioConfig};
use mobgcl::model::{MoEModel, ModelConfig};
use mobgcl::params::ParamMask;
use mobgcl::rng::{rng_for, seeded};

struct World {
    cities: Vec<City>,
    data: Vec<Vec<Trajectory>>,
}

fn world(n_cities: u32, n_traj: usize) -> World {
    let mut cities = Vec::new();
    let mut data = Vec::new();
    for c in 0..n_cities {
        let s = generate_synthetic_city(40 + c as u64, &SynthParams::new(c, 8, n_traj)).unwrap();
        cities.push(s.city);
        data.push(s.trajectories);
    }
    World { cities, data }
}

fn teacher(w: &World, config: ModelConfig, base: usize, epochs: usize) -> TeacherSnapshot {
    let train: Vec<Trajectory> = w.data[..base].concat();
    let q = Quantizer::fit(16, train.iter().map(|t| (t, &w.cities[t.city_id as usize])));
    let mut m = MoEModel::new(config, q).unwrap();
    let cities: Vec<&City> = w.cities[..base].iter().collect();
    if epochs > 0 {
        base_train(&mut m, &cities, &train, &TrainConfig { epochs, ..TrainConfig::desk_base() }).unwrap();
    } else {
        cities.iter().for_each(|c| {
            m.register_city(c.city_id);
        });
    }
    let starts: BTreeMap<u32, StartDistribution> = (0..base).map(|c| (c as u32, StartDistribution::fit(&w.data[c]).unwrap())).collect();
    TeacherSnapshot::new(m, w.cities[..base].to_vec(), starts)
}

#[test]
fn batched_generation_matches_single_generation() {
    let w = world(2, 20);
    let t = teacher(&w, ModelConfig::tiny(), 2, 0);
    let templates: Vec<&Trajectory> = w.data[1].iter().take(9).collect();
    for temp in [1.0, 0.0] {
        let rngs = (0..9).map(|i| rng_for(3, "g", i)).collect();
        let batch = generate_batch(&t, 0, &templates, temp, rngs).unwrap();
        for (i, tpl) in templates.iter().enumerate() {
            let single = generate_pseudo_trajectory(&t, 0, tpl, temp, &mut rng_for(3, "g", i as u64)).unwrap();
            assert_eq!(single, batch[i]);
            assert_eq!(single.len(), tpl.len());
            assert!(single.slots().eq(tpl.slots()));
        }
    }
}

#[test]
fn greedy_generation_is_an_argmax_rollout() {
    let w = world(1, 10);
    let t = teacher(&w, ModelConfig::tiny(), 1, 0);
    let tpl = &w.data[0][0];
    let g = generate_pseudo_trajectory(&t, 0, tpl, 0.0, &mut seeded(1)).unwrap();
    for p in 1..g.len() {
        let prefix = Trajectory::new(0, g.tokens[..p].to_vec());
        let probs = t.model.predict_next(&prefix, &w.cities[0]).unwrap();
        let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        assert_eq!(g.tokens[p].loc, best);
    }
}

#[test]
fn replay_set_composition() {
    let w = world(4, 50);
    let t = teacher(&w, ModelConfig::tiny(), 3, 0);
    let x_new = &w.data[3];
    let recs = build_replay_set(Some(&t), x_new, &ReplayConfig { alpha: 0.2, ..Default::default() }).unwrap();
    assert_eq!(recs.len(), 50 + 3 * 10);
    for c in 0..3 {
        assert_eq!(recs.iter().filter(|r| r.pseudo && r.traj.city_id == c).count(), 10);
    }
    for r in recs.iter().filter(|r| r.pseudo) {
        let tpl = &x_new[r.template.unwrap()];
        assert_eq!(r.traj.len(), tpl.len());
        assert!(r.traj.slots().eq(tpl.slots()));
        let d = r.teacher.as_ref().unwrap();
        assert_eq!(d.rows, r.traj.len() - 1);
        assert!((0..d.rows).all(|i| (d.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9));
    }
    assert_eq!(build_replay_set(None, x_new, &ReplayConfig::default()).unwrap().len(), 50);
}

#[test]
fn one_epoch_lowers_the_loss() {
    let w = world(2, 60);
    let train: Vec<Trajectory> = w.data.concat();
    let q = Quantizer::fit(16, train.iter().map(|t| (t, &w.cities[t.city_id as usize])));
    let mut m = MoEModel::new(ModelConfig::tiny(), q).unwrap();
    let cities: Vec<&City> = w.cities.iter().collect();
    cities.iter().for_each(|c| {
        m.register_city(c.city_id);
    });
    let before = mean_loss(&m, &train, &cities).unwrap();
    let logs = base_train(&mut m, &cities, &train, &TrainConfig { epochs: 1, ..TrainConfig::desk_base() }).unwrap();
    let after = mean_loss(&m, &train, &cities).unwrap();
    assert!(after < before, "{after} >= {before}");
    assert_eq!(logs.len(), 1);
    assert_eq!(m.lineage.len(), 1);
}

#[test]
fn base_model_beats_popularity() {
    let sc = build_scenario(&ScenarioConfig::desk(0)).unwrap();
    let (base, logs) = sc.train_base(true).unwrap();
    assert!(logs.last().unwrap().loss < logs[0].loss);
    for c in sc.base_ids() {
        let (city, sp) = (sc.city(c).unwrap(), sc.split(c).unwrap());
        let model = acc_at_k(&collect_predictions(&ModelScorer { model: &base.model }, &sp.test, city).unwrap(), 1).unwrap();
        let pop = acc_at_k(&collect_predictions(&Popularity(markov_fit(&sp.train, city).unwrap()), &sp.test, city).unwrap(), 1).unwrap();
        assert!(model > pop, "city {c}: {model} <= {pop}");
    }
}

#[test]
fn parameters_outside_the_mask_do_not_move() {
    let w = world(1, 30);
    let t = teacher(&w, ModelConfig::tiny(), 1, 0);
    let mut m = (*t.model).clone();
    let before = m.params.digests();
    let mut mask = ParamMask::none();
    mask.extend(m.router_params(1));
    mask.extend(m.expert_params(0, 2));
    let records: Vec<Record> = w.data[0].iter().cloned().map(Record::real).collect();
    let cities: Vec<&City> = w.cities.iter().collect();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::desk_base() };
    train_with_mask(&mut m, &records, &cities, &mask, &cfg, 0..2, &mut Adam::new()).unwrap();
    let after = m.params.digests();
    let trainable: Vec<String> = mask.iter().map(|id| m.params.name(id).to_string()).collect();
    for (name, d) in &before {
        assert_eq!(trainable.contains(name), after[name] != *d, "{name}");
    }
}

#[test]
fn staged_rounds_freeze_what_the_schedule_says() {
    let w = world(2, 30);
    let config = ModelConfig { n_layers: 4, ..ModelConfig::tiny() };
    let t = teacher(&w, config, 1, 1);
    let x_new = &w.data[1];
    let cfg = TrainConfig { epochs: 4, ..TrainConfig::desk_continual() };
    let recs = build_replay_set(Some(&t), x_new, &ReplayConfig::default()).unwrap();
    let mut student = (*t.model).clone();
    student.register_city(1);
    let old = student.expert_counts().to_vec();
    let refs: Vec<&Trajectory> = recs.iter().map(|r| &r.traj).collect();
    let cities: Vec<&City> = w.cities.iter().collect();
    let stats = collect_activation_stats(&student, &refs, &cities).unwrap();
    student.add_expert(&mobgcl::model::ExpertInit::most_active(&stats.freq, 0)).unwrap();
    let stats = collect_activation_stats(&student, &refs, &cities).unwrap();
    let schedule = build_stage_schedule(4, 4).unwrap();
    assert_eq!(schedule.stages.iter().map(|s| s.layers).collect::<Vec<_>>(), vec![(0, 3), (1, 2)]);
    let mut opt = Adam::new();
    let mobility: Vec<String> = student.mobility_params().into_iter().map(|id| student.params.name(id).to_string()).collect();
    for stage in &schedule.stages {
        let mask = select_trainable_params(stage, &student, &stats, &old, None);
        let names: Vec<String> = mask.iter().map(|id| student.params.name(id).to_string()).collect();
        assert!(mobility.iter().all(|n| names.contains(n)));
        if stage.index == 1 {
            for e in 0..old[0] {
                assert!(!names.iter().any(|n| n.starts_with(&format!("layer.0.expert.{e}."))));
            }
        }
        let before = student.params.digests();
        train_with_mask(&mut student, &recs, &cities, &mask, &cfg, stage.epochs.clone(), &mut opt).unwrap();
        for (name, d) in student.params.digests() {
            if !names.contains(&name) {
                assert_eq!(before[&name], d, "{name} changed in stage {}", stage.index);
            }
        }
    }
}

#[test]
fn rounds_leave_the_teacher_alone_and_are_reproducible() {
    let w = world(2, 30);
    let t = teacher(&w, ModelConfig::tiny(), 1, 1);
    let snapshot = t.model.params.digests();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::desk_continual() };
    let replay = ReplayConfig::default();
    let a = continual_update(&t, &w.cities[1], &w.data[1], &replay, &cfg, Variant::Gcl).unwrap();
    assert_eq!(t.model.params.digests(), snapshot);
    assert_eq!(t.model.params.fingerprint(), t.fingerprint);
    let b = continual_update(&t, &w.cities[1], &w.data[1], &replay, &cfg, Variant::Gcl).unwrap();
    assert_eq!(a.model.params.fingerprint(), b.model.params.fingerprint());
    assert_eq!(a.manifest, b.manifest);
    let c = continual_update(&t, &w.cities[1], &w.data[1], &replay, &TrainConfig { seed: 1, ..cfg.clone() }, Variant::Gcl).unwrap();
    assert_ne!(a.model.params.fingerprint(), c.model.params.fingerprint());

    let last = a.model.lineage.last().unwrap();
    assert_eq!(last.parent_fingerprint.as_deref(), Some(t.fingerprint.as_str()));
    assert_eq!(a.manifest.teacher_fingerprint, t.fingerprint);
    assert_eq!(a.manifest.pseudo_per_city[&0], 6);
    assert_eq!(a.model.expert_counts(), &[4, 4]);
    assert!(continual_update(&t, &w.cities[0], &w.data[0], &replay, &cfg, Variant::Gcl).is_err());

    let ft = continual_update(&t, &w.cities[1], &w.data[1], &replay, &cfg, Variant::FullTune).unwrap();
    assert!(ft.manifest.pseudo_per_city.is_empty());
    assert_eq!(ft.model.expert_counts(), &[3, 3]);
    let et = continual_update(&t, &w.cities[1], &w.data[1], &replay, &cfg, Variant::ExpertTune).unwrap();
    assert_eq!(et.model.expert_counts(), &[4, 4]);
}

#[test]
fn gradients_match_finite_differences() {
    let w = world(2, 12);
    let t = teacher(&w, ModelConfig::tiny(), 1, 0);
    let mut recs = build_replay_set(Some(&t), &w.data[1], &ReplayConfig { alpha: 0.5, ..Default::default() }).unwrap();
    recs.truncate(4);
    recs.extend(build_replay_set(Some(&t), &w.data[1], &ReplayConfig { alpha: 0.5, ..Default::default() }).unwrap().into_iter().filter(|r| r.pseudo).take(3));
    let mut m = (*t.model).clone();
    m.register_city(1);
    let cities: Vec<&City> = w.cities.iter().collect();
    let refs: Vec<&Record> = recs.iter().collect();
    let mask = ParamMask::all(&m.params);
    let (_, grads) = batch_objective(&m, &refs, &cities, 0.7, &mask).unwrap();
    let mut rng = seeded(2);
    let mut checked = 0;
    for (id, g) in &grads {
        for j in 0..g.len() {
            if rand::Rng::gen_bool(&mut rng, 0.02) {
                let h = 1e-5;
                let orig = m.params.get(*id).data[j];
                m.params.get_mut(*id).data[j] = orig + h;
                let (lp, _) = batch_objective(&m, &refs, &cities, 0.7, &ParamMask::none()).unwrap();
                m.params.get_mut(*id).data[j] = orig - h;
                let (lm, _) = batch_objective(&m, &refs, &cities, 0.7, &ParamMask::none()).unwrap();
                m.params.get_mut(*id).data[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.data[j];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6), "{} [{j}]: {an} vs {fd}", m.params.name(*id));
                checked += 1;
            }
        }
    }
    assert!(checked > 20);
}
