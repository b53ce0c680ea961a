use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mobgcl::data::{generate_synthetic_city, save_city, save_trajectories, split_dataset, write_json, City, Quantizer, SplitManifest, SynthParams, Trajectory};
use mobgcl::engine::{base_train, continual_update, TeacherSnapshot, Variant};
use mobgcl::eval::{
    acc_at_k, build_scenario, collect_predictions, evaluate_model, order_invariance_experiment, replay_volume_sweep, run_ablation, Ablation, EvalReport,
    ModelScorer, ScenarioConfig,
};
use mobgcl::model::{load_checkpoint, read_manifest, save_checkpoint, MoEModel};
use mobgcl::privacy::{
    estimate_dp_epsilon, membership_inference_attack, uniqueness_test, AttackClassifier, DpConfig, MemorizingGenerator, ModelGenerator, TrajectoryGenerator,
};
use mobgcl::rng::derive_seed;
use serde::Serialize;

use crate::config::{AuditConfig, ExperimentConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::ledger::{unix_now, LedgerEntry, RunLedger};
use crate::output::{params_hash, OutputDir, OutputFile};
use crate::plot;
use crate::registry::{Registry, SPLIT_FILE};
use crate::{AuditKind, BenchKind, GeneratorArg, Stage, VariantArg};

fn ledger_for(root: &Path) -> RunLedger {
    RunLedger::new(&Registry::new(root).runs_dir().join("ledger.jsonl"))
}

#[derive(Serialize)]
pub struct GenCity {
    pub seed: u64,
    pub city_id: u32,
    pub locations: usize,
    pub trajectories: usize,
    pub sharpness: f64,
    pub explore: f64,
    pub taste_spread: f64,
    pub split: [f64; 3],
}

pub fn gen_city(root: &Path, p: GenCity, out: Option<PathBuf>, force: bool) -> CliResult<()> {
    let sum: f64 = p.split.iter().sum();
    if p.split.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(CliError::Usage(format!("--split fractions must be nonnegative and sum to 1, got {:?}", p.split)));
    }
    let dir = out.unwrap_or_else(|| Registry::new(root).city_dir(p.city_id));
    let out = OutputDir::claim(&dir, force)?;
    let params = SynthParams {
        sharpness: p.sharpness,
        explore_prob: p.explore,
        taste_spread: p.taste_spread,
        ..SynthParams::new(p.city_id, p.locations, p.trajectories)
    };
    let synth = generate_synthetic_city(p.seed, &params)?;
    let split_seed = derive_seed(p.seed, "split", p.city_id as u64);
    let split = split_dataset(&synth.trajectories, p.split, split_seed)?;
    save_city(&out.join("city.json"), &synth.city)?;
    save_trajectories(&out.join("train.jsonl"), &split.train)?;
    save_trajectories(&out.join("val.jsonl"), &split.val)?;
    save_trajectories(&out.join("test.jsonl"), &split.test)?;
    let manifest = SplitManifest {
        city: "city.json".into(),
        train: "train.jsonl".into(),
        val: "val.jsonl".into(),
        test: "test.jsonl".into(),
        seed: split_seed,
        fractions: p.split,
    };
    write_json(&out.join(SPLIT_FILE), &manifest)?;
    out.seal("gen-city", &params_hash(&p), p.seed)?;
    println!(
        "city {} ({} locations): {} train / {} val / {} test trajectories in {}",
        p.city_id,
        synth.city.n_locations(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        dir.display()
    );
    Ok(())
}

fn test_sets<'a>(cities: &'a [mobgcl::data::CityData]) -> Vec<(&'a City, &'a [Trajectory])> {
    cities.iter().map(|d| (&d.city, &d.test[..])).collect()
}

fn summary(report: &EvalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for c in &report.cities {
        m.insert(format!("city{}.acc@1", c.city_id), c.acc1);
        m.insert(format!("city{}.acc@3", c.city_id), c.acc3);
    }
    m
}

fn print_report(report: &EvalReport) {
    for c in &report.cities {
        println!("  city {:>3}: acc@1 {:.4}  acc@3 {:.4}  ({} positions)", c.city_id, c.acc1, c.acc3, c.positions);
    }
}

#[derive(Serialize)]
struct BaseRound<'a> {
    kind: &'a str,
    config_hash: String,
    seed: u64,
    cities: &'a [u32],
    fingerprint: String,
    epochs: Vec<mobgcl::engine::EpochLog>,
}

pub fn train_base(root_override: Option<PathBuf>, config: &Path, out: &Path, force: bool) -> CliResult<()> {
    let cfg = ExperimentConfig::load(config, root_override)?;
    let registry = Registry::new(&cfg.data_root);
    if cfg.base_cities.is_empty() {
        return Err(CliError::Usage("the config lists no base cities".into()));
    }
    let out = OutputDir::claim(out, force)?;
    let started = unix_now();
    let data = registry.load_many(&cfg.base_cities)?;
    let train: Vec<Trajectory> = data.iter().flat_map(|d| d.train.iter().cloned()).collect();
    let by_id: BTreeMap<u32, &City> = data.iter().map(|d| (d.city.city_id, &d.city)).collect();
    let quantizer = Quantizer::fit(cfg.model.quant_bins, train.iter().map(|t| (t, by_id[&t.city_id])));
    let mut model = MoEModel::new(cfg.model.clone(), quantizer)?;
    let cities: Vec<&City> = data.iter().map(|d| &d.city).collect();
    let logs = base_train(&mut model, &cities, &train, &cfg.base_train)?;
    for l in &logs {
        eprintln!("epoch {:>3}  lr {:.2e}  loss {:.4}", l.epoch, l.lr, l.loss);
    }
    save_checkpoint(&model, &out.path)?;
    let mut report = evaluate_model(&model, &test_sets(&data), cfg.seed)?;
    report.config_hash = Some(cfg.hash());
    report.write(&out.path, "eval")?;
    let fingerprint = model.params.fingerprint();
    write_json(
        &out.join("round.json"),
        &BaseRound {
            kind: "base",
            config_hash: cfg.hash(),
            seed: cfg.seed,
            cities: &cfg.base_cities,
            fingerprint: fingerprint.clone(),
            epochs: logs,
        },
    )?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| io_err(&out.path, e))?;
    out.seal("train-base", &cfg.hash(), cfg.seed)?;
    ledger_for(&cfg.data_root).append(&LedgerEntry {
        kind: "base".into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        cities: cfg.base_cities.clone(),
        input_checkpoint: None,
        output_checkpoint: fingerprint.clone(),
        output_path: out.path.clone(),
        metrics: summary(&report),
        started_unix: started,
        finished_unix: unix_now(),
    })?;
    println!("base model {} written to {}", &fingerprint[..12], out.path.display());
    print_report(&report);
    Ok(())
}

#[derive(Serialize)]
struct ContinualRound<'a> {
    config_hash: String,
    seed: u64,
    /// The teacher was not produced by any round in the ledger.
    lineage_warning: bool,
    teacher_path: &'a Path,
    round: &'a mobgcl::engine::RoundManifest,
}

pub fn continual(root_override: Option<PathBuf>, config: &Path, teacher: &Path, city: u32, variant: VariantArg, out: &Path, force: bool) -> CliResult<()> {
    let cfg = ExperimentConfig::load(config, root_override)?;
    let registry = Registry::new(&cfg.data_root);
    let ledger = ledger_for(&cfg.data_root);
    let variant = match variant {
        VariantArg::Gcl => Variant::Gcl,
        VariantArg::FullTune => Variant::FullTune,
        VariantArg::ExpertTune => Variant::ExpertTune,
        VariantArg::WithoutKd => Variant::WithoutKd,
    };
    let snapshot = registry.load_teacher(teacher)?;
    let new = registry.load(city)?;
    let out = OutputDir::claim(out, force)?;
    let started = unix_now();
    let lineage_warning = !ledger.produced(&snapshot.fingerprint)?;
    if lineage_warning {
        eprintln!("warning: teacher {} is not the output of any round in {}", &snapshot.fingerprint[..12], ledger.path().display());
    }
    let round = continual_update(&snapshot, &new.city, &new.train, &cfg.replay, &cfg.continual_train, variant)?;
    for l in &round.manifest.epochs {
        eprintln!("epoch {:>3}  lr {:.2e}  loss {:.4}  ce {:.4}  kd {:.4}", l.epoch, l.lr, l.loss, l.ce, l.kd);
    }
    save_checkpoint(&round.model, &out.path)?;
    let mut ids = snapshot.city_ids();
    ids.push(city);
    let data = registry.load_many(&ids)?;
    let mut report = evaluate_model(&round.model, &test_sets(&data), cfg.seed)?;
    report.config_hash = Some(cfg.hash());
    report.write(&out.path, "eval")?;
    write_json(
        &out.join("round.json"),
        &ContinualRound {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            lineage_warning,
            teacher_path: teacher,
            round: &round.manifest,
        },
    )?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| io_err(&out.path, e))?;
    out.seal("continual", &cfg.hash(), cfg.seed)?;
    let fingerprint = round.model.params.fingerprint();
    ledger.append(&LedgerEntry {
        kind: variant.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        cities: ids,
        input_checkpoint: Some(snapshot.fingerprint.clone()),
        output_checkpoint: fingerprint.clone(),
        output_path: out.path.clone(),
        metrics: summary(&report),
        started_unix: started,
        finished_unix: unix_now(),
    })?;
    println!("{} round on city {city}: model {} written to {}", variant.name(), &fingerprint[..12], out.path.display());
    print_report(&report);
    Ok(())
}

fn model_seed(model: &MoEModel) -> u64 {
    model.lineage.last().map_or(model.config.init_seed, |r| r.seed)
}

pub fn eval(root: &Path, checkpoint: &Path, cities: &[u32], ks: &[usize], out: &Path, force: bool) -> CliResult<()> {
    if cities.is_empty() {
        return Err(CliError::Usage("--cities is empty".into()));
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(CliError::Usage("--k values must be positive".into()));
    }
    let registry = Registry::new(root);
    let model = load_checkpoint(checkpoint)?;
    for &c in cities {
        registry.require(c)?;
        if model.city_index(c).is_err() {
            return Err(CliError::Data(format!("city {c} is registered but the model was never trained on it (model cities: {:?})", model.cities())));
        }
    }
    let data = registry.load_many(cities)?;
    let out = OutputDir::claim(out, force)?;
    let seed = model_seed(&model);
    let report = evaluate_model(&model, &test_sets(&data), seed)?;
    report.write(&out.path, "eval")?;
    let scorer = ModelScorer { model: &model };
    let mut csv = String::from("city,metric,value,seed,round\n");
    for d in &data {
        let preds = collect_predictions(&scorer, &d.test, &d.city)?;
        for &k in ks {
            if k > d.city.n_locations() {
                return Err(CliError::Usage(format!("k = {k} exceeds the {} locations of city {}", d.city.n_locations(), d.city.city_id)));
            }
            let acc = acc_at_k(&preds, k)?;
            println!("city {:>3}  acc@{k} {acc:.4}", d.city.city_id);
            writeln!(csv, "{},acc@{k},{acc},{seed},{}", d.city.city_id, report.round).expect("string write");
        }
    }
    let path = out.join("acc_at_k.csv");
    std::fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    let hash = report.config_hash.clone().unwrap_or_default();
    out.seal("eval", &hash, seed)
}

pub struct AuditArgs {
    pub kind: AuditKind,
    pub city: u32,
    pub checkpoint: Option<PathBuf>,
    pub other: Option<PathBuf>,
    pub generator: GeneratorArg,
    pub config: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Serialize)]
struct AuditParams<'a> {
    kind: &'a str,
    city: u32,
    generator: &'a str,
    checkpoint: Option<String>,
    other: Option<String>,
    audit: &'a AuditConfig,
}

pub fn audit(root_override: Option<PathBuf>, a: AuditArgs, out: &Path, force: bool) -> CliResult<()> {
    let (audit, root) = match &a.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p, root_override)?;
            (cfg.audit, cfg.data_root)
        }
        None => (AuditConfig::default(), root_override.unwrap_or_else(|| PathBuf::from("data"))),
    };
    let registry = Registry::new(&root);
    let data = registry.load(a.city)?;
    let load = |p: &Option<PathBuf>, flag: &str| -> CliResult<TeacherSnapshot> {
        let p = p.as_ref().ok_or_else(|| CliError::Usage(format!("{flag} is required for this audit")))?;
        let snap = registry.load_teacher(p)?;
        snap.city(a.city)?;
        Ok(snap)
    };
    let snapshot = match a.generator {
        GeneratorArg::Model => Some(load(&a.checkpoint, "--checkpoint")?),
        GeneratorArg::Memorize => None,
    };
    let memorizer = MemorizingGenerator {
        memory: data.train.clone(),
        n_locations: data.city.n_locations(),
    };
    let model_gen = snapshot.as_ref().map(|s| ModelGenerator {
        snapshot: s,
        temperature: audit.temperature,
    });
    let generator: &dyn TrajectoryGenerator = match &model_gen {
        Some(g) => g,
        None => &memorizer,
    };
    let kind = match a.kind {
        AuditKind::U => "u",
        AuditKind::Mia => "mia",
        AuditKind::Dp => "dp",
    };
    let fingerprint = |p: &Option<PathBuf>| -> CliResult<Option<String>> {
        p.as_ref().map(|p| Ok(read_manifest(p)?.fingerprint)).transpose()
    };
    let params = AuditParams {
        kind,
        city: a.city,
        generator: if a.generator == GeneratorArg::Memorize { "memorize" } else { "model" },
        checkpoint: fingerprint(&a.checkpoint)?,
        other: fingerprint(&a.other)?,
        audit: &audit,
    };
    let out = OutputDir::claim(out, force)?;
    match a.kind {
        AuditKind::U => {
            let n = audit.templates.min(data.train.len());
            let r = uniqueness_test(generator, &data.train[..n], &data.train, &audit.top_m, a.seed)?;
            write_json(&out.join("uniqueness.json"), &r)?;
            let cdf = out.join("uniqueness_cdf.csv");
            std::fs::write(&cdf, r.cdf_csv()).map_err(|e| io_err(&cdf, e))?;
            for &m in &r.top_m {
                let exact = r.fraction_above(m, 1.0 - 1e-12).unwrap_or(0.0);
                let over = r.fraction_above(m, 0.5).unwrap_or(0.0);
                println!("top-{m}: {:.1}% of {} generations above 0.5, {:.1}% at 1.0", 100.0 * over, r.generations, 100.0 * exact);
            }
        }
        AuditKind::Mia => {
            let n = data.train.len().min(data.test.len());
            let mut reports = Vec::new();
            for c in AttackClassifier::ALL {
                let r = membership_inference_attack(generator, &data.train[..n], &data.test[..n], c, a.seed)?;
                println!("{:<20} success {:.3}{}", c.name(), r.success, if r.degenerate { " (degenerate features)" } else { "" });
                reports.push(r);
            }
            write_json(&out.join("mia.json"), &reports)?;
        }
        AuditKind::Dp => {
            let other = load(&a.other, "--other")?;
            let other_gen = ModelGenerator {
                snapshot: &other,
                temperature: audit.temperature,
            };
            let n = audit.probes.min(data.train.len());
            let cfg = DpConfig {
                delta: audit.delta,
                generations_per_probe: audit.generations_per_probe,
                seed: a.seed,
            };
            let r = estimate_dp_epsilon(generator, &other_gen, &data.train[..n], &cfg)?;
            println!("epsilon over {} probes: mean {:.4}, median {:.4}, p75 {:.4}", r.probes, r.mean, r.median, r.p75);
            write_json(&out.join("dp.json"), &r)?;
        }
    }
    out.seal("audit", &params_hash(&params), a.seed)
}

pub fn plot(report: &Path, out: &Path, force: bool) -> CliResult<()> {
    let value: serde_json::Value = mobgcl::data::read_json(report)?;
    let kind = plot::detect(value)?;
    let out = OutputDir::claim(out, force)?;
    for f in plot::render(&kind, &out.path)? {
        println!("{}", f.display());
    }
    let source = crate::output::sha256_file(report)?;
    let seed = match &kind {
        plot::ReportKind::Uniqueness(r) => r.seed,
        plot::ReportKind::Eval(r) => r.seed,
        plot::ReportKind::Sweep(r) => r.seed,
        plot::ReportKind::Ablation(r) => r.first().map_or(0, |a| a.post.seed),
    };
    out.seal("plot", &source, seed)
}

pub fn export_embeddings(root: &Path, checkpoint: &Path, city: u32, stage: Stage, out: &Path, force: bool) -> CliResult<()> {
    let model = load_checkpoint(checkpoint)?;
    let data = Registry::new(root).load(city)?;
    let out = OutputFile::claim(out, force)?;
    let pre = model.city_location_embeddings(&data.city)?;
    let m = match stage {
        Stage::Pre => pre,
        Stage::Post => model.dcn_encode(&pre)?,
    };
    let mut csv = String::from("location");
    for j in 0..m.cols {
        write!(csv, ",d{j}").expect("string write");
    }
    csv.push('\n');
    for i in 0..m.rows {
        write!(csv, "{i}").expect("string write");
        for v in m.row(i) {
            write!(csv, ",{v}").expect("string write");
        }
        csv.push('\n');
    }
    std::fs::write(&out.path, csv).map_err(|e| io_err(&out.path, e))?;
    out.seal("export-embeddings", &model.config.hash(), model_seed(&model))?;
    println!("{} x {} embeddings written to {}", m.rows, m.cols, out.path.display());
    Ok(())
}

pub fn bench(kind: BenchKind, seed: u64, out: &Path, force: bool) -> CliResult<()> {
    let cfg = ScenarioConfig::desk(seed);
    let out = OutputDir::claim(out, force)?;
    let sc = build_scenario(&cfg)?;
    let new_city = sc.continual_ids()[0];
    let (base, _) = sc.train_base(true)?;
    match kind {
        BenchKind::Ablation => {
            let (plain, _) = sc.train_base(false)?;
            let mut results = Vec::new();
            for a in Ablation::ALL {
                let b = if a.mobility_routing() { &base } else { &plain };
                let r = run_ablation(a, &sc, b, new_city)?;
                println!("{:<12} base acc@1 {:.4} -> {:.4}", a.name(), r.pre.mean_acc1(&r.base_cities)?, r.retention());
                results.push(r);
            }
            write_json(&out.join("ablation.json"), &results)?;
        }
        BenchKind::Order => {
            let fwd = sc.continual_ids();
            let rev: Vec<u32> = fwd.iter().rev().copied().collect();
            let r = order_invariance_experiment(&[fwd, rev], &sc, &base)?;
            for d in &r.deviations {
                println!("city {:>2} acc@{}: {:.2}%", d.city, d.k, 100.0 * d.max_relative_deviation);
            }
            println!("{:.0}% of metrics deviate less than 5%", 100.0 * r.fraction_below(0.05));
            write_json(&out.join("order.json"), &r)?;
        }
        BenchKind::Sweep => {
            let r = replay_volume_sweep(&[0.05, 0.2, 0.4], 0.05, &sc, &base, new_city)?;
            for p in &r.points {
                println!("alpha {:.2}: base acc@1 {:.4}, new city acc@1 {:.4}", p.alpha, p.base_acc1, p.new_acc1);
            }
            write_json(&out.join("sweep.json"), &r)?;
        }
    }
    out.seal("bench", &params_hash(&cfg), seed)
}

pub fn verify_ledger(root: &Path) -> CliResult<()> {
    let ledger = ledger_for(root);
    ledger.verify()?;
    println!("{}: {} rounds, lineage verified", ledger.path().display(), ledger.entries()?.len());
    Ok(())
}
