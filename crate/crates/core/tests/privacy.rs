use mobgcl::data::{generate_synthetic_city, SynthParams, Token, Trajectory};
use mobgcl::privacy::*;
use mobgcl::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

fn traj(pairs: &[(usize, u32)]) -> Trajectory {
    Trajectory::new(0, pairs.iter().map(|&(l, s)| Token::new(l, s)).collect())
}

#[test]
fn similarity_definition() {
    let a = traj(&[(1, 10), (2, 11), (3, 12), (4, 13)]);
    assert_eq!(trajectory_similarity(&a, &a), 1.0);
    let mut b = a.clone();
    b.tokens[2].loc = 9;
    assert_eq!(trajectory_similarity(&a, &b), 0.75);
    b.tokens[2].loc = 3;
    b.tokens[1].slot = 99;
    assert_eq!(trajectory_similarity(&a, &b), 0.75);
    let five = traj(&[(1, 1); 5]);
    let six = traj(&[(1, 1); 6]);
    assert_eq!(trajectory_similarity(&five, &six), 0.0);
}

proptest! {
    #[test]
    fn similarity_is_symmetric_and_bounded(
        a in prop::collection::vec((0usize..4, 0u32..3), 1..8),
        b in prop::collection::vec((0usize..4, 0u32..3), 1..8),
    ) {
        let (a, b) = (traj(&a), traj(&b));
        let s = trajectory_similarity(&a, &b);
        prop_assert_eq!(s, trajectory_similarity(&b, &a));
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(trajectory_similarity(&a, &a), 1.0);
    }
}

fn corpus() -> (Vec<Trajectory>, usize) {
    let s = generate_synthetic_city(4, &SynthParams::new(0, 20, 300)).unwrap();
    (s.trajectories, 20)
}

#[test]
fn memorizer_is_caught_by_both_tests() {
    let (data, n) = corpus();
    let (members, nonmembers) = data.split_at(150);
    let gen = MemorizingGenerator { memory: members.to_vec(), n_locations: n };
    let u = uniqueness_test(&gen, members, members, &[1, 3, 5], 1).unwrap();
    assert!(u.scores.iter().all(|s| s[0] == 1.0));
    assert_eq!(u.fraction_above(1, 0.5), Some(1.0));
    assert_eq!(u.cdf.len(), 3);
    assert_eq!(u.cdf[0], vec![CdfPoint { similarity: 1.0, fraction: 1.0 }]);
    for c in AttackClassifier::ALL {
        let r = membership_inference_attack(&gen, members, nonmembers, c, 2).unwrap();
        assert!(r.success > 0.8, "{}: {}", c.name(), r.success);
        assert!(!r.degenerate);
    }
}

#[test]
fn fresh_lengths_never_match() {
    let (data, _) = corpus();
    let u = uniqueness_test(&FixedLengthGenerator { len: 50 }, &data[..20], &data, &[1, 3, 5], 0).unwrap();
    assert!(u.scores.iter().flatten().all(|&s| s == 0.0));
}

#[test]
fn uniqueness_is_seed_deterministic() {
    let (data, n) = corpus();
    let gen = MemorizingGenerator { memory: data[..10].to_vec(), n_locations: n };
    let a = uniqueness_test(&gen, &data[50..80], &data, &[1, 3], 9).unwrap();
    let b = uniqueness_test(&gen, &data[50..80], &data, &[1, 3], 9).unwrap();
    assert_eq!(a, b);
    assert!(uniqueness_test(&gen, &[], &data, &[1], 9).is_err());
}

#[test]
fn indistinguishable_features_give_a_coin_flip() {
    let mut rng = seeded(11);
    let draw = |rng: &mut mobgcl::rng::Rng| (0..1000).map(|_| rng.gen_range(0..9) as f64 / 8.0).collect::<Vec<_>>();
    let m = draw(&mut rng);
    let n = draw(&mut rng);
    for c in AttackClassifier::ALL {
        let r = mia_from_features(&m, &n, c, 3).unwrap();
        assert!((r.success - 0.5).abs() <= 0.05, "{}: {}", c.name(), r.success);
        assert_eq!(r.n_train + r.n_test, 2000);
        assert_eq!(r.n_train, 1400);
    }
}

#[test]
fn constant_feature_is_flagged() {
    let r = mia_from_features(&[0.25; 10], &[0.25; 10], AttackClassifier::RandomForest, 0).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.success, 0.5);
    assert!(mia_from_features(&[0.1; 3], &[0.1; 4], AttackClassifier::LinearMargin, 0).is_err());
}

#[test]
fn epsilon_hand_case_and_identical_models() {
    let d = Gaussian { mu: 0.0, sigma: 1.0 };
    let dp = Gaussian { mu: 1.0, sigma: 1.0 };
    assert!((epsilon_at(0.0, &d, &dp) - 0.5).abs() < 1e-6);
    assert_eq!(epsilon_at(0.3, &d, &d), 0.0);

    let (data, n) = corpus();
    let gen = MemorizingGenerator { memory: data[..40].to_vec(), n_locations: n };
    let cfg = DpConfig { seed: 5, ..Default::default() };
    let r = estimate_dp_epsilon(&gen, &gen, &data[20..60], &cfg).unwrap();
    assert!(r.per_probe.iter().all(|&e| e == 0.0));
    assert_eq!((r.mean, r.median, r.p75), (0.0, 0.0, 0.0));
    assert_eq!(r.delta, 1e-5);
    assert_eq!(r.generations_per_probe, 16);

    let other = MemorizingGenerator { memory: vec![], n_locations: n };
    let r = estimate_dp_epsilon(&gen, &other, &data[20..60], &cfg).unwrap();
    assert!(r.mean > 0.0 && r.median <= r.p75);
    assert!(r.per_probe.iter().all(|&e| e >= 0.0));
}

#[test]
fn sigma_is_floored_with_a_flag() {
    let (g, floored) = Gaussian::fit(&[0.5; 8]).unwrap();
    assert!(floored);
    assert_eq!(g.sigma, SIGMA_FLOOR);
    let (_, floored) = Gaussian::fit(&[0.0, 1.0]).unwrap();
    assert!(!floored);
}

#[test]
fn percentiles_interpolate() {
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(percentile(&v, 0.5), 2.5);
    assert_eq!(percentile(&v, 0.75), 3.25);
}
