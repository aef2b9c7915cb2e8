use nalgebra::DMatrix;

use tetris_core::io;
use tetris_core::kernels::RandomSource;
use tetris_core::model::FactorType;
use tetris_core::sim::{
    generate, generate_scenario1, generate_scenario2, generate_scenario3, regenerate,
    ScenarioConfig, SimTruth,
};

fn sigma_oracle(truth: &SimTruth, s: usize) -> DMatrix<f64> {
    // sum of outer products of the study's columns, plus the noise diagonal
    let p = truth.lambda.nrows();
    let mut sigma = DMatrix::zeros(p, p);
    for k in 0..truth.indicator.n_factors() {
        if truth.indicator.get(s, k) {
            let c = truth.lambda.column(k);
            sigma += c * c.transpose();
        }
    }
    for j in 0..p {
        sigma[(j, j)] += truth.psi[(s, j)];
    }
    sigma
}

#[test]
fn sigma_matches_the_generative_form() {
    let cases = [
        ScenarioConfig::scenario1(0.5),
        ScenarioConfig::Scenario2 {
            n: 35,
            p: 35,
            sparsity: 0.2,
            n_partial: 1,
        },
        ScenarioConfig::scenario3(1),
    ];
    for (i, config) in cases.iter().enumerate() {
        let (_, truth) = generate(config, 100 + i as u64).unwrap();
        for s in 0..truth.indicator.n_studies() {
            let expect = sigma_oracle(&truth, s);
            assert!((&truth.sigma[s] - &expect).norm() <= 1e-12 * expect.norm());
            assert!(truth.sigma[s]
                .symmetric_eigenvalues()
                .iter()
                .all(|&e| e > 0.0));
        }
        assert!(truth.psi.iter().all(|&v| (0.0..0.5).contains(&v)));
    }
}

#[test]
fn large_sample_covariance_converges_to_sigma() {
    let (_, truth) = generate_scenario2(10, 20, 0.5, 1, 77).unwrap();
    let mut src = RandomSource::new(78);
    let big = regenerate(&truth, 5000, &mut src).unwrap();
    for s in 0..4 {
        let x = big.study(s);
        let n = x.nrows() as f64;
        let emp = x.transpose() * x / n;
        let rel = (&emp - &truth.sigma[s]).norm() / truth.sigma[s].norm();
        assert!(rel < 0.1, "study {s}: relative error {rel}");
    }
}

#[test]
fn nonzero_counts_and_supports() {
    let (data, truth) = generate_scenario1(0.8, 10, 60, 5).unwrap();
    assert_eq!(data.n_studies(), 4);
    assert!(data.studies().iter().all(|x| x.shape() == (10, 60)));
    let common = FactorType::all(4);
    let partial = FactorType::from_studies(&[0, 1]);
    for k in 0..truth.indicator.n_factors() {
        let col = truth.lambda.column(k);
        let top = (0..30).filter(|&i| col[i] != 0.0).count();
        let bottom = (30..60).filter(|&i| col[i] != 0.0).count();
        match truth.indicator.column(k) {
            z if z == common => assert_eq!((top, bottom), (6, 0)),
            z if z == partial => assert_eq!((top, bottom), (0, 6)),
            _ => assert_eq!(top + bottom, 12),
        }
        assert!(col.iter().all(|v| (-1.0..1.0).contains(v)));
    }
    let types = truth.indicator.types();
    assert_eq!(types[&common].len(), 3);
    assert_eq!(types[&partial].len(), 3);
    assert_eq!(truth.indicator.n_factors(), 10);

    for n_partial in 0..=2 {
        let (_, truth) = generate_scenario2(60, 10, 0.2, n_partial, 6).unwrap();
        assert_eq!(truth.indicator.n_factors(), 7 + n_partial);
        for k in 0..truth.indicator.n_factors() {
            assert_eq!(
                truth.lambda.column(k).iter().filter(|&&v| v != 0.0).count(),
                8
            );
        }
    }
    let (data, truth) = generate_scenario3(1, 0.8, 7).unwrap();
    assert_eq!(data.n_studies(), 16);
    assert_eq!(truth.indicator.n_factors(), 20);
    let first8 = FactorType::from_studies(&(0..8).collect::<Vec<_>>());
    assert_eq!(
        truth
            .indicator
            .columns()
            .iter()
            .filter(|&&z| z == first8)
            .count(),
        1
    );
    assert_eq!(
        generate_scenario3(0, 0.8, 7)
            .unwrap()
            .1
            .indicator
            .n_factors(),
        19
    );
}

#[test]
fn odd_feature_count_is_rejected_for_scenario1() {
    assert!(generate_scenario1(0.8, 10, 61, 1).is_err());
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let (data, truth) = generate_scenario2(10, 60, 0.8, 2, 42).unwrap();
        io::write_dataset(&dir.join("data"), &data).unwrap();
        io::write_truth(&dir.join("truth"), &truth).unwrap();
    }
    for sub in [
        "data/study_1.csv",
        "data/study_4.csv",
        "truth/truth.json",
        "truth/lambda.csv",
        "truth/psi.csv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(sub)).unwrap(),
            std::fs::read(b.path().join(sub)).unwrap(),
            "{sub}"
        );
    }
    let (d1, _) = generate_scenario2(10, 60, 0.8, 2, 42).unwrap();
    let (d2, _) = generate_scenario2(10, 60, 0.8, 2, 43).unwrap();
    assert_ne!(d1, d2);
}
