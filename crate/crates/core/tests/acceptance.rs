//! Acceptance suite. Runs without the libtest harness so that every
//! criterion's `[PASS]` or `[FAIL]` line reaches the console. Positional
//! arguments filter criteria by substring.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tetris_core::kernels::RandomSource;
use tetris_core::metrics::rv_coefficient;
use tetris_core::model::{FactorType, Hyperparams, IndicatorMatrix, ModelState};
use tetris_core::pipeline::{run_pipeline_to_dir, run_replicate, PipelineConfig, ReplicateOutcome};
use tetris_core::postprocess::{
    credible_radius, indicator_distance, recover_loadings_from_samples,
};
use tetris_core::sampler::{
    gibbs_sweep, sample_indicator_from_prior, sample_parameters_from_prior, simulate_data,
    ChainConfig, IndicatorMove, SharingMode,
};
use tetris_core::sim::ScenarioConfig;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "[{}] criterion {id}: {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- 1

const GEWEKE_DRAWS: usize = 20_000;
const GEWEKE_STUDIES: usize = 2;
const GEWEKE_FEATURES: usize = 3;
const GEWEKE_SUBJECTS: usize = 4;
const GEWEKE_MAX_FREE: usize = 2;

fn geweke_hyper() -> Hyperparams {
    Hyperparams {
        alpha: 1.0,
        beta: 1.0,
        nu: 9.0,
        a1: 5.0,
        a2: 5.0,
        a_psi: 5.0,
        b_psi: 5.0,
    }
}

fn geweke_stats(state: &ModelState) -> Vec<f64> {
    let mut g = Vec::new();
    for k in 0..GEWEKE_STUDIES {
        for p in 0..GEWEKE_FEATURES {
            g.push(state.lambda[(p, k)]);
        }
    }
    g.push(state.psi_inv[(0, 0)]);
    g.push(state.delta[0]);
    g.push(state.indicator.n_free() as f64);
    g.push(
        state
            .indicator
            .free_columns()
            .iter()
            .filter(|c| c.count() == 2)
            .count() as f64,
    );
    let second: Vec<f64> = g.iter().map(|v| v * v).collect();
    g.extend(second);
    g
}

const GEWEKE_NAMES: [&str; 10] = [
    "L11", "L21", "L31", "L12", "L22", "L32", "psi_inv", "delta1", "n_free", "n_shared",
];

fn prior_state(src: &mut RandomSource) -> ModelState {
    let hyper = geweke_hyper();
    let ind = sample_indicator_from_prior(
        GEWEKE_STUDIES,
        &hyper,
        SharingMode::Free,
        GEWEKE_MAX_FREE,
        src,
    )
    .unwrap();
    sample_parameters_from_prior(
        ind,
        &[GEWEKE_SUBJECTS; GEWEKE_STUDIES],
        GEWEKE_FEATURES,
        &hyper,
        src,
    )
    .unwrap()
}

/// Mean and standard error from independent draws.
fn iid_summary(draws: &[Vec<f64>], j: usize) -> (f64, f64) {
    let n = draws.len() as f64;
    let m = draws.iter().map(|d| d[j]).sum::<f64>() / n;
    let v = draws.iter().map(|d| (d[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Mean and batch-means standard error from a correlated chain.
fn batch_summary(draws: &[Vec<f64>], j: usize, batches: usize) -> (f64, f64) {
    let size = draws.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| {
            draws[b * size..(b + 1) * size]
                .iter()
                .map(|d| d[j])
                .sum::<f64>()
                / size as f64
        })
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    (m, (v / batches as f64).sqrt())
}

fn geweke(indicator_move: IndicatorMove) -> (f64, String) {
    let hyper = geweke_hyper();
    let mut src = RandomSource::new(20_240_601);
    let forward: Vec<Vec<f64>> = (0..GEWEKE_DRAWS)
        .map(|_| geweke_stats(&prior_state(&mut src)))
        .collect();

    let config = ChainConfig {
        max_free_factors: GEWEKE_MAX_FREE,
        indicator_move,
        ..ChainConfig::default()
    };
    let mut src = RandomSource::new(20_240_602);
    let mut state = prior_state(&mut src);
    let mut data = simulate_data(&state, &mut src).unwrap();
    let mut chain = Vec::with_capacity(GEWEKE_DRAWS);
    for it in 0..GEWEKE_DRAWS {
        gibbs_sweep(&mut state, &data, &hyper, &config, &mut src, it).unwrap();
        data = simulate_data(&state, &mut src).unwrap();
        chain.push(geweke_stats(&state));
    }

    let mut worst = (0.0f64, String::new());
    for j in 0..forward[0].len() {
        let (m1, se1) = iid_summary(&forward, j);
        let (m2, se2) = batch_summary(&chain, j, 50);
        let z = (m1 - m2) / (se1 * se1 + se2 * se2).sqrt();
        let name = format!(
            "{}{}",
            if j < GEWEKE_NAMES.len() {
                "E "
            } else {
                "E sq "
            },
            GEWEKE_NAMES[j % GEWEKE_NAMES.len()]
        );
        println!(
            "  geweke {indicator_move:?} {name:<12} forward {m1:>9.4} gibbs {m2:>9.4} z {z:>6.2}"
        );
        if z.abs() > worst.0 {
            worst = (z.abs(), name);
        }
    }
    worst
}

fn criterion_1_geweke_joint_distribution() {
    let mut pass = true;
    let mut detail = Vec::new();
    for mode in [IndicatorMove::Conditional, IndicatorMove::Collapsed] {
        let (z, name) = geweke(mode);
        pass &= z < 4.0;
        detail.push(format!("{mode:?} max |z| = {z:.2} ({name})"));
    }
    report(
        1,
        "Geweke joint-distribution test",
        pass,
        &detail.join(", "),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn random_indicator(rng: &mut ChaCha8Rng, n_studies: usize, n_free: usize) -> IndicatorMatrix {
    let free: Vec<FactorType> = (0..n_free)
        .map(|_| FactorType(rng.random_range(1..(1u64 << n_studies))))
        .collect();
    IndicatorMatrix::with_free_columns(n_studies, &free).unwrap()
}

/// Minimum over all orderings of the (zero-padded) columns of `b`.
fn brute_force_distance(a: &IndicatorMatrix, b: &IndicatorMatrix) -> u32 {
    let k = a.n_factors().max(b.n_factors());
    let pad = |m: &IndicatorMatrix| {
        let mut c = m.columns().to_vec();
        c.resize(k, FactorType(0));
        c
    };
    let (ca, cb) = (pad(a), pad(b));
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = u32::MAX;
    loop {
        let d: u32 = (0..k).map(|j| ca[j].hamming(cb[perm[j]])).sum();
        best = best.min(d);
        // next lexicographic permutation
        let Some(i) = (0..k.saturating_sub(1))
            .rev()
            .find(|&i| perm[i] < perm[i + 1])
        else {
            break;
        };
        let j = (i + 1..k).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    best
}

fn criterion_2_flip_distance_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut agree = 0;
    let pairs = 200;
    for _ in 0..pairs {
        let s = rng.random_range(1..=4);
        let ka = rng.random_range(s..=7);
        let kb = rng.random_range(s..=7);
        let a = random_indicator(&mut rng, s, ka - s);
        let b = random_indicator(&mut rng, s, kb - s);
        if indicator_distance(&a, &b).unwrap() == brute_force_distance(&a, &b) {
            agree += 1;
        }
    }
    let pass = agree == pairs;
    report(
        2,
        "flip distance equals brute force",
        pass,
        &format!("{agree}/{pairs} pairs agree"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3-5

const ACCEPTANCE_SEED: u64 = 20_250_101;

fn scenario_config(
    scenario: ScenarioConfig,
    replicates: usize,
    sharing: SharingMode,
) -> PipelineConfig {
    PipelineConfig {
        scenario,
        n_iterations: 10_000,
        burn_in: 8_000,
        thin: 1,
        sharing,
        replicates,
        seed: ACCEPTANCE_SEED,
        ..PipelineConfig::default()
    }
}

fn run_all(config: &PipelineConfig) -> Vec<ReplicateOutcome> {
    (0..config.replicates)
        .map(|r| run_replicate(config, r).unwrap())
        .collect()
}

fn criterion_3_scenario1_structural_separation() {
    let config = scenario_config(ScenarioConfig::scenario1(0.8), 10, SharingMode::Free);
    let outcomes = run_all(&config);
    let mut good = 0;
    let mut rvs = Vec::new();
    for o in &outcomes {
        let rv = o.report.rv_common_loading.unwrap_or(0.0);
        let mass = o.report.common_mass_first_half.unwrap_or(0.0);
        let ok = rv >= 0.80 && mass >= 0.90;
        println!(
            "  replicate {}: common RV {rv:.3}, first-half mass {mass:.3} {}",
            o.replicate + 1,
            if ok { "ok" } else { "miss" }
        );
        good += usize::from(ok);
        rvs.push(rv);
    }
    let pass = good >= 7;
    report(
        3,
        "Scenario 1 structural separation",
        pass,
        &format!(
            "{good}/10 replicates meet both thresholds, median common RV {:.3}",
            median(&rvs)
        ),
    );
    assert!(pass);
}

fn study_medians(outcomes: &[ReplicateOutcome]) -> Vec<f64> {
    let s = outcomes[0].report.rv_study_covariances.len();
    (0..s)
        .map(|j| {
            median(
                &outcomes
                    .iter()
                    .map(|o| o.report.rv_study_covariances[j])
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

fn criterion_4_scenario2_study_covariances() {
    let scenario = ScenarioConfig::Scenario2 {
        n: 10,
        p: 60,
        sparsity: 0.8,
        n_partial: 2,
    };
    let free = study_medians(&run_all(&scenario_config(
        scenario.clone(),
        10,
        SharingMode::Free,
    )));
    let constrained = study_medians(&run_all(&scenario_config(
        scenario,
        10,
        SharingMode::CommonAndSpecificOnly,
    )));
    let all_high = free.iter().all(|&v| v > 0.75);
    let wins = free
        .iter()
        .zip(&constrained)
        .filter(|(f, c)| f >= c)
        .count();
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let pass = all_high && wins >= 3;
    report(
        4,
        "Scenario 2 study-covariance recovery",
        pass,
        &format!(
            "free medians [{}], constrained medians [{}], free wins {wins}/4",
            fmt(&free),
            fmt(&constrained)
        ),
    );
    assert!(pass);
}

fn criterion_5_scenario3_scalability() {
    let config = scenario_config(ScenarioConfig::scenario3(1), 3, SharingMode::Free);
    let outcomes = run_all(&config);
    let mut rvs = Vec::new();
    let mut found = 0;
    for o in &outcomes {
        let hit = o.estimate.indicator.free_columns().iter().any(|z| {
            let first = (0..8).filter(|&s| z.contains(s)).count();
            let last = (8..16).filter(|&s| z.contains(s)).count();
            first >= 6 && last <= 1
        });
        let labels: Vec<String> = o
            .estimate
            .indicator
            .free_columns()
            .iter()
            .map(|z| z.label(16))
            .collect();
        println!(
            "  replicate {}: full RV {:.3}, free columns {}",
            o.replicate + 1,
            o.report.rv_full_loading,
            labels.join(" ")
        );
        rvs.push(o.report.rv_full_loading);
        found += usize::from(hit);
    }
    let med = median(&rvs);
    let pass = med >= 0.6 && found == outcomes.len();
    report(
        5,
        "Scenario 3 scalability",
        pass,
        &format!(
            "median full RV {med:.3}, partial column found in {found}/{} replicates",
            outcomes.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

fn criterion_6_loading_recovery_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ind = IndicatorMatrix::from_rows(&[
        vec![1, 0, 0, 1, 1, 1, 1],
        vec![0, 1, 0, 1, 1, 0, 1],
        vec![0, 0, 1, 1, 0, 1, 0],
    ])
    .unwrap();
    let p = 12;
    let lambda = DMatrix::from_fn(p, ind.n_factors(), |_, _| rng.random_range(-1.0..1.0));
    let samples = vec![lambda.clone(); 25];
    let rec = recover_loadings_from_samples(&samples, &ind).unwrap();
    let mut worst = 0.0f64;
    for (_, cols) in ind.types() {
        let t = lambda.select_columns(&cols);
        let e = rec.lambda_hat.select_columns(&cols);
        let truth = &t * t.transpose();
        let err = (&e * e.transpose() - &truth).norm() / truth.norm();
        worst = worst.max(err);
    }
    let pass = worst < 1e-8;
    report(
        6,
        "loading recovery exactness",
        pass,
        &format!("max relative error {worst:.2e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

fn coverage_at(distances: &[u32], eps: u32) -> f64 {
    distances.iter().filter(|&&d| d <= eps).count() as f64 / distances.len() as f64
}

fn ball_contract_holds(distances: &[u32], level: f64) -> bool {
    let (eps, cov) = credible_radius(distances, level).unwrap();
    let cover_ok = cov >= level && cov == coverage_at(distances, eps);
    let minimal = (0..eps).all(|e| coverage_at(distances, e) < level);
    cover_ok && minimal
}

/// All nondecreasing sequences of `len` values in 0..=max, i.e. every
/// multiset of that size.
fn sorted_sequences(len: usize, max: u32) -> Vec<Vec<u32>> {
    if len == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for head in sorted_sequences(len - 1, max) {
        let lo = head.last().copied().unwrap_or(0);
        for v in lo..=max {
            let mut next = head.clone();
            next.push(v);
            out.push(next);
        }
    }
    out
}

fn criterion_7_credible_ball_contract() {
    let mut checked = 0usize;
    let mut failed = 0usize;
    // every multiset over {0, 1, 2, 3} of size up to 8
    for size in 1..=8usize {
        for distances in sorted_sequences(size, 3) {
            for level in [0.05, 0.5, 0.9, 0.95, 0.99] {
                checked += 1;
                failed += usize::from(!ball_contract_holds(&distances, level));
            }
        }
    }
    // random multisets of every size up to 1000
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for size in 1..=1000usize {
        let max_d = rng.random_range(0..20u32);
        let distances: Vec<u32> = (0..size).map(|_| rng.random_range(0..=max_d)).collect();
        let level = rng.random_range(0.01..0.999);
        checked += 1;
        failed += usize::from(!ball_contract_holds(&distances, level));
    }
    // through the sample-level entry point
    let center = IndicatorMatrix::with_free_columns(2, &[FactorType::all(2)]).unwrap();
    let samples: Vec<IndicatorMatrix> = (0..40)
        .map(|i| random_indicator(&mut rng, 2, i % 3))
        .collect();
    let ball =
        tetris_core::postprocess::credible_ball_from_samples(&samples, &center, 0.9).unwrap();
    let d: Vec<u32> = samples
        .iter()
        .map(|m| indicator_distance(m, &center).unwrap())
        .collect();
    checked += 1;
    failed += usize::from(
        ball.coverage < 0.9
            || (0..ball.epsilon_star).any(|e| coverage_at(&d, e) >= 0.9)
            || ball.coverage != coverage_at(&d, ball.epsilon_star),
    );
    let pass = failed == 0;
    report(
        7,
        "credible-ball minimality and coverage",
        pass,
        &format!("{failed} failures in {checked} checks"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

fn random_psd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let r = rng.random_range(1..=p);
    let b = DMatrix::from_fn(p, r, |_, _| rng.random_range(-2.0..2.0));
    let m = &b * b.transpose();
    (&m + m.transpose()) * 0.5
}

fn criterion_8_rv_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    for _ in 0..1000 {
        let p = rng.random_range(1..=20);
        let s = random_psd(&mut rng, p);
        let t = random_psd(&mut rng, p);
        let st = rv_coefficient(&s, &t).unwrap();
        let ts = rv_coefficient(&t, &s).unwrap();
        let c = rng.random_range(0.01..100.0);
        let scaled = rv_coefficient(&(&s * c), &t).unwrap();
        let own = rv_coefficient(&s, &s).unwrap();
        let mut bump = |name, bad: bool| {
            if bad {
                *failures.entry(name).or_default() += 1;
            }
        };
        bump("symmetry", (st - ts).abs() > 1e-10);
        bump("bounds", !(-1e-10..=1.0 + 1e-10).contains(&st));
        bump("scale", (st - scaled).abs() > 1e-10);
        bump("self", (own - 1.0).abs() > 1e-10);
    }
    let pass = failures.is_empty();
    report(
        8,
        "RV invariants over 1000 PSD pairs",
        pass,
        &format!("failures {failures:?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn collect_files(root: &std::path::Path) -> BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn criterion_9_pipeline_determinism() {
    let config = PipelineConfig {
        scenario: ScenarioConfig::Custom {
            n_studies: 2,
            n: 20,
            p: 10,
            sparsity: 0.5,
            n_common: 2,
        },
        n_iterations: 400,
        burn_in: 200,
        thin: 2,
        replicates: 2,
        seed: 9,
        ..PipelineConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline_to_dir(&config, a.path(), 2).unwrap();
    run_pipeline_to_dir(&config, b.path(), 1).unwrap();
    let fa = collect_files(a.path());
    let fb = collect_files(b.path());
    let differing: Vec<_> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();
    let pass = !fa.is_empty() && fa.len() == fb.len() && differing.is_empty();
    report(
        9,
        "pipeline determinism",
        pass,
        &format!(
            "{} files compared, {} differ",
            fa.len(),
            differing.len() + fa.len().abs_diff(fb.len())
        ),
    );
    assert!(pass);
}

fn main() {
    let criteria: [(&str, fn()); 9] = [
        (
            "criterion_1_geweke_joint_distribution",
            criterion_1_geweke_joint_distribution,
        ),
        (
            "criterion_2_flip_distance_matches_brute_force",
            criterion_2_flip_distance_matches_brute_force,
        ),
        (
            "criterion_3_scenario1_structural_separation",
            criterion_3_scenario1_structural_separation,
        ),
        (
            "criterion_4_scenario2_study_covariances",
            criterion_4_scenario2_study_covariances,
        ),
        (
            "criterion_5_scenario3_scalability",
            criterion_5_scenario3_scalability,
        ),
        (
            "criterion_6_loading_recovery_exactness",
            criterion_6_loading_recovery_exactness,
        ),
        (
            "criterion_7_credible_ball_contract",
            criterion_7_credible_ball_contract,
        ),
        ("criterion_8_rv_invariants", criterion_8_rv_invariants),
        (
            "criterion_9_pipeline_determinism",
            criterion_9_pipeline_determinism,
        ),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in criteria {
            println!("{name}: test");
        }
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        if std::panic::catch_unwind(run).is_err() {
            failed.push(name);
        }
    }
    println!(
        "acceptance: {} run, {} passed, {} failed",
        ran,
        ran - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
